//! Order-independent exact summation.
//!
//! Reductions over the node axis (column means, factored-operator
//! contractions, neighbor aggregation) must not depend on node order:
//! relabeling the nodes of a graph has to permute downstream representations
//! bit-exactly. Naive left-to-right accumulation breaks that at the ulp
//! level, so node-axis sums go through [`ExactSum`], which keeps the running
//! sum as a list of non-overlapping partials (Shewchuk's algorithm) and
//! renders the correctly rounded total. The rounded value of a multiset of
//! addends is then independent of the order they were fed in.

/// Exact accumulator for f64 sums.
///
/// `add` maintains the invariant that `partials` holds non-overlapping
/// doubles of increasing magnitude whose exact sum equals the exact sum of
/// everything added so far. `value` rounds that exact sum to the nearest
/// f64 (ties to even).
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            partials: Vec::with_capacity(4),
        }
    }

    #[inline]
    pub fn add(&mut self, mut x: f64) {
        debug_assert!(x.is_finite(), "ExactSum fed a non-finite value");
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Correctly rounded sum of all values added so far.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        if p.is_empty() {
            return 0.0;
        }
        let mut n = p.len() - 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even correction: if the truncated tail pushes the
        // residual past half an ulp, move to the neighboring float.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Correctly rounded sum of a slice, independent of element order.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut acc = ExactSum::new();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

/// Order-independent dot product: each product rounds once, then the
/// products are summed exactly.
pub fn exact_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = ExactSum::new();
    for (&x, &y) in a.iter().zip(b) {
        acc.add(x * y);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation_is_exact() {
        assert_eq!(exact_sum(&[1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum(&[1.0, 1e100, -1e100]), 1.0);
        assert_eq!(exact_sum(&[0.1, 0.2, 0.3, -0.3, -0.2, -0.1]), 0.0);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(exact_sum(&[]), 0.0);
        assert_eq!(ExactSum::new().value(), 0.0);
    }

    #[test]
    fn matches_naive_on_single_values() {
        assert_eq!(exact_sum(&[42.5]), 42.5);
        assert_eq!(exact_sum(&[-0.0]), -0.0);
    }

    proptest! {
        #[test]
        fn order_independent(mut values in proptest::collection::vec(-1e6f64..1e6, 0..64), seed in 0u64..1000) {
            let forward = exact_sum(&values);
            // deterministic shuffle driven by the seed
            let mut s = seed;
            for i in (1..values.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                values.swap(i, j);
            }
            let shuffled = exact_sum(&values);
            prop_assert_eq!(forward.to_bits(), shuffled.to_bits());
        }

        #[test]
        fn close_to_naive(values in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let naive: f64 = values.iter().sum();
            let exact = exact_sum(&values);
            prop_assert!((naive - exact).abs() <= 1e-9 * (1.0 + naive.abs()));
        }
    }
}
