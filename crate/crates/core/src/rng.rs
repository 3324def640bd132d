//! Deterministic counter-based randomness.
//!
//! All randomness in the crate flows through [`SeedStream`]. A stream is
//! identified by `(master_seed, purpose_tag)` and produces its n-th output
//! as a pure function of that identity and the counter `n`, so identical
//! state always reproduces identical values and distinct purpose tags give
//! statistically independent streams.
//!
//! The mixer is fixed as follows and must not change across releases of the
//! same format version:
//!
//! ```text
//! key    = mix64(master_seed XOR mix64(fnv1a64(purpose_tag)))
//! out(n) = mix64(key + n * 0x9E3779B97F4A7C15)     (wrapping arithmetic)
//! ```
//!
//! where `mix64` is the splitmix64 avalanche finalizer. Gaussian draws use
//! the Box–Muller transform on the stream's 64-bit uniforms; two uniforms
//! are consumed per Gaussian. Bit-reproducibility is promised within one
//! build of this crate, not across implementations.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const GAMMA: u64 = 0x9E3779B97F4A7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedStream {
    master_seed: u64,
    purpose_tag: String,
    counter: u64,
    key: u64,
}

impl SeedStream {
    pub fn new(master_seed: u64, purpose_tag: &str) -> Self {
        let key = mix64(master_seed ^ mix64(fnv1a64(purpose_tag.as_bytes())));
        Self {
            master_seed,
            purpose_tag: purpose_tag.to_string(),
            counter: 0,
            key,
        }
    }

    /// Child stream for a sub-purpose; counter starts fresh.
    pub fn derive(&self, subtag: &str) -> SeedStream {
        SeedStream::new(self.master_seed, &format!("{}/{}", self.purpose_tag, subtag))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn purpose_tag(&self) -> &str {
        &self.purpose_tag
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in the half-open interval [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in the open-closed interval (0, 1]; safe to pass to `ln`.
    #[inline]
    fn next_f64_oc(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw via Box–Muller; consumes two uniforms.
    #[inline]
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_oc();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, bound). Modulo bias is negligible for the
    /// shuffle sizes used here.
    pub fn next_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_index bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_index(i + 1);
            slice.swap(i, j);
        }
    }
}

/// Matrix of i.i.d. standard normal entries, filled row-major.
pub fn gaussian_matrix(rows: usize, cols: usize, stream: &mut SeedStream) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!(
            "gaussian_matrix: dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = stream.next_gaussian();
    }
    Ok(m)
}

/// Haar-uniform orthogonal matrix: QR of a Gaussian matrix with the sign of
/// each diagonal of R folded into the corresponding column of Q.
pub fn random_orthogonal(d: usize, stream: &mut SeedStream) -> Result<Matrix> {
    let a = gaussian_matrix(d, d, stream)?;
    let (mut q, r) = householder_qr(&a);
    for j in 0..d {
        if r.get(j, j) < 0.0 {
            for i in 0..d {
                let v = q.get(i, j);
                q.set(i, j, -v);
            }
        }
    }
    Ok(q)
}

/// Householder QR of a square matrix; returns (Q, R) with A = QR.
fn householder_qr(a: &Matrix) -> (Matrix, Matrix) {
    let n = a.rows();
    let mut r = a.clone();
    let mut q = Matrix::identity(n);
    let mut v = vec![0.0; n];
    for k in 0..n {
        let mut norm2 = 0.0;
        for i in k..n {
            let x = r.get(i, k);
            v[i] = x;
            norm2 += x * x;
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[k] >= 0.0 { -norm } else { norm };
        v[k] -= alpha;
        let vnorm2: f64 = (k..n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- (I - 2vvᵀ/vᵀv) R on the trailing block
        for j in k..n {
            let dot: f64 = (k..n).map(|i| v[i] * r.get(i, j)).sum();
            let c = 2.0 * dot / vnorm2;
            for i in k..n {
                let val = r.get(i, j) - c * v[i];
                r.set(i, j, val);
            }
        }
        // Q <- Q (I - 2vvᵀ/vᵀv)
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| q.get(i, j) * v[j]).sum();
            let c = 2.0 * dot / vnorm2;
            for j in k..n {
                let val = q.get(i, j) - c * v[j];
                q.set(i, j, val);
            }
        }
    }
    (q, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_state_identical_matrix() {
        let s1 = SeedStream::new(99, "gauss");
        let mut a_stream = s1.clone();
        let mut b_stream = s1;
        let a = gaussian_matrix(2, 3, &mut a_stream).unwrap();
        let b = gaussian_matrix(2, 3, &mut b_stream).unwrap();
        assert_eq!(a, b);
        assert_eq!(a_stream.counter(), b_stream.counter());
    }

    #[test]
    fn advancing_counter_changes_output() {
        let mut s = SeedStream::new(99, "gauss");
        let a = gaussian_matrix(2, 3, &mut s).unwrap();
        let b = gaussian_matrix(2, 3, &mut s).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn distinct_tags_differ() {
        let mut s1 = SeedStream::new(99, "node");
        let mut s2 = SeedStream::new(99, "edge");
        assert_ne!(s1.next_u64(), s2.next_u64());
    }

    #[test]
    fn zero_dims_rejected() {
        let mut s = SeedStream::new(1, "z");
        assert!(matches!(
            gaussian_matrix(0, 5, &mut s),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            gaussian_matrix(5, 0, &mut s),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gaussian_moments_at_monte_carlo_scale() {
        let mut s = SeedStream::new(2024, "moments");
        let m = gaussian_matrix(1000, 1000, &mut s).unwrap();
        let n = (m.rows() * m.cols()) as f64;
        let mean: f64 = m.data().iter().sum::<f64>() / n;
        let var: f64 = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.01, "sample mean {mean}");
        assert!((0.99..=1.01).contains(&var), "sample variance {var}");
        assert!(m.all_finite());
    }

    #[test]
    fn orthogonal_one_dimensional() {
        for seed in 0..8 {
            let mut s = SeedStream::new(seed, "ortho1");
            let q = random_orthogonal(1, &mut s).unwrap();
            let v = q.get(0, 0);
            assert!((v - 1.0).abs() < 1e-12 || (v + 1.0).abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn orthogonal_defining_property() {
        for d in [2, 4, 8, 16] {
            let mut s = SeedStream::new(7, "ortho");
            let q = random_orthogonal(d, &mut s).unwrap();
            let qqt = q.mul_bt(&q).unwrap();
            let err = qqt.sub(&Matrix::identity(d)).unwrap().frobenius_norm();
            assert!(err < 1e-12, "d={d}: |QQᵀ-I|_F = {err}");
        }
    }

    #[test]
    fn distinct_streams_distinct_q() {
        let mut s1 = SeedStream::new(1, "q");
        let mut s2 = SeedStream::new(2, "q");
        let q1 = random_orthogonal(4, &mut s1).unwrap();
        let q2 = random_orthogonal(4, &mut s2).unwrap();
        assert!(q1.max_abs_diff(&q2) > 1e-6);
    }

    #[test]
    fn derived_streams_are_independent() {
        let base = SeedStream::new(5, "root");
        let mut a = base.derive("alpha");
        let mut b = base.derive("beta");
        assert_ne!(a.next_u64(), b.next_u64());
        assert_eq!(a.purpose_tag(), "root/alpha");
    }
}
