//! Node-covariance operators and the propagation operator set.
//!
//! `NodeCov(R) = (1/h) (Π_c R)(Π_c R)ᵀ` measures pairwise node similarity by
//! feature co-variation across the projected dimensions. The operator set
//! `[I, A, K⁰, …, Kᵏ, (edge variants)]` drives per-layer message passing;
//! its order is fixed and determines the concatenation layout of the
//! encoder. Covariance is always computed per graph: each graph owns its own
//! centering, so batched training is block-diagonal by construction.
//!
//! The runtime representation is factored: K·H is computed as
//! `scale · Rc (Rcᵀ H)` right-to-left, so no n×n matrix is ever allocated.
//! The dense form exists for oracles, tests, and the export path.

use crate::accum::ExactSum;
use crate::error::{Error, Result};
use crate::graph::{AdjacencyNorm, Graph};
use crate::matrix::{center_over_nodes, Matrix};

#[derive(Debug, Clone)]
pub enum Operator {
    Identity,
    Adjacency { norm: AdjacencyNorm },
    /// Centered propagated projection with scale 1/h; applies as a rank-h map.
    FactoredCov { rc: Matrix, scale: f64 },
    /// Explicit n×n covariance; oracle/export representation only.
    DenseCov { k: Matrix },
}

impl Operator {
    /// Applies the operator to `h_in` (n×c). The factored path allocates
    /// O(h·c) transient memory, never O(n²).
    pub fn apply(&self, g: &Graph, h_in: &Matrix) -> Result<Matrix> {
        match self {
            Operator::Identity => Ok(h_in.clone()),
            Operator::Adjacency { norm } => match norm {
                AdjacencyNorm::None => g.adjacency_apply(h_in),
                AdjacencyNorm::Sym => g.adjacency_apply_sym(h_in),
            },
            Operator::FactoredCov { rc, scale } => {
                if rc.rows() != h_in.rows() {
                    return Err(Error::Dimension(format!(
                        "factored apply: operator over {} nodes, input has {} rows",
                        rc.rows(),
                        h_in.rows()
                    )));
                }
                let tmp = rc.transpose_mul_exact(h_in)?; // h×c
                let mut out = rc.matmul(&tmp)?; // n×c
                out.scale(*scale);
                Ok(out)
            }
            Operator::DenseCov { k } => k.matmul(h_in),
        }
    }

    /// Applies the transpose; identical to `apply` for every symmetric
    /// operator (all covariance forms, undirected adjacency).
    pub fn apply_transpose(&self, g: &Graph, h_in: &Matrix) -> Result<Matrix> {
        match self {
            Operator::Adjacency { norm } => match norm {
                AdjacencyNorm::None => g.adjacency_apply_transpose(h_in),
                AdjacencyNorm::Sym => g.adjacency_apply_sym_transpose(h_in),
            },
            _ => self.apply(g, h_in),
        }
    }

    /// Dense n×n form, for export and oracles.
    pub fn to_dense(&self, g: &Graph) -> Result<Matrix> {
        let n = g.num_nodes();
        match self {
            Operator::DenseCov { k } => Ok(k.clone()),
            _ => self.apply(g, &Matrix::identity(n)),
        }
    }
}

/// `K = (1/h) (Π_c r)(Π_c r)ᵀ`: symmetric and positive semidefinite.
pub fn node_cov_dense(r: &Matrix) -> Result<Matrix> {
    if r.cols() == 0 {
        return Err(Error::Dimension(
            "node_cov: projection must have at least one column".into(),
        ));
    }
    let rc = center_over_nodes(r);
    let mut k = rc.mul_bt(&rc)?;
    k.scale(1.0 / r.cols() as f64);
    Ok(k)
}

/// Factored form of `node_cov_dense(r)`; stores `Π_c r` and the 1/h scale
/// without ever allocating an n×n matrix.
pub fn make_factored(r: &Matrix) -> Result<Operator> {
    if r.cols() == 0 {
        return Err(Error::Dimension(
            "node_cov: projection must have at least one column".into(),
        ));
    }
    Ok(Operator::FactoredCov {
        rc: center_over_nodes(r),
        scale: 1.0 / r.cols() as f64,
    })
}

/// Deterministic oracle `Π_c x xᵀ Π_c`, the exact expectation of the
/// stochastic covariance operator.
pub fn expected_cov(x: &Matrix) -> Matrix {
    let xc = center_over_nodes(x);
    xc.mul_bt(&xc).expect("same matrix twice")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OperatorOptions {
    pub adjacency_norm: AdjacencyNorm,
    /// Stability escape hatch: divides the factored scale by
    /// `max_col_sqnorm(Rc)/h`. Off by default; the operators are otherwise
    /// unnormalized.
    pub spectral_rescale: bool,
}

#[derive(Debug, Clone)]
pub struct OperatorSet {
    ops: Vec<Operator>,
    labels: Vec<String>,
}

impl OperatorSet {
    /// Builds `[I, A, K⁰, …, Kᵏ]`, appending `K_edge⁰, …, K_edgeᵏ` when
    /// aggregated projected edge features are supplied. Propagations
    /// `R⁽ᵖ⁾ = Aᵖ R⁰` are computed by repeated sparse application.
    pub fn build(
        g: &Graph,
        r0: &Matrix,
        k: usize,
        r0_edge: Option<&Matrix>,
        opts: &OperatorOptions,
    ) -> Result<Self> {
        let mut ops = vec![
            Operator::Identity,
            Operator::Adjacency {
                norm: opts.adjacency_norm,
            },
        ];
        let mut labels = vec!["identity".to_string(), "adjacency".to_string()];
        let mut r = r0.clone();
        for p in 0..=k {
            if p > 0 {
                r = g.adjacency_apply(&r)?;
            }
            ops.push(finish_factored(make_factored(&r)?, opts));
            labels.push(format!("cov{p}"));
        }
        if let Some(re0) = r0_edge {
            let mut re = re0.clone();
            for p in 0..=k {
                if p > 0 {
                    re = g.adjacency_apply(&re)?;
                }
                ops.push(finish_factored(make_factored(&re)?, opts));
                labels.push(format!("edge_cov{p}"));
            }
        }
        Ok(Self { ops, labels })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[Operator] {
        &self.ops
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of operators for a given configuration, without building.
    pub fn size_for(k: usize, with_edge_ops: bool) -> usize {
        2 + (k + 1) + if with_edge_ops { k + 1 } else { 0 }
    }
}

fn finish_factored(op: Operator, opts: &OperatorOptions) -> Operator {
    if !opts.spectral_rescale {
        return op;
    }
    let Operator::FactoredCov { rc, scale } = op else {
        return op;
    };
    let h = rc.cols();
    let mut max_sq = 0.0f64;
    for j in 0..h {
        let mut acc = ExactSum::new();
        for i in 0..rc.rows() {
            let v = rc.get(i, j);
            acc.add(v * v);
        }
        max_sq = max_sq.max(acc.value());
    }
    let divisor = max_sq / h as f64;
    let scale = if divisor > 0.0 { scale / divisor } else { scale };
    Operator::FactoredCov { rc, scale }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphLabel;
    use crate::rng::{gaussian_matrix, random_orthogonal, SeedStream};

    /// The 3-node feature matrix whose deterministic covariance makes all
    /// nodes mutually automorphic.
    pub(crate) fn witness_x() -> Matrix {
        Matrix::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn witness_covariance_is_exact() {
        let k = node_cov_dense(&witness_x()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 2.0 / 9.0 } else { -1.0 / 9.0 };
                assert!(
                    (k.get(i, j) - expected).abs() < 1e-12,
                    "K[{i}][{j}] = {}",
                    k.get(i, j)
                );
            }
        }
    }

    #[test]
    fn constant_rows_annihilated() {
        let r = Matrix::from_rows(&[vec![5.0], vec![5.0], vec![5.0]]).unwrap();
        let k = node_cov_dense(&r).unwrap();
        assert_eq!(k.max_abs(), 0.0);
    }

    #[test]
    fn two_node_hand_example() {
        let r = Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let k = node_cov_dense(&r).unwrap();
        assert_eq!(k.to_rows(), vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
    }

    #[test]
    fn zero_columns_rejected() {
        let r = Matrix::zeros(3, 0);
        assert!(matches!(node_cov_dense(&r), Err(Error::Dimension(_))));
        assert!(matches!(make_factored(&r), Err(Error::Dimension(_))));
    }

    fn chain_graph(n: usize, d: usize) -> Graph {
        let mut stream = SeedStream::new(5, "ops-test");
        let x = gaussian_matrix(n, d, &mut stream).unwrap();
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::new(n, false, edges, x, None, None, Some(GraphLabel::Class(0)), None).unwrap()
    }

    #[test]
    fn factored_matches_dense_via_identity() {
        let mut stream = SeedStream::new(21, "factored");
        for _ in 0..5 {
            let r = gaussian_matrix(20, 8, &mut stream).unwrap();
            let g = chain_graph(20, 2);
            let dense = node_cov_dense(&r).unwrap();
            let factored = make_factored(&r).unwrap();
            let applied = factored.apply(&g, &Matrix::identity(20)).unwrap();
            assert!(applied.max_abs_diff(&dense) < 1e-10);
        }
    }

    #[test]
    fn ones_column_gives_zero_map() {
        let r = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let op = make_factored(&r).unwrap();
        let Operator::FactoredCov { rc, .. } = &op else {
            panic!("expected factored")
        };
        assert_eq!(rc.max_abs(), 0.0);
        let g = chain_graph(3, 2);
        let out = op.apply(&g, &Matrix::identity(3)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn single_node_centers_to_zero() {
        let r = Matrix::from_rows(&[vec![3.0, -2.0]]).unwrap();
        let op = make_factored(&r).unwrap();
        let Operator::FactoredCov { rc, .. } = &op else {
            panic!("expected factored")
        };
        assert_eq!(rc.max_abs(), 0.0);
    }

    #[test]
    fn factored_hand_application() {
        let g = chain_graph(2, 2);
        let op = Operator::FactoredCov {
            rc: Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            scale: 1.0,
        };
        let h_in = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let out = op.apply(&g, &h_in).unwrap();
        assert_eq!(out.to_rows(), vec![vec![1.0], vec![-1.0]]);
    }

    #[test]
    fn identity_operator_is_identity() {
        let g = chain_graph(4, 2);
        let h_in = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let out = Operator::Identity.apply(&g, &h_in).unwrap();
        assert_eq!(out, h_in);
    }

    #[test]
    fn dense_and_factored_agree_at_scale() {
        let mut stream = SeedStream::new(33, "equiv");
        let n = 120;
        let g = chain_graph(n, 2);
        let r = gaussian_matrix(n, 96, &mut stream).unwrap();
        let h_in = gaussian_matrix(n, 16, &mut stream).unwrap();
        let dense = Operator::DenseCov {
            k: node_cov_dense(&r).unwrap(),
        };
        let factored = make_factored(&r).unwrap();
        let a = dense.apply(&g, &h_in).unwrap();
        let b = factored.apply(&g, &h_in).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn operator_set_sizes() {
        let g = chain_graph(6, 3);
        let mut stream = SeedStream::new(1, "sizes");
        let r0 = gaussian_matrix(6, 4, &mut stream).unwrap();
        let opts = OperatorOptions::default();
        let s0 = OperatorSet::build(&g, &r0, 0, None, &opts).unwrap();
        assert_eq!(s0.len(), 3);
        assert_eq!(s0.labels(), &["identity", "adjacency", "cov0"]);
        let s2 = OperatorSet::build(&g, &r0, 2, None, &opts).unwrap();
        assert_eq!(s2.len(), 5);
        let re = gaussian_matrix(6, 4, &mut stream).unwrap();
        let s2e = OperatorSet::build(&g, &r0, 2, Some(&re), &opts).unwrap();
        assert_eq!(s2e.len(), 8);
        assert_eq!(s2e.labels()[5], "edge_cov0");
        assert_eq!(OperatorSet::size_for(2, true), 8);
    }

    #[test]
    fn propagated_covariances_match_dense_power_oracle() {
        let g = chain_graph(12, 3);
        let mut stream = SeedStream::new(9, "prop");
        let r0 = gaussian_matrix(12, 8, &mut stream).unwrap();
        let set = OperatorSet::build(&g, &r0, 2, None, &OperatorOptions::default()).unwrap();
        // dense A
        let mut a = Matrix::zeros(12, 12);
        for &(u, v) in g.edges() {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        let mut r = r0.clone();
        for p in 0..=2usize {
            if p > 0 {
                r = a.matmul(&r).unwrap();
            }
            let expected = node_cov_dense(&r).unwrap();
            let got = set.ops()[2 + p].to_dense(&g).unwrap();
            assert!(got.max_abs_diff(&expected) < 1e-9, "p={p}");
        }
    }

    #[test]
    fn expected_cov_of_witness() {
        let e = expected_cov(&witness_x());
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 };
                assert!((e.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_cov_constant_rows_zero() {
        let x = Matrix::from_rows(&vec![vec![3.0, 1.0]; 4]).unwrap();
        assert_eq!(expected_cov(&x).max_abs(), 0.0);
    }

    #[test]
    fn expected_cov_orthogonal_invariance() {
        let mut stream = SeedStream::new(99, "ortho-oracle");
        for _ in 0..5 {
            let x = gaussian_matrix(6, 4, &mut stream).unwrap();
            let q = random_orthogonal(4, &mut stream).unwrap();
            let xq = x.matmul(&q).unwrap();
            let a = expected_cov(&x);
            let b = expected_cov(&xq);
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn dense_covariance_is_psd_and_symmetric() {
        let mut stream = SeedStream::new(4, "psd");
        for _ in 0..10 {
            let n = 3 + stream.next_index(48);
            let r = gaussian_matrix(n, 6, &mut stream).unwrap();
            let k = node_cov_dense(&r).unwrap();
            for i in 0..n {
                for j in 0..i {
                    assert!((k.get(i, j) - k.get(j, i)).abs() < 1e-10);
                }
            }
            // quadratic form nonnegativity over random probes
            for _ in 0..20 {
                let v = gaussian_matrix(n, 1, &mut stream).unwrap();
                let kv = k.matmul(&v).unwrap();
                let quad: f64 = v
                    .data()
                    .iter()
                    .zip(kv.data())
                    .map(|(a, b)| a * b)
                    .sum();
                let scale: f64 = v.data().iter().map(|a| a * a).sum();
                assert!(quad >= -1e-8 * scale.max(1.0), "quadratic form {quad}");
            }
        }
    }

    #[test]
    fn sign_flipped_features_share_diagonal_but_not_rows() {
        // X_v = -X_u: auto-covariances coincide, cross terms flip sign
        let mut distinguished = 0;
        for trial in 0..1000 {
            let mut stream = SeedStream::new(trial, "signflip");
            let x = Matrix::from_rows(&[
                vec![1.0, 2.0],
                vec![-1.0, -2.0],
                vec![0.5, -0.7],
            ])
            .unwrap();
            let c = gaussian_matrix(2, 8, &mut stream).unwrap();
            let r0 = x.matmul(&c).unwrap();
            let k = node_cov_dense(&r0).unwrap();
            if (k.get(0, 2) - k.get(1, 2)).abs() > 1e-9 {
                distinguished += 1;
            }
        }
        assert!(distinguished >= 999, "{distinguished}/1000");
    }
}
