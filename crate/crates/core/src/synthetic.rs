//! Synthetic stochastic-block-model fixtures for transfer experiments.
//!
//! Each graph carries two planted blocks; node features sit at
//! `±scale_y · u` by block, where the magnitude `scale_y` depends on the
//! graph class. The class signal therefore lives in the second-order
//! structure of the features (block-aligned covariance at class-dependent
//! strength), which survives stochastic projection, any feature permutation,
//! and any orthogonal basis change of the input space.

use crate::error::Result;
use crate::graph::{Dataset, Graph, GraphLabel, MetricKind, Task};
use crate::matrix::Matrix;
use crate::rng::SeedStream;

#[derive(Debug, Clone)]
pub struct SbmConfig {
    pub num_graphs: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Feature magnitude for class-0 graphs.
    pub class0_scale: f64,
    /// Feature magnitude for class-1 graphs.
    pub class1_scale: f64,
    pub noise: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            num_graphs: 200,
            nodes_per_block: 15,
            p_in: 0.35,
            p_out: 0.08,
            feature_dim: 16,
            class0_scale: 3.0,
            class1_scale: 1.0,
            noise: 0.5,
        }
    }
}

/// Balanced two-class graph-classification dataset; classes alternate with
/// graph index so every contiguous split sees both.
pub fn generate_sbm_dataset(
    name: &str,
    cfg: &SbmConfig,
    stream: &mut SeedStream,
) -> Result<Dataset> {
    let d = cfg.feature_dim;
    // shared unit direction for the block pattern
    let mut u: Vec<f64> = (0..d).map(|_| stream.next_gaussian()).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut u {
        *v /= norm;
    }
    let n = 2 * cfg.nodes_per_block;
    let mut graphs = Vec::with_capacity(cfg.num_graphs);
    for gi in 0..cfg.num_graphs {
        let class = (gi % 2) as i64;
        let scale = if class == 0 {
            cfg.class0_scale
        } else {
            cfg.class1_scale
        };
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let same_block = (a < cfg.nodes_per_block) == (b < cfg.nodes_per_block);
                let p = if same_block { cfg.p_in } else { cfg.p_out };
                if stream.next_f64() < p {
                    edges.push((a, b));
                }
            }
        }
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            let sign = if i < cfg.nodes_per_block { 1.0 } else { -1.0 };
            for j in 0..d {
                x.set(i, j, sign * scale * u[j] + cfg.noise * stream.next_gaussian());
            }
        }
        graphs.push(Graph::new(
            n,
            false,
            edges,
            x,
            None,
            None,
            Some(GraphLabel::Class(class)),
            None,
        )?);
    }
    Dataset::new(
        name.to_string(),
        Task::GraphClassification,
        MetricKind::Accuracy,
        2,
        graphs,
    )
}

/// Maps every graph's features through `X · Q` (same topology and labels).
pub fn map_features(dataset: &Dataset, map: &Matrix, name: &str) -> Result<Dataset> {
    let graphs = dataset
        .graphs
        .iter()
        .map(|g| {
            Graph::new(
                g.num_nodes(),
                g.directed(),
                g.edges().to_vec(),
                g.node_features().matmul(map)?,
                g.edge_features().cloned(),
                g.node_labels().map(<[i64]>::to_vec),
                g.graph_label().cloned(),
                g.masks().cloned(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        name.to_string(),
        dataset.task,
        dataset.metric,
        dataset.num_classes_or_targets,
        graphs,
    )
}

/// Permutation matrix for a deterministic shuffle of feature indices.
pub fn permutation_matrix(d: usize, stream: &mut SeedStream) -> Matrix {
    let mut perm: Vec<usize> = (0..d).collect();
    stream.shuffle(&mut perm);
    let mut p = Matrix::zeros(d, d);
    for (from, &to) in perm.iter().enumerate() {
        p.set(from, to, 1.0);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_valid_balanced_dataset() {
        let mut stream = SeedStream::new(1, "sbm");
        let cfg = SbmConfig {
            num_graphs: 10,
            ..SbmConfig::default()
        };
        let ds = generate_sbm_dataset("sbm-test", &cfg, &mut stream).unwrap();
        assert_eq!(ds.graphs.len(), 10);
        let zeros = ds
            .graphs
            .iter()
            .filter(|g| matches!(g.graph_label(), Some(GraphLabel::Class(0))))
            .count();
        assert_eq!(zeros, 5);
        for g in &ds.graphs {
            assert!(g.validate().is_empty());
            assert_eq!(g.num_nodes(), 30);
        }
    }

    #[test]
    fn feature_map_preserves_structure() {
        let mut stream = SeedStream::new(2, "sbm-map");
        let cfg = SbmConfig {
            num_graphs: 4,
            ..SbmConfig::default()
        };
        let ds = generate_sbm_dataset("src", &cfg, &mut stream).unwrap();
        let q = crate::rng::random_orthogonal(cfg.feature_dim, &mut stream).unwrap();
        let rotated = map_features(&ds, &q, "rot").unwrap();
        assert_eq!(rotated.graphs.len(), 4);
        for (a, b) in ds.graphs.iter().zip(&rotated.graphs) {
            assert_eq!(a.edges(), b.edges());
            assert_eq!(a.graph_label(), b.graph_label());
            // rotation preserves row norms
            for i in 0..a.num_nodes() {
                let na: f64 = a.node_features().row(i).iter().map(|v| v * v).sum();
                let nb: f64 = b.node_features().row(i).iter().map(|v| v * v).sum();
                assert!((na - nb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_matrix_is_orthogonal() {
        let mut stream = SeedStream::new(3, "perm");
        let p = permutation_matrix(6, &mut stream);
        let ppt = p.mul_bt(&p).unwrap();
        assert!(ppt.max_abs_diff(&Matrix::identity(6)) < 1e-15);
    }
}
