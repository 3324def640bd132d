//! Stochastic feature projection into the shared h-dimensional space.
//!
//! Node (and, when present, edge) features are multiplied by an isotropic
//! Gaussian matrix C drawn from a [`SeedStream`]. In `PerPass` mode C is
//! resampled on every forward pass; in `Cached` mode it is resampled every
//! `refresh_interval` passes. Node and edge projections come from disjoint
//! purpose tags of the same master seed and refresh on the same schedule.
//!
//! There is deliberately no 1/sqrt(d) or 1/sqrt(h) scaling on C: the
//! expected covariance operator identity (`Π_c X Xᵀ Π_c`) is stated for the
//! unscaled projection, and scaling would break it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::rng::{gaussian_matrix, SeedStream};

pub const DEFAULT_PROJECTION_DIM: usize = 512;
pub const DEFAULT_REFRESH_INTERVAL: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionMode {
    /// Fresh C on every forward pass.
    #[serde(rename = "per-pass")]
    PerPass,
    /// Fresh C whenever `step % refresh_interval == 0`.
    #[serde(rename = "cached")]
    Cached,
}

#[derive(Debug, Clone)]
pub struct ProjectionState {
    h: usize,
    node_dim: usize,
    edge_dim: Option<usize>,
    refresh_interval: u64,
    mode: ProjectionMode,
    step: u64,
    current_node_c: Matrix,
    current_edge_c: Option<Matrix>,
    node_stream: SeedStream,
    edge_stream: Option<SeedStream>,
}

impl ProjectionState {
    /// Builds a per-dataset state. `scope` is typically the dataset name so
    /// that independent datasets draw independent projections from the same
    /// master seed.
    pub fn new(
        master_seed: u64,
        scope: &str,
        node_dim: usize,
        edge_dim: Option<usize>,
        h: usize,
        mode: ProjectionMode,
        refresh_interval: u64,
    ) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("projection.h must be positive".into()));
        }
        if refresh_interval == 0 {
            return Err(Error::Config(
                "projection.refresh_interval must be positive".into(),
            ));
        }
        if node_dim == 0 {
            return Err(Error::Dimension(
                "projection: node feature dimension must be positive".into(),
            ));
        }
        let mut node_stream = SeedStream::new(master_seed, &format!("proj/node/{scope}"));
        let current_node_c = gaussian_matrix(node_dim, h, &mut node_stream)?;
        let (edge_stream, current_edge_c) = match edge_dim {
            Some(de) => {
                if de == 0 {
                    return Err(Error::Dimension(
                        "projection: edge feature dimension must be positive".into(),
                    ));
                }
                let mut s = SeedStream::new(master_seed, &format!("proj/edge/{scope}"));
                let c = gaussian_matrix(de, h, &mut s)?;
                (Some(s), Some(c))
            }
            None => (None, None),
        };
        Ok(Self {
            h,
            node_dim,
            edge_dim,
            refresh_interval,
            mode,
            step: 0,
            current_node_c,
            current_edge_c,
            node_stream,
            edge_stream,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    pub fn node_c(&self) -> &Matrix {
        &self.current_node_c
    }

    pub fn edge_c(&self) -> Option<&Matrix> {
        self.current_edge_c.as_ref()
    }

    fn resample(&mut self) {
        self.current_node_c =
            gaussian_matrix(self.node_dim, self.h, &mut self.node_stream).expect("dims checked");
        if let (Some(stream), Some(de)) = (self.edge_stream.as_mut(), self.edge_dim) {
            self.current_edge_c = Some(gaussian_matrix(de, self.h, stream).expect("dims checked"));
        }
    }

    /// Advances the refresh schedule by one forward pass. Both projections
    /// refresh together.
    pub fn next_projection(&mut self, mode: ProjectionMode) {
        self.step += 1;
        let refresh = match mode {
            ProjectionMode::PerPass => true,
            ProjectionMode::Cached => self.step % self.refresh_interval == 0,
        };
        if refresh {
            self.resample();
        }
    }

    /// Advances with the state's own mode.
    pub fn advance(&mut self) {
        self.next_projection(self.mode);
    }

    /// `R⁰ = X · C` with the current C (no bias term, no step change).
    /// Errors signal cross-dataset misuse of a per-dataset state.
    pub fn project_nodes_with_current(&self, g: &Graph) -> Result<Matrix> {
        let x = g.node_features();
        if x.cols() != self.current_node_c.rows() {
            return Err(Error::Dimension(format!(
                "projection: dataset has d={} but state was built for d={}",
                x.cols(),
                self.current_node_c.rows()
            )));
        }
        x.matmul(&self.current_node_c)
    }

    /// Projects with the current C, then advances the schedule (one forward
    /// pass). In `PerPass` mode consecutive calls therefore see distinct C.
    pub fn project_nodes(&mut self, g: &Graph) -> Result<Matrix> {
        let r0 = self.project_nodes_with_current(g)?;
        self.advance();
        Ok(r0)
    }

    /// Projects raw edge features (m×d_e → m×h) with the current edge C.
    /// Call before `project_nodes` within one pass so both use the same draw.
    pub fn project_edges_with_current(&self, g: &Graph) -> Result<Option<Matrix>> {
        let Some(ef) = g.edge_features() else {
            return Ok(None);
        };
        let c = self.current_edge_c.as_ref().ok_or_else(|| {
            Error::Dimension(
                "projection: graph carries edge features but the state holds no edge projection"
                    .into(),
            )
        })?;
        if ef.cols() != c.rows() {
            return Err(Error::Dimension(format!(
                "projection: dataset has d_e={} but state was built for d_e={}",
                ef.cols(),
                c.rows()
            )));
        }
        Ok(Some(ef.matmul(c)?))
    }
}

/// Averages projected edge features into node rows: incoming edges when the
/// graph is directed, all incident edges otherwise. Nodes with no incident
/// edge get the zero row.
pub fn aggregate_edges_to_nodes(g: &Graph, projected_edges: &Matrix) -> Result<Matrix> {
    if projected_edges.rows() != g.num_edges() {
        return Err(Error::Dimension(format!(
            "edge aggregation: {} projected rows for {} edges",
            projected_edges.rows(),
            g.num_edges()
        )));
    }
    let n = g.num_nodes();
    let cols = projected_edges.cols();
    let mut sums = vec![crate::accum::ExactSum::new(); n * cols];
    let mut counts = vec![0usize; n];
    let mut add_to = |v: usize, row: &[f64]| {
        counts[v] += 1;
        for (c, &val) in row.iter().enumerate() {
            sums[v * cols + c].add(val);
        }
    };
    for (k, &(u, v)) in g.edges().iter().enumerate() {
        let row = projected_edges.row(k);
        add_to(v, row);
        if !g.directed() {
            add_to(u, row);
        }
    }
    let mut out = Matrix::zeros(n, cols);
    for v in 0..n {
        if counts[v] == 0 {
            continue;
        }
        let inv = 1.0 / counts[v] as f64;
        for c in 0..cols {
            out.set(v, c, sums[v * cols + c].value() * inv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, GraphLabel};

    fn graph_with_features(x: Matrix) -> Graph {
        let n = x.rows();
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::new(n, false, edges, x, None, None, Some(GraphLabel::Class(0)), None).unwrap()
    }

    fn state(d: usize, h: usize, mode: ProjectionMode, refresh: u64) -> ProjectionState {
        ProjectionState::new(7, "test", d, None, h, mode, refresh).unwrap()
    }

    #[test]
    fn identity_features_reproduce_c() {
        let g = graph_with_features(Matrix::identity(2));
        let mut ps = state(2, 4, ProjectionMode::PerPass, 1);
        let c = ps.node_c().clone();
        let r0 = ps.project_nodes(&g).unwrap();
        assert_eq!(r0, c);
    }

    #[test]
    fn zero_features_project_to_zero() {
        let g = graph_with_features(Matrix::zeros(3, 2));
        let mut ps = state(2, 4, ProjectionMode::PerPass, 1);
        let r0 = ps.project_nodes(&g).unwrap();
        assert_eq!(r0.max_abs(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_cross_dataset_misuse() {
        let g = graph_with_features(Matrix::zeros(3, 3));
        let mut ps = state(7, 4, ProjectionMode::PerPass, 1);
        assert!(matches!(
            ps.project_nodes(&g),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cached_mode_refreshes_every_interval() {
        let g = graph_with_features(Matrix::identity(3));
        let mut ps = state(3, 4, ProjectionMode::Cached, 100);
        let first = ps.project_nodes(&g).unwrap();
        for step in 2..=99 {
            let r = ps.project_nodes(&g).unwrap();
            assert_eq!(r, first, "C changed early at step {step}");
        }
        // the 100th projection still uses the cached C; the refresh fires
        // when the step counter reaches the interval
        let r100 = ps.project_nodes(&g).unwrap();
        assert_eq!(r100, first);
        let r101 = ps.project_nodes(&g).unwrap();
        assert!(r101.max_abs_diff(&first) > 1e-6, "C not refreshed");
    }

    #[test]
    fn per_pass_resamples_every_call() {
        let g = graph_with_features(Matrix::identity(3));
        let mut ps = state(3, 4, ProjectionMode::PerPass, 100);
        let a = ps.project_nodes(&g).unwrap();
        let b = ps.project_nodes(&g).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn refresh_interval_one_equals_per_pass() {
        let g = graph_with_features(Matrix::identity(3));
        let mut cached = state(3, 4, ProjectionMode::Cached, 1);
        let mut per_pass = state(3, 4, ProjectionMode::PerPass, 1);
        // same seed and tag → same stream → identical resampling schedule
        for _ in 0..5 {
            let a = cached.project_nodes(&g).unwrap();
            let b = per_pass.project_nodes(&g).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn directed_edge_aggregation_hand_example() {
        // u→v carries [2], w→v carries [4]; v averages to [3], u and w have
        // no incoming edges
        let g = Graph::new(
            3,
            true,
            vec![(0, 1), (2, 1)],
            Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap(),
            Some(Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap()),
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap();
        let agg = aggregate_edges_to_nodes(&g, g.edge_features().unwrap()).unwrap();
        assert_eq!(agg.to_rows(), vec![vec![0.0], vec![3.0], vec![0.0]]);
    }

    #[test]
    fn undirected_edge_feature_reaches_both_endpoints() {
        let g = Graph::new(
            2,
            false,
            vec![(0, 1)],
            Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            Some(Matrix::from_rows(&[vec![6.0]]).unwrap()),
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap();
        let agg = aggregate_edges_to_nodes(&g, g.edge_features().unwrap()).unwrap();
        assert_eq!(agg.to_rows(), vec![vec![6.0], vec![6.0]]);
    }

    #[test]
    fn no_edges_gives_zero_matrix() {
        let g = Graph::new(
            3,
            false,
            vec![],
            Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap(),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap();
        let agg = aggregate_edges_to_nodes(&g, &Matrix::zeros(0, 4)).unwrap();
        assert_eq!(agg.rows(), 3);
        assert_eq!(agg.cols(), 4);
        assert_eq!(agg.max_abs(), 0.0);
    }

    #[test]
    fn constant_edge_features_yield_constant_rows() {
        let g = Graph::new(
            3,
            false,
            vec![(0, 1), (1, 2), (2, 0)],
            Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap(),
            Some(Matrix::from_rows(&vec![vec![2.5, -1.0]; 3]).unwrap()),
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap();
        let agg = aggregate_edges_to_nodes(&g, g.edge_features().unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(agg.row(i), &[2.5, -1.0]);
        }
    }

    #[test]
    fn identical_feature_rows_project_identically() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let g = graph_with_features(x);
        let mut distinguished = 0;
        for trial in 0..1000 {
            let mut ps = ProjectionState::new(
                trial,
                "rows",
                2,
                None,
                4,
                ProjectionMode::PerPass,
                1,
            )
            .unwrap();
            let r0 = ps.project_nodes(&g).unwrap();
            assert_eq!(r0.row(0), r0.row(1));
            let diff: f64 = r0
                .row(0)
                .iter()
                .zip(r0.row(2))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if diff > 1e-9 {
                distinguished += 1;
            }
        }
        assert!(distinguished >= 999, "only {distinguished}/1000 distinguished");
    }
}
