//! Graph/dataset data model, JSON ingestion, validation, and sparse
//! adjacency application.
//!
//! Graphs are immutable after load. The adjacency is the raw 0/1 matrix
//! without self-loops: the identity operator in the operator set carries the
//! self channel, and an optional symmetric normalization is available as a
//! configuration flag (default off). Duplicate edges and self-loops are
//! rejected at load rather than merged, because covariance operators are
//! sensitive to edge multiplicity.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accum::ExactSum;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "node-classification")]
    NodeClassification,
    #[serde(rename = "graph-classification")]
    GraphClassification,
    #[serde(rename = "graph-regression")]
    GraphRegression,
    #[serde(rename = "graph-multilabel")]
    GraphMultilabel,
}

impl Task {
    pub fn is_node_level(self) -> bool {
        matches!(self, Task::NodeClassification)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "accuracy")]
    Accuracy,
    #[serde(rename = "mae")]
    Mae,
    #[serde(rename = "rmse")]
    Rmse,
    #[serde(rename = "roc-auc")]
    RocAuc,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mae => "mae",
            MetricKind::Rmse => "rmse",
            MetricKind::RocAuc => "roc-auc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphLabel {
    Class(i64),
    /// Regression / multi-label targets. Multi-label datasets may carry NaN
    /// entries (JSON `null`) marking missing labels.
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Masks {
    pub fn get(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    directed: bool,
    edges: Vec<(usize, usize)>,
    node_features: Matrix,
    edge_features: Option<Matrix>,
    node_labels: Option<Vec<i64>>,
    graph_label: Option<GraphLabel>,
    masks: Option<Masks>,
    // adjacency lists, built once at construction
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
}

/// One violated invariant; `field` names the offending location.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
    pub out_of_range: bool,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        message: message.into(),
        out_of_range: false,
    }
}

impl Graph {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_nodes: usize,
        directed: bool,
        edges: Vec<(usize, usize)>,
        node_features: Matrix,
        edge_features: Option<Matrix>,
        node_labels: Option<Vec<i64>>,
        graph_label: Option<GraphLabel>,
        masks: Option<Masks>,
    ) -> Result<Self> {
        let mut g = Self {
            num_nodes,
            directed,
            edges,
            node_features,
            edge_features,
            node_labels,
            graph_label,
            masks,
            out_adj: Vec::new(),
            in_adj: Vec::new(),
        };
        let violations = g.validate();
        if let Some(v) = violations.first() {
            let msg = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(if v.out_of_range {
                Error::Schema(format!("index out of range: {msg}"))
            } else {
                Error::Schema(msg)
            });
        }
        g.build_adjacency();
        Ok(g)
    }

    fn build_adjacency(&mut self) {
        let n = self.num_nodes;
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for &(u, v) in &self.edges {
            out_adj[u].push(v);
            in_adj[v].push(u);
            if !self.directed {
                out_adj[v].push(u);
                in_adj[u].push(v);
            }
        }
        self.out_adj = out_adj;
        self.in_adj = in_adj;
    }

    /// Checks every graph-level invariant; empty iff the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.num_nodes;
        if n == 0 {
            out.push(violation("num_nodes", "graph must have at least one node"));
        }
        let mut seen = HashSet::new();
        for (k, &(u, v)) in self.edges.iter().enumerate() {
            if u >= n || v >= n {
                out.push(Violation {
                    field: format!("edges[{k}]"),
                    message: format!("endpoint ({u},{v}) outside [0,{n})"),
                    out_of_range: true,
                });
                continue;
            }
            if u == v {
                out.push(violation(
                    format!("edges[{k}]"),
                    "self-loops are not allowed",
                ));
            }
            let key = if self.directed {
                (u, v)
            } else {
                (u.min(v), u.max(v))
            };
            if !seen.insert(key) {
                out.push(violation(format!("edges[{k}]"), "duplicate edge"));
            }
        }
        if self.node_features.rows() != n {
            out.push(violation(
                "node_features",
                format!(
                    "{} rows for {} nodes",
                    self.node_features.rows(),
                    n
                ),
            ));
        }
        if self.node_features.cols() == 0 {
            out.push(violation(
                "node_features",
                "at least one feature column is required",
            ));
        }
        for i in 0..self.node_features.rows() {
            for (j, v) in self.node_features.row(i).iter().enumerate() {
                if !v.is_finite() {
                    out.push(violation(
                        format!("node_features[{i}][{j}]"),
                        "non-finite value",
                    ));
                }
            }
        }
        if let Some(ef) = &self.edge_features {
            if ef.rows() != self.edges.len() {
                out.push(violation(
                    "edge_features",
                    format!("{} rows for {} edges", ef.rows(), self.edges.len()),
                ));
            }
            if ef.cols() == 0 {
                out.push(violation(
                    "edge_features",
                    "at least one feature column is required",
                ));
            }
            for i in 0..ef.rows() {
                for (j, v) in ef.row(i).iter().enumerate() {
                    if !v.is_finite() {
                        out.push(violation(
                            format!("edge_features[{i}][{j}]"),
                            "non-finite value",
                        ));
                    }
                }
            }
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != n {
                out.push(violation(
                    "node_labels",
                    format!("{} labels for {} nodes", labels.len(), n),
                ));
            }
        }
        if let Some(masks) = &self.masks {
            for (name, m) in [
                ("masks.train", &masks.train),
                ("masks.val", &masks.val),
                ("masks.test", &masks.test),
            ] {
                if m.len() != n {
                    out.push(violation(
                        name,
                        format!("{} entries for {} nodes", m.len(), n),
                    ));
                }
            }
            let len = masks.train.len().min(masks.val.len()).min(masks.test.len());
            for i in 0..len {
                let count = usize::from(masks.train[i])
                    + usize::from(masks.val[i])
                    + usize::from(masks.test[i]);
                if count > 1 {
                    out.push(violation(
                        format!("masks[{i}]"),
                        "node assigned to more than one split",
                    ));
                }
            }
        }
        out
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn edge_features(&self) -> Option<&Matrix> {
        self.edge_features.as_ref()
    }

    pub fn node_labels(&self) -> Option<&[i64]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<&GraphLabel> {
        self.graph_label.as_ref()
    }

    pub fn masks(&self) -> Option<&Masks> {
        self.masks.as_ref()
    }

    /// Out-neighbors under the (symmetrized, if undirected) adjacency.
    pub fn out_neighbors(&self, v: usize) -> &[usize] {
        &self.out_adj[v]
    }

    pub fn in_neighbors(&self, v: usize) -> &[usize] {
        &self.in_adj[v]
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.out_adj[v].len()
    }

    /// `A · m` computed edge-wise without materializing A. Row accumulation
    /// is order-independent, so node relabeling permutes the result exactly.
    pub fn adjacency_apply(&self, m: &Matrix) -> Result<Matrix> {
        self.adjacency_apply_impl(m, &self.out_adj, None)
    }

    /// `Aᵀ · m` (identical to `adjacency_apply` for undirected graphs).
    pub fn adjacency_apply_transpose(&self, m: &Matrix) -> Result<Matrix> {
        self.adjacency_apply_impl(m, &self.in_adj, None)
    }

    /// `D_out^{-1/2} A D_in^{-1/2} · m`, the optional symmetric
    /// normalization.
    pub fn adjacency_apply_sym(&self, m: &Matrix) -> Result<Matrix> {
        let scale: Vec<f64> = (0..self.num_nodes)
            .map(|v| {
                let d = self.in_adj[v].len() as f64;
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.adjacency_apply_impl(m, &self.out_adj, Some(&scale))?;
        for i in 0..self.num_nodes {
            let d = self.out_adj[i].len() as f64;
            let s = if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        Ok(out)
    }

    pub fn adjacency_apply_sym_transpose(&self, m: &Matrix) -> Result<Matrix> {
        let scale: Vec<f64> = (0..self.num_nodes)
            .map(|v| {
                let d = self.out_adj[v].len() as f64;
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.adjacency_apply_impl(m, &self.in_adj, Some(&scale))?;
        for i in 0..self.num_nodes {
            let d = self.in_adj[i].len() as f64;
            let s = if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// One step of the row-stochastic random walk `P · m` with
    /// `P = D⁻¹ A`; rows of degree-0 nodes are zero.
    pub fn walk_apply(&self, m: &Matrix) -> Result<Matrix> {
        let mut out = self.adjacency_apply_impl(m, &self.out_adj, None)?;
        for i in 0..self.num_nodes {
            let d = self.out_adj[i].len() as f64;
            let s = if d > 0.0 { 1.0 / d } else { 0.0 };
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        Ok(out)
    }

    fn adjacency_apply_impl(
        &self,
        m: &Matrix,
        adj: &[Vec<usize>],
        source_scale: Option<&[f64]>,
    ) -> Result<Matrix> {
        if m.rows() != self.num_nodes {
            return Err(Error::Dimension(format!(
                "adjacency apply: matrix has {} rows for {} nodes",
                m.rows(),
                self.num_nodes
            )));
        }
        let cols = m.cols();
        let mut out = Matrix::zeros(self.num_nodes, cols);
        let mut acc = vec![ExactSum::new(); cols];
        for i in 0..self.num_nodes {
            for a in acc.iter_mut() {
                *a = ExactSum::new();
            }
            for &j in &adj[i] {
                let s = source_scale.map_or(1.0, |sc| sc[j]);
                for (a, &v) in acc.iter_mut().zip(m.row(j)) {
                    a.add(s * v);
                }
            }
            for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = a.value();
            }
        }
        Ok(out)
    }
}

/// Adjacency normalization selector; `None` matches the raw operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AdjacencyNorm {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "sym")]
    Sym,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub metric: MetricKind,
    pub num_classes_or_targets: usize,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(
        name: String,
        task: Task,
        metric: MetricKind,
        num_classes_or_targets: usize,
        graphs: Vec<Graph>,
    ) -> Result<Self> {
        let ds = Self {
            name,
            task,
            metric,
            num_classes_or_targets,
            graphs,
        };
        ds.check_invariants()?;
        Ok(ds)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.graphs.is_empty() {
            return Err(Error::Schema("graphs: dataset contains no graphs".into()));
        }
        if self.num_classes_or_targets == 0 {
            return Err(Error::Schema(
                "num_classes_or_targets: must be positive".into(),
            ));
        }
        let d = self.graphs[0].node_features().cols();
        for (gi, g) in self.graphs.iter().enumerate() {
            if g.node_features().cols() != d {
                return Err(Error::Schema(format!(
                    "graphs[{gi}].node_features: feature dimension {} differs from {} in graphs[0]",
                    g.node_features().cols(),
                    d
                )));
            }
            self.check_labels(gi, g)?;
        }
        if let Some(de) = self.edge_feature_dim() {
            for (gi, g) in self.graphs.iter().enumerate() {
                match g.edge_features() {
                    Some(ef) if ef.cols() != de => {
                        return Err(Error::Schema(format!(
                            "graphs[{gi}].edge_features: dimension {} differs from {de}",
                            ef.cols()
                        )))
                    }
                    None if g.num_edges() > 0 => {
                        return Err(Error::Schema(format!(
                            "graphs[{gi}].edge_features: missing while other graphs carry edge features"
                        )))
                    }
                    _ => {}
                }
            }
        }
        if self.task == Task::NodeClassification {
            if self.graphs.len() != 1 {
                return Err(Error::Schema(format!(
                    "graphs: node-classification dataset must contain exactly one graph, found {}",
                    self.graphs.len()
                )));
            }
            if self.graphs[0].masks().is_none() {
                return Err(Error::Schema(
                    "graphs[0].masks: node-classification graph must carry split masks".into(),
                ));
            }
        }
        Ok(())
    }

    fn check_labels(&self, gi: usize, g: &Graph) -> Result<()> {
        let k = self.num_classes_or_targets;
        match self.task {
            Task::NodeClassification => {
                let labels = g.node_labels().ok_or_else(|| {
                    Error::Schema(format!("graphs[{gi}].node_labels: required for node tasks"))
                })?;
                for (i, &y) in labels.iter().enumerate() {
                    if y < 0 || y as usize >= k {
                        return Err(Error::Schema(format!(
                            "graphs[{gi}].node_labels[{i}]: class {y} outside [0,{k})"
                        )));
                    }
                }
            }
            Task::GraphClassification => match g.graph_label() {
                Some(GraphLabel::Class(y)) if *y >= 0 && (*y as usize) < k => {}
                Some(GraphLabel::Class(y)) => {
                    return Err(Error::Schema(format!(
                        "graphs[{gi}].graph_label: class {y} outside [0,{k})"
                    )))
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "graphs[{gi}].graph_label: integer class label required"
                    )))
                }
            },
            Task::GraphRegression | Task::GraphMultilabel => match g.graph_label() {
                Some(GraphLabel::Vector(v)) if v.len() == k => {
                    if self.task == Task::GraphRegression
                        && v.iter().any(|x| !x.is_finite())
                    {
                        return Err(Error::Schema(format!(
                            "graphs[{gi}].graph_label: regression targets must be finite"
                        )));
                    }
                }
                Some(GraphLabel::Vector(v)) => {
                    return Err(Error::Schema(format!(
                        "graphs[{gi}].graph_label: arity {} does not match {k}",
                        v.len()
                    )))
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "graphs[{gi}].graph_label: target vector required"
                    )))
                }
            },
        }
        Ok(())
    }

    pub fn node_feature_dim(&self) -> usize {
        self.graphs[0].node_features().cols()
    }

    pub fn edge_feature_dim(&self) -> Option<usize> {
        self.graphs
            .iter()
            .find_map(|g| g.edge_features().map(Matrix::cols))
    }

    /// Deterministic 80/10/10 graph-index split for graph-level datasets.
    /// Node-level datasets use the per-node masks instead.
    pub fn graph_split(&self, split: Split) -> Vec<usize> {
        let g = self.graphs.len();
        let train_end = (g * 8) / 10;
        let val_end = (g * 9) / 10;
        let range = match split {
            Split::Train => 0..train_end,
            Split::Val => train_end..val_end,
            Split::Test => val_end..g,
        };
        range.collect()
    }
}

// --- JSON schema -----------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    format_version: u32,
    name: String,
    task: Task,
    metric: MetricKind,
    num_classes_or_targets: usize,
    graphs: Vec<RawGraph>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    num_nodes: usize,
    directed: bool,
    edges: Vec<(i64, i64)>,
    node_features: Vec<Vec<f64>>,
    #[serde(default)]
    edge_features: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    node_labels: Option<Vec<i64>>,
    #[serde(default)]
    graph_label: Option<RawLabel>,
    #[serde(default)]
    masks: Option<RawMasks>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Class(i64),
    // `null` entries mark missing labels (multi-label datasets) and load as NaN
    Vector(Vec<Option<f64>>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMasks {
    train: Vec<bool>,
    val: Vec<bool>,
    test: Vec<bool>,
}

fn convert_graph(gi: usize, raw: RawGraph) -> Result<Graph> {
    let n = raw.num_nodes;
    let mut edges = Vec::with_capacity(raw.edges.len());
    for (k, &(u, v)) in raw.edges.iter().enumerate() {
        if u < 0 || v < 0 || u as usize >= n || v as usize >= n {
            return Err(Error::Schema(format!(
                "index out of range: graphs[{gi}].edges[{k}]: endpoint ({u},{v}) outside [0,{n})"
            )));
        }
        edges.push((u as usize, v as usize));
    }
    let node_features = Matrix::from_rows(&raw.node_features).map_err(|e| {
        Error::Schema(format!("graphs[{gi}].node_features: {e}"))
    })?;
    let edge_features = match raw.edge_features {
        Some(rows) => Some(
            Matrix::from_rows(&rows)
                .map_err(|e| Error::Schema(format!("graphs[{gi}].edge_features: {e}")))?,
        ),
        None => None,
    };
    let graph_label = raw.graph_label.map(|l| match l {
        RawLabel::Class(c) => GraphLabel::Class(c),
        RawLabel::Vector(v) => {
            GraphLabel::Vector(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    });
    let masks = raw.masks.map(|m| Masks {
        train: m.train,
        val: m.val,
        test: m.test,
    });
    Graph::new(
        n,
        raw.directed,
        edges,
        node_features,
        edge_features,
        raw.node_labels,
        graph_label,
        masks,
    )
    .map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("graphs[{gi}]: {msg}")),
        other => other,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    load_dataset_str(&text)
}

pub fn load_dataset_str(text: &str) -> Result<Dataset> {
    let raw: RawDataset = serde_json::from_str(text)?;
    if raw.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            expected: DATASET_FORMAT_VERSION,
            found: raw.format_version,
        });
    }
    let graphs = raw
        .graphs
        .into_iter()
        .enumerate()
        .map(|(gi, g)| convert_graph(gi, g))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        raw.name,
        raw.task,
        raw.metric,
        raw.num_classes_or_targets,
        graphs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle_json() -> &'static str {
        r#"{"format_version":1,"name":"triangle","task":"graph-classification",
            "metric":"accuracy","num_classes_or_targets":2,
            "graphs":[{"num_nodes":3,"directed":false,
                       "edges":[[0,1],[1,2],[2,0]],
                       "node_features":[[1.0,0.0],[0.0,1.0],[1.0,1.0]],
                       "graph_label":0}]}"#
    }

    #[test]
    fn loads_triangle_fixture() {
        let ds = load_dataset_str(triangle_json()).unwrap();
        assert_eq!(ds.graphs.len(), 1);
        assert_eq!(ds.graphs[0].num_nodes(), 3);
        assert_eq!(ds.graphs[0].num_edges(), 3);
        assert_eq!(ds.name, "triangle");
    }

    #[test]
    fn edge_out_of_range_rejected() {
        let bad = triangle_json().replace("[2,0]", "[0,5]");
        let err = load_dataset_str(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("index out of range"), "{msg}");
        assert!(msg.contains("edges[2]"), "{msg}");
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let bad = triangle_json().replacen(
            "\"format_version\":1,",
            "\"format_version\":1,\"surprise\":true,",
            1,
        );
        assert!(matches!(load_dataset_str(&bad), Err(Error::Parse(_))));
    }

    #[test]
    fn wrong_format_version_rejected() {
        let bad = triangle_json().replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(
            load_dataset_str(&bad),
            Err(Error::Version { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn overlapping_masks_rejected() {
        let text = r#"{"format_version":1,"name":"nodes","task":"node-classification",
            "metric":"accuracy","num_classes_or_targets":2,
            "graphs":[{"num_nodes":2,"directed":false,"edges":[[0,1]],
                       "node_features":[[1.0],[2.0]],
                       "node_labels":[0,1],
                       "masks":{"train":[true,false],"val":[true,false],"test":[false,true]}}]}"#;
        let err = load_dataset_str(text).unwrap_err();
        assert!(err.to_string().contains("masks[0]"), "{err}");
    }

    #[test]
    fn duplicate_undirected_edge_rejected() {
        let bad = triangle_json().replace("[2,0]", "[1,0]");
        let err = load_dataset_str(&bad).unwrap_err();
        assert!(err.to_string().contains("duplicate edge"), "{err}");
    }

    #[test]
    fn nan_feature_named_in_violation() {
        let g = Graph::new(
            2,
            false,
            vec![(0, 1)],
            Matrix::from_rows(&[vec![1.0], vec![f64::NAN]]).unwrap(),
            None,
            None,
            None,
            None,
        );
        let err = g.unwrap_err().to_string();
        assert!(err.contains("node_features[1][0]"), "{err}");
    }

    #[test]
    fn validate_reports_rather_than_errors() {
        let mut ok = Graph::new(
            3,
            false,
            vec![(0, 1), (1, 2), (2, 0)],
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap();
        assert!(ok.validate().is_empty());
        // poke a NaN in after construction to exercise the reporting path
        ok.node_features = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![f64::NAN, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let violations = ok.validate();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "node_features[1][0]");
    }

    #[test]
    fn adjacency_two_node_path_is_a_itself() {
        let g = path2();
        let out = g.adjacency_apply(&Matrix::identity(2)).unwrap();
        assert_eq!(out.to_rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    fn path2() -> Graph {
        Graph::new(
            2,
            false,
            vec![(0, 1)],
            Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap()
    }

    fn triangle() -> Graph {
        Graph::new(
            3,
            false,
            vec![(0, 1), (1, 2), (2, 0)],
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn adjacency_triangle_degrees() {
        let g = triangle();
        let ones = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let out = g.adjacency_apply(&ones).unwrap();
        assert_eq!(out.to_rows(), vec![vec![2.0], vec![2.0], vec![2.0]]);
    }

    #[test]
    fn isolated_node_row_is_zero() {
        let g = Graph::new(
            3,
            false,
            vec![(0, 1)],
            Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap(),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap();
        let ones = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let out = g.adjacency_apply(&ones).unwrap();
        assert_eq!(out.row(2), &[0.0]);
    }

    #[test]
    fn adjacency_shape_mismatch() {
        let g = triangle();
        assert!(matches!(
            g.adjacency_apply(&Matrix::zeros(2, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn basis_vector_hits_exactly_neighbors() {
        let g = triangle();
        for i in 0..3 {
            let mut e = Matrix::zeros(3, 1);
            e.set(i, 0, 1.0);
            let out = g.adjacency_apply(&e).unwrap();
            for v in 0..3 {
                let expected = g.out_neighbors(v).contains(&i);
                assert_eq!(out.get(v, 0) != 0.0, expected);
            }
        }
    }

    #[test]
    fn double_apply_matches_dense_square_oracle() {
        use crate::rng::{gaussian_matrix, SeedStream};
        let mut stream = SeedStream::new(17, "adj-oracle");
        for trial in 0..10 {
            let n = 5 + (trial % 4) * 10;
            // random undirected graph
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if stream.next_f64() < 0.2 {
                        edges.push((u, v));
                    }
                }
            }
            let x = gaussian_matrix(n, 3, &mut stream).unwrap();
            let g = Graph::new(
                n,
                false,
                edges.clone(),
                x.clone(),
                None,
                None,
                Some(GraphLabel::Class(0)),
                None,
            )
            .unwrap();
            // dense adjacency oracle
            let mut a = Matrix::zeros(n, n);
            for &(u, v) in &edges {
                a.set(u, v, 1.0);
                a.set(v, u, 1.0);
            }
            let dense = a.matmul(&a.matmul(&x).unwrap()).unwrap();
            let sparse = g.adjacency_apply(&g.adjacency_apply(&x).unwrap()).unwrap();
            assert!(dense.max_abs_diff(&sparse) < 1e-10);
        }
    }

    #[test]
    fn graph_split_is_80_10_10() {
        let graphs: Vec<Graph> = (0..10).map(|_| triangle()).collect();
        let ds = Dataset::new(
            "ten".into(),
            Task::GraphClassification,
            MetricKind::Accuracy,
            2,
            graphs,
        )
        .unwrap();
        assert_eq!(ds.graph_split(Split::Train).len(), 8);
        assert_eq!(ds.graph_split(Split::Val), vec![8]);
        assert_eq!(ds.graph_split(Split::Test), vec![9]);
    }
}
