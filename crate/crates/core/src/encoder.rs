//! Multi-operator message-passing encoder.
//!
//! The initial representation concatenates the projected features with
//! random-walk structural encodings. Each layer applies every operator in
//! the set to the incoming representation, pushes each result through its
//! own affine map, concatenates the sub-outputs in set order, then applies
//! normalization and ReLU. The identity operator carries the self/skip
//! channel, so layers add no extra residual term.
//!
//! Layer width must be divisible by the operator-set size; that fixes the
//! concatenation layout and makes checkpoint shapes self-describing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AdjacencyNorm, Graph, Task};
use crate::matrix::Matrix;
use crate::operators::{OperatorOptions, OperatorSet};
use crate::projection::{aggregate_edges_to_nodes, ProjectionState};
use crate::rng::SeedStream;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const HEAD_HIDDEN_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "batch")]
    Batch,
    /// Per-node normalization; the default at small scale where batch
    /// statistics are ill-defined.
    #[default]
    #[serde(rename = "layer")]
    Layer,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pool {
    #[default]
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "sum")]
    Sum,
}

fn default_projection_dim() -> usize {
    crate::projection::DEFAULT_PROJECTION_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_widths: Vec<usize>,
    /// Propagation orders: the set carries K⁰..Kᵏ.
    #[serde(default)]
    pub k: usize,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default)]
    pub structural_dim: usize,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub use_edge_ops: bool,
    #[serde(default)]
    pub adjacency_norm: AdjacencyNorm,
    #[serde(default)]
    pub spectral_rescale: bool,
    #[serde(default)]
    pub pool: Pool,
}

impl EncoderConfig {
    pub fn uniform(num_layers: usize, width: usize, k: usize, h: usize, h_s: usize) -> Self {
        Self {
            num_layers,
            hidden_widths: vec![width; num_layers],
            k,
            projection_dim: h,
            structural_dim: h_s,
            norm: Norm::default(),
            use_edge_ops: false,
            adjacency_norm: AdjacencyNorm::default(),
            spectral_rescale: false,
            pool: Pool::default(),
        }
    }

    pub fn operator_count(&self) -> usize {
        OperatorSet::size_for(self.k, self.use_edge_ops)
    }

    /// h⁽⁰⁾ = h + h_s.
    pub fn input_width(&self) -> usize {
        self.projection_dim + self.structural_dim
    }

    pub fn output_width(&self) -> usize {
        *self
            .hidden_widths
            .last()
            .expect("validated config has at least one layer")
    }

    pub fn operator_options(&self) -> OperatorOptions {
        OperatorOptions {
            adjacency_norm: self.adjacency_norm,
            spectral_rescale: self.spectral_rescale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("encoder: num_layers must be >= 1".into()));
        }
        if self.hidden_widths.len() != self.num_layers {
            return Err(Error::Config(format!(
                "encoder: {} hidden widths for {} layers",
                self.hidden_widths.len(),
                self.num_layers
            )));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("encoder: projection_dim must be >= 1".into()));
        }
        let ops = self.operator_count();
        for (l, &w) in self.hidden_widths.iter().enumerate() {
            if w == 0 || w % ops != 0 {
                return Err(Error::Config(format!(
                    "encoder: hidden width {w} of layer {l} not divisible by operator count {ops}"
                )));
            }
        }
        Ok(())
    }
}

// --- parameters -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// One weight per operator slot, shape h⁽ℓ⁻¹⁾ × (h⁽ℓ⁾/|O|).
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub norm: Option<NormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<LayerParams>,
}

fn glorot(rows: usize, cols: usize, stream: &mut SeedStream) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = (stream.next_f64() * 2.0 - 1.0) * bound;
    }
    m
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases, identity normalization state.
    pub fn init(cfg: &EncoderConfig, stream: &mut SeedStream) -> Result<Self> {
        cfg.validate()?;
        let ops = cfg.operator_count();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut prev = cfg.input_width();
        for &w in &cfg.hidden_widths {
            let sub = w / ops;
            let weights = (0..ops).map(|_| glorot(prev, sub, stream)).collect();
            let biases = vec![vec![0.0; sub]; ops];
            let norm = match cfg.norm {
                Norm::None => None,
                _ => Some(NormParams {
                    gamma: vec![1.0; w],
                    beta: vec![0.0; w],
                    running_mean: vec![0.0; w],
                    running_var: vec![1.0; w],
                }),
            };
            layers.push(LayerParams {
                weights,
                biases,
                norm,
            });
            prev = w;
        }
        Ok(Self { layers })
    }

    pub fn validate_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        cfg.validate()?;
        let ops = cfg.operator_count();
        if self.layers.len() != cfg.num_layers {
            return Err(Error::Dimension(format!(
                "params: {} layers for config with {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        let mut prev = cfg.input_width();
        for (l, (layer, &w)) in self.layers.iter().zip(&cfg.hidden_widths).enumerate() {
            let sub = w / ops;
            if layer.weights.len() != ops || layer.biases.len() != ops {
                return Err(Error::Dimension(format!(
                    "params: layer {l} has {} operator slots, expected {ops}",
                    layer.weights.len()
                )));
            }
            for (o, (wm, b)) in layer.weights.iter().zip(&layer.biases).enumerate() {
                if wm.rows() != prev || wm.cols() != sub {
                    return Err(Error::Dimension(format!(
                        "params: layer {l} op {o} weight is {}x{}, expected {prev}x{sub}",
                        wm.rows(),
                        wm.cols()
                    )));
                }
                if b.len() != sub {
                    return Err(Error::Dimension(format!(
                        "params: layer {l} op {o} bias has {} entries, expected {sub}",
                        b.len()
                    )));
                }
                if !wm.all_finite() || b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Dimension(format!(
                        "params: layer {l} op {o} contains non-finite values"
                    )));
                }
            }
            match (&layer.norm, cfg.norm) {
                (None, Norm::None) => {}
                (Some(np), Norm::Batch | Norm::Layer) => {
                    for (name, v) in [
                        ("gamma", &np.gamma),
                        ("beta", &np.beta),
                        ("running_mean", &np.running_mean),
                        ("running_var", &np.running_var),
                    ] {
                        if v.len() != w {
                            return Err(Error::Dimension(format!(
                                "params: layer {l} norm {name} has {} entries, expected {w}",
                                v.len()
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::Dimension(format!(
                        "params: layer {l} normalization state does not match config"
                    )))
                }
            }
            prev = w;
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter in canonical order;
    /// used to assert encoder immutability during transfer.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for layer in &self.layers {
            for w in &layer.weights {
                w.data().iter().copied().for_each(&mut eat);
            }
            for b in &layer.biases {
                b.iter().copied().for_each(&mut eat);
            }
            if let Some(np) = &layer.norm {
                np.gamma.iter().copied().for_each(&mut eat);
                np.beta.iter().copied().for_each(&mut eat);
                np.running_mean.iter().copied().for_each(&mut eat);
                np.running_var.iter().copied().for_each(&mut eat);
            }
        }
        h
    }
}

// --- structural encodings and H⁰ --------------------------------------------

/// Random-walk structural encoding: column t (1-based) is the diagonal of
/// Pᵗ for the row-stochastic walk matrix P = D⁻¹A, computed by `h_s` sparse
/// applications. Isolated nodes get all-zero rows. Transient memory is n×n.
pub fn rwse(g: &Graph, h_s: usize) -> Result<Matrix> {
    let n = g.num_nodes();
    let mut s = Matrix::zeros(n, h_s);
    if h_s == 0 {
        return Ok(s);
    }
    let mut m = Matrix::identity(n);
    for t in 0..h_s {
        m = g.walk_apply(&m)?;
        for i in 0..n {
            s.set(i, t, m.get(i, i));
        }
    }
    Ok(s)
}

/// `H⁰ = R⁰ ⊕ S`; with h_s = 0 this is just R⁰.
pub fn build_h0(r0: &Matrix, s: &Matrix) -> Result<Matrix> {
    if s.cols() == 0 {
        return Ok(r0.clone());
    }
    r0.concat_cols(s)
}

// --- layer forward ------------------------------------------------------------

/// Intermediates recorded by one layer forward, sufficient for exact
/// reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// O(H_in) per operator, in set order.
    pub op_inputs: Vec<Matrix>,
    /// Concatenated affine output Z before normalization.
    pub pre_norm: Matrix,
    /// Normalized (pre-affine) values Ẑ when norm is active.
    pub normalized: Option<Matrix>,
    /// Per-row (layer norm) or per-column (batch norm) 1/sqrt(var+eps).
    pub inv_std: Vec<f64>,
    /// Activation output (post-ReLU) of this layer.
    pub output: Matrix,
    /// Batch statistics observed this pass (batch norm in training mode).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// One encoder layer: per-operator affine maps, concatenation in set order,
/// normalization, ReLU.
pub fn layer_forward(
    h_in: &Matrix,
    ops: &OperatorSet,
    g: &Graph,
    layer: &LayerParams,
    norm: Norm,
    training: bool,
) -> Result<(Matrix, LayerCache)> {
    if layer.weights.len() != ops.len() {
        return Err(Error::Config(format!(
            "layer has {} weight slots for {} operators",
            layer.weights.len(),
            ops.len()
        )));
    }
    let n = h_in.rows();
    let sub = layer.weights[0].cols();
    let width = sub * ops.len();
    let mut op_inputs = Vec::with_capacity(ops.len());
    let mut z = Matrix::zeros(n, width);
    for (o, op) in ops.ops().iter().enumerate() {
        let p = op.apply(g, h_in)?;
        let zo = p.matmul(&layer.weights[o])?;
        let bias = &layer.biases[o];
        for i in 0..n {
            let dst = &mut z.row_mut(i)[o * sub..(o + 1) * sub];
            for ((d, &v), &b) in dst.iter_mut().zip(zo.row(i)).zip(bias) {
                *d = v + b;
            }
        }
        op_inputs.push(p);
    }
    let (y, normalized, inv_std, batch_stats) = apply_norm(&z, layer, norm, training)?;
    let mut output = y;
    for v in output.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let cache = LayerCache {
        op_inputs,
        pre_norm: z,
        normalized,
        inv_std,
        output: output.clone(),
        batch_stats,
    };
    Ok((output, cache))
}

#[allow(clippy::type_complexity)]
fn apply_norm(
    z: &Matrix,
    layer: &LayerParams,
    norm: Norm,
    training: bool,
) -> Result<(Matrix, Option<Matrix>, Vec<f64>, Option<(Vec<f64>, Vec<f64>)>)> {
    let n = z.rows();
    let w = z.cols();
    match norm {
        Norm::None => Ok((z.clone(), None, Vec::new(), None)),
        Norm::Layer => {
            let np = layer
                .norm
                .as_ref()
                .ok_or_else(|| Error::Config("layer norm selected but no norm params".into()))?;
            let mut zhat = Matrix::zeros(n, w);
            let mut y = Matrix::zeros(n, w);
            let mut inv_std = vec![0.0; n];
            for i in 0..n {
                let row = z.row(i);
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[i] = istd;
                for j in 0..w {
                    let zh = (row[j] - mean) * istd;
                    zhat.set(i, j, zh);
                    y.set(i, j, np.gamma[j] * zh + np.beta[j]);
                }
            }
            Ok((y, Some(zhat), inv_std, None))
        }
        Norm::Batch => {
            let np = layer
                .norm
                .as_ref()
                .ok_or_else(|| Error::Config("batch norm selected but no norm params".into()))?;
            let (mean, var): (Vec<f64>, Vec<f64>) = if training {
                let mut mean = vec![0.0; w];
                let mut var = vec![0.0; w];
                for j in 0..w {
                    let mut acc = crate::accum::ExactSum::new();
                    for i in 0..n {
                        acc.add(z.get(i, j));
                    }
                    mean[j] = acc.value() / n as f64;
                }
                for j in 0..w {
                    let mut acc = crate::accum::ExactSum::new();
                    for i in 0..n {
                        let d = z.get(i, j) - mean[j];
                        acc.add(d * d);
                    }
                    var[j] = acc.value() / n as f64;
                }
                (mean, var)
            } else {
                (np.running_mean.clone(), np.running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let mut zhat = Matrix::zeros(n, w);
            let mut y = Matrix::zeros(n, w);
            for i in 0..n {
                for j in 0..w {
                    let zh = (z.get(i, j) - mean[j]) * inv_std[j];
                    zhat.set(i, j, zh);
                    y.set(i, j, np.gamma[j] * zh + np.beta[j]);
                }
            }
            let stats = if training { Some((mean, var)) } else { None };
            Ok((y, Some(zhat), inv_std, stats))
        }
    }
}

/// Folds observed batch statistics into the running estimates. Called by the
/// training loop after a forward pass in training mode; forward itself never
/// mutates parameters.
pub fn apply_batch_stat_updates(params: &mut EncoderParams, caches: &[LayerCache]) {
    for (layer, cache) in params.layers.iter_mut().zip(caches) {
        if let (Some(np), Some((mean, var))) = (layer.norm.as_mut(), cache.batch_stats.as_ref()) {
            for j in 0..np.running_mean.len() {
                np.running_mean[j] =
                    (1.0 - BATCH_NORM_MOMENTUM) * np.running_mean[j] + BATCH_NORM_MOMENTUM * mean[j];
                np.running_var[j] =
                    (1.0 - BATCH_NORM_MOMENTUM) * np.running_var[j] + BATCH_NORM_MOMENTUM * var[j];
            }
        }
    }
}

// --- full forward -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub h0: Matrix,
    pub ops: OperatorSet,
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn h_final(&self) -> &Matrix {
        self.layers
            .last()
            .map(|l| &l.output)
            .unwrap_or(&self.h0)
    }
}

/// Forward pass from an already-drawn projection. `r0_edge` is the
/// node-aggregated projected edge features; when the config enables edge
/// operators but the graph has none, pass `None` and zero operators fill the
/// slots. `s` optionally supplies a precomputed structural encoding.
pub fn forward_from_projection(
    g: &Graph,
    r0: &Matrix,
    r0_edge: Option<&Matrix>,
    s: Option<&Matrix>,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    training: bool,
) -> Result<(Matrix, ForwardCache)> {
    let owned_s;
    let s = match s {
        Some(s) => s,
        None => {
            owned_s = rwse(g, cfg.structural_dim)?;
            &owned_s
        }
    };
    let h0 = build_h0(r0, s)?;
    if h0.cols() != cfg.input_width() {
        return Err(Error::Dimension(format!(
            "encoder: H0 width {} does not match configured {}",
            h0.cols(),
            cfg.input_width()
        )));
    }
    let zero_edge;
    let edge_input = if cfg.use_edge_ops {
        Some(match r0_edge {
            Some(re) => re,
            None => {
                // graphs without edge features contribute zero edge operators,
                // keeping the operator count and widths constant across datasets
                zero_edge = Matrix::zeros(g.num_nodes(), cfg.projection_dim);
                &zero_edge
            }
        })
    } else {
        None
    };
    let ops = OperatorSet::build(g, r0, cfg.k, edge_input, &cfg.operator_options())?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut h = h0.clone();
    for layer in &params.layers {
        let (next, cache) = layer_forward(&h, &ops, g, layer, cfg.norm, training)?;
        layers.push(cache);
        h = next;
    }
    Ok((h, ForwardCache { h0, ops, layers }))
}

/// Full forward pass: draws/reuses C per the projection state's policy,
/// projects nodes (and edges when configured), and runs the layer stack in
/// evaluation mode.
pub fn encoder_forward(
    g: &Graph,
    ps: &mut ProjectionState,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<Matrix> {
    let r0_edge = if cfg.use_edge_ops {
        match ps.project_edges_with_current(g)? {
            Some(pe) => Some(aggregate_edges_to_nodes(g, &pe)?),
            None => None,
        }
    } else {
        None
    };
    let r0 = ps.project_nodes(g)?;
    let (h, _) = forward_from_projection(g, &r0, r0_edge.as_ref(), None, cfg, params, false)?;
    Ok(h)
}

/// Column means (or sums) of the final representation.
pub fn pool_graph(h_final: &Matrix, pool: Pool) -> Result<Vec<f64>> {
    if h_final.rows() == 0 {
        return Err(Error::Dimension("pool: empty representation".into()));
    }
    let means = h_final.col_means();
    Ok(match pool {
        Pool::Mean => means,
        Pool::Sum => means
            .into_iter()
            .map(|m| m * h_final.rows() as f64)
            .collect(),
    })
}

// --- task heads ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "mlp")]
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub task: Task,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// Present for the MLP head only.
    pub w2: Option<Matrix>,
    pub b2: Option<Vec<f64>>,
}

impl TaskHead {
    pub fn init(
        kind: HeadKind,
        task: Task,
        in_dim: usize,
        out_dim: usize,
        stream: &mut SeedStream,
    ) -> Self {
        match kind {
            HeadKind::Linear => Self {
                kind,
                task,
                w1: glorot(in_dim, out_dim, stream),
                b1: vec![0.0; out_dim],
                w2: None,
                b2: None,
            },
            HeadKind::Mlp => Self {
                kind,
                task,
                w1: glorot(in_dim, HEAD_HIDDEN_WIDTH, stream),
                b1: vec![0.0; HEAD_HIDDEN_WIDTH],
                w2: Some(glorot(HEAD_HIDDEN_WIDTH, out_dim, stream)),
                b2: Some(vec![0.0; out_dim]),
            },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        match (self.kind, &self.w2) {
            (HeadKind::Mlp, Some(w2)) => w2.cols(),
            _ => self.w1.cols(),
        }
    }

    /// Raw scores per row: logits for classification, values for regression.
    pub fn forward(&self, embedding: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(embedding)?.0)
    }

    pub fn forward_cached(&self, embedding: &Matrix) -> Result<(Matrix, HeadCache)> {
        if embedding.cols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "head: embedding width {} does not match head input {}",
                embedding.cols(),
                self.in_dim()
            )));
        }
        let mut a1 = embedding.matmul(&self.w1)?;
        for i in 0..a1.rows() {
            for (v, b) in a1.row_mut(i).iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        match self.kind {
            HeadKind::Linear => Ok((
                a1.clone(),
                HeadCache {
                    input: embedding.clone(),
                    hidden: None,
                },
            )),
            HeadKind::Mlp => {
                let mut hidden = a1;
                for v in hidden.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let w2 = self.w2.as_ref().expect("mlp head has second layer");
                let b2 = self.b2.as_ref().expect("mlp head has second bias");
                let mut out = hidden.matmul(w2)?;
                for i in 0..out.rows() {
                    for (v, b) in out.row_mut(i).iter_mut().zip(b2) {
                        *v += b;
                    }
                }
                Ok((
                    out,
                    HeadCache {
                        input: embedding.clone(),
                        hidden: Some(hidden),
                    },
                ))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub input: Matrix,
    /// Post-ReLU hidden activations (MLP head only).
    pub hidden: Option<Matrix>,
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// --- checkpoints ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub heads: BTreeMap<String, TaskHead>,
    pub master_seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorRepr {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    fn from_vec(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    fn into_matrix(self, name: &str) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::Schema(format!("{name}: expected rank-2 tensor")));
        }
        Matrix::from_vec(self.shape[0], self.shape[1], self.data)
            .map_err(|e| Error::Schema(format!("{name}: {e}")))
    }

    fn into_vec(self, name: &str) -> Result<Vec<f64>> {
        if self.shape.len() != 1 || self.shape[0] != self.data.len() {
            return Err(Error::Schema(format!("{name}: expected rank-1 tensor")));
        }
        Ok(self.data)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadRepr {
    kind: HeadKind,
    task: Task,
    w1: TensorRepr,
    b1: TensorRepr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w2: Option<TensorRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b2: Option<TensorRepr>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: EncoderConfig,
    params: BTreeMap<String, TensorRepr>,
    heads: BTreeMap<String, HeadRepr>,
    master_seed: u64,
    step: u64,
}

/// Canonical parameter names: `layer{l}/op{o}/weight`, `layer{l}/op{o}/bias`,
/// `layer{l}/norm/{gamma,beta,running_mean,running_var}`. Serialization is
/// sorted by name for diff-ability and bit-exact round-trips.
fn params_to_map(params: &EncoderParams) -> BTreeMap<String, TensorRepr> {
    let mut map = BTreeMap::new();
    for (l, layer) in params.layers.iter().enumerate() {
        for (o, (w, b)) in layer.weights.iter().zip(&layer.biases).enumerate() {
            map.insert(format!("layer{l}/op{o}/weight"), TensorRepr::from_matrix(w));
            map.insert(format!("layer{l}/op{o}/bias"), TensorRepr::from_vec(b));
        }
        if let Some(np) = &layer.norm {
            map.insert(format!("layer{l}/norm/gamma"), TensorRepr::from_vec(&np.gamma));
            map.insert(format!("layer{l}/norm/beta"), TensorRepr::from_vec(&np.beta));
            map.insert(
                format!("layer{l}/norm/running_mean"),
                TensorRepr::from_vec(&np.running_mean),
            );
            map.insert(
                format!("layer{l}/norm/running_var"),
                TensorRepr::from_vec(&np.running_var),
            );
        }
    }
    map
}

fn params_from_map(
    cfg: &EncoderConfig,
    mut map: BTreeMap<String, TensorRepr>,
) -> Result<EncoderParams> {
    let ops = cfg.operator_count();
    let mut take = |name: String| {
        map.remove(&name)
            .ok_or_else(|| Error::Schema(format!("checkpoint missing parameter {name}")))
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let mut weights = Vec::with_capacity(ops);
        let mut biases = Vec::with_capacity(ops);
        for o in 0..ops {
            let w = take(format!("layer{l}/op{o}/weight"))?;
            weights.push(w.into_matrix(&format!("layer{l}/op{o}/weight"))?);
            let b = take(format!("layer{l}/op{o}/bias"))?;
            biases.push(b.into_vec(&format!("layer{l}/op{o}/bias"))?);
        }
        let norm = match cfg.norm {
            Norm::None => None,
            _ => Some(NormParams {
                gamma: take(format!("layer{l}/norm/gamma"))?.into_vec("gamma")?,
                beta: take(format!("layer{l}/norm/beta"))?.into_vec("beta")?,
                running_mean: take(format!("layer{l}/norm/running_mean"))?
                    .into_vec("running_mean")?,
                running_var: take(format!("layer{l}/norm/running_var"))?
                    .into_vec("running_var")?,
            }),
        };
        layers.push(LayerParams {
            weights,
            biases,
            norm,
        });
    }
    if let Some(name) = map.keys().next() {
        return Err(Error::Schema(format!(
            "checkpoint carries unexpected parameter {name}"
        )));
    }
    let params = EncoderParams { layers };
    params.validate_shapes(cfg)?;
    Ok(params)
}

fn head_to_repr(head: &TaskHead) -> HeadRepr {
    HeadRepr {
        kind: head.kind,
        task: head.task,
        w1: TensorRepr::from_matrix(&head.w1),
        b1: TensorRepr::from_vec(&head.b1),
        w2: head.w2.as_ref().map(TensorRepr::from_matrix),
        b2: head.b2.as_ref().map(|b| TensorRepr::from_vec(b)),
    }
}

fn head_from_repr(name: &str, repr: HeadRepr) -> Result<TaskHead> {
    let head = TaskHead {
        kind: repr.kind,
        task: repr.task,
        w1: repr.w1.into_matrix(&format!("heads.{name}.w1"))?,
        b1: repr.b1.into_vec(&format!("heads.{name}.b1"))?,
        w2: repr
            .w2
            .map(|t| t.into_matrix(&format!("heads.{name}.w2")))
            .transpose()?,
        b2: repr
            .b2
            .map(|t| t.into_vec(&format!("heads.{name}.b2")))
            .transpose()?,
    };
    if head.kind == HeadKind::Mlp && (head.w2.is_none() || head.b2.is_none()) {
        return Err(Error::Schema(format!(
            "heads.{name}: mlp head missing second layer"
        )));
    }
    Ok(head)
}

pub fn checkpoint_to_json(ckpt: &Checkpoint) -> Result<String> {
    ckpt.params.validate_shapes(&ckpt.config)?;
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ckpt.config.clone(),
        params: params_to_map(&ckpt.params),
        heads: ckpt
            .heads
            .iter()
            .map(|(k, v)| (k.clone(), head_to_repr(v)))
            .collect(),
        master_seed: ckpt.master_seed,
        step: ckpt.step,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    // read the version before strict field validation so mismatches surface
    // as version errors, not schema noise
    #[derive(Deserialize)]
    struct VersionProbe {
        format_version: u32,
    }
    let probe: VersionProbe = serde_json::from_str(text)?;
    if probe.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_FORMAT_VERSION,
            found: probe.format_version,
        });
    }
    let file: CheckpointFile = serde_json::from_str(text)?;
    let params = params_from_map(&file.config, file.params)?;
    let heads = file
        .heads
        .into_iter()
        .map(|(name, repr)| {
            let head = head_from_repr(&name, repr)?;
            Ok((name, head))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Checkpoint {
        config: file.config,
        params,
        heads,
        master_seed: file.master_seed,
        step: file.step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphLabel;
    use crate::projection::ProjectionMode;
    use crate::rng::gaussian_matrix;

    fn path_graph(n: usize, d: usize) -> Graph {
        let mut stream = SeedStream::new(3, "enc-test");
        let x = gaussian_matrix(n, d, &mut stream).unwrap();
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::new(n, false, edges, x, None, None, Some(GraphLabel::Class(0)), None).unwrap()
    }

    fn triangle_graph() -> Graph {
        Graph::new(
            3,
            false,
            vec![(0, 1), (1, 2), (2, 0)],
            Matrix::identity(3),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn rwse_two_node_path() {
        let g = path_graph(2, 1);
        let s = rwse(&g, 3).unwrap();
        for i in 0..2 {
            assert_eq!(s.row(i), &[0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn rwse_triangle_return_probabilities() {
        let g = triangle_graph();
        let s = rwse(&g, 3).unwrap();
        for i in 0..3 {
            let row = s.row(i);
            assert!((row[0] - 0.0).abs() < 1e-15);
            assert!((row[1] - 0.5).abs() < 1e-15);
            assert!((row[2] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn rwse_isolated_node_is_zero() {
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
        let s = rwse(&g, 4).unwrap();
        assert_eq!(s.row(2), &[0.0; 4]);
    }

    #[test]
    fn h0_concat_layout() {
        let r0 = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let s = Matrix::from_rows(&[vec![9.0]]).unwrap();
        let h0 = build_h0(&r0, &s).unwrap();
        assert_eq!(h0.to_rows(), vec![vec![1.0, 2.0, 9.0]]);
        let empty = Matrix::zeros(1, 0);
        assert_eq!(build_h0(&r0, &empty).unwrap(), r0);
        let bad = Matrix::zeros(2, 1);
        assert!(build_h0(&r0, &bad).is_err());
    }

    fn tiny_config() -> EncoderConfig {
        let mut cfg = EncoderConfig::uniform(2, 12, 0, 4, 2);
        cfg.norm = Norm::Layer;
        cfg
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = tiny_config();
        let g = path_graph(5, 3);
        let mut stream = SeedStream::new(1, "zero");
        let mut params = EncoderParams::init(&cfg, &mut stream).unwrap();
        for layer in &mut params.layers {
            for w in &mut layer.weights {
                for v in w.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let r0 = gaussian_matrix(5, 4, &mut stream).unwrap();
        let (h, _) = forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn identity_weights_single_operator_is_relu() {
        // operator set [I] alone cannot be configured (I and A are always
        // present), so check the equivalent: zero adjacency/cov weights and
        // identity on the I slot with norm=none reduces to ReLU(H_in W).
        let g = path_graph(4, 3);
        let mut cfg = EncoderConfig::uniform(1, 15, 0, 3, 2);
        cfg.norm = Norm::None;
        let mut stream = SeedStream::new(8, "identity");
        let mut params = EncoderParams::init(&cfg, &mut stream).unwrap();
        for w in &mut params.layers[0].weights[1..] {
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        let identity_slot = {
            let mut m = Matrix::zeros(5, 5);
            for i in 0..5 {
                m.set(i, i, 1.0);
            }
            m
        };
        params.layers[0].weights[0] = identity_slot;
        let r0 = gaussian_matrix(4, 3, &mut stream).unwrap();
        let (h, _) = forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();
        let s = rwse(&g, 2).unwrap();
        let h0 = build_h0(&r0, &s).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(h.get(i, j), h0.get(i, j).max(0.0));
            }
        }
        // remaining sub-blocks are zero
        for i in 0..4 {
            for j in 5..15 {
                assert_eq!(h.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn sublayer_width_layout() {
        let g = path_graph(4, 2);
        let mut cfg = EncoderConfig::uniform(1, 8, 0, 2, 0);
        cfg.norm = Norm::None;
        // k=0 set has 3 operators; width 8 not divisible by 3
        assert!(cfg.validate().is_err());
        cfg.hidden_widths = vec![9];
        cfg.validate().unwrap();
        let mut stream = SeedStream::new(2, "layout");
        let params = EncoderParams::init(&cfg, &mut stream).unwrap();
        assert_eq!(params.layers[0].weights.len(), 3);
        assert_eq!(params.layers[0].weights[0].cols(), 3);
        let r0 = gaussian_matrix(4, 2, &mut stream).unwrap();
        let (h, _) = forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();
        assert_eq!(h.cols(), 9);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_projection() {
        let cfg = tiny_config();
        let g = path_graph(6, 3);
        let mut stream = SeedStream::new(77, "det");
        let params = EncoderParams::init(&cfg, &mut stream).unwrap();
        let r0 = gaussian_matrix(6, 4, &mut stream).unwrap();
        let (a, _) = forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();
        let (b, _) = forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn node_permutation_equivariance_is_bit_exact() {
        // relabel nodes by sigma; with the same C and norm=none the output
        // rows permute exactly
        let n = 7;
        let mut cfg = EncoderConfig::uniform(2, 10, 2, 5, 3);
        cfg.norm = Norm::None;
        let mut stream = SeedStream::new(13, "equivariance");
        let params = EncoderParams::init(&cfg, &mut stream).unwrap();
        let x = gaussian_matrix(n, 4, &mut stream).unwrap();
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 0), (1, 4)];
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
        let c = gaussian_matrix(4, 5, &mut stream).unwrap();
        let r0 = x.matmul(&c).unwrap();
        let (h, _) = forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();

        // permutation sigma: new index = sigma[old index]
        let sigma = [3usize, 0, 5, 1, 6, 2, 4];
        let mut x_rows = vec![vec![0.0; 4]; n];
        for old in 0..n {
            x_rows[sigma[old]] = x.row(old).to_vec();
        }
        let x_perm = Matrix::from_rows(&x_rows).unwrap();
        let edges_perm: Vec<(usize, usize)> =
            edges.iter().map(|&(u, v)| (sigma[u], sigma[v])).collect();
        let g_perm = Graph::new(
            n,
            false,
            edges_perm,
            x_perm.clone(),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        )
        .unwrap();
        let r0_perm = x_perm.matmul(&c).unwrap();
        let (h_perm, _) =
            forward_from_projection(&g_perm, &r0_perm, None, None, &cfg, &params, false).unwrap();
        for old in 0..n {
            let a = h.row(old);
            let b = h_perm.row(sigma[old]);
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "row {old} differs");
            }
        }
    }

    #[test]
    fn pool_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(pool_graph(&m, Pool::Mean).unwrap(), vec![2.0, 4.0]);
        let single = Matrix::from_rows(&[vec![7.0, -2.0]]).unwrap();
        assert_eq!(pool_graph(&single, Pool::Mean).unwrap(), vec![7.0, -2.0]);
        let equal = Matrix::from_rows(&[vec![4.0], vec![4.0], vec![4.0]]).unwrap();
        assert_eq!(pool_graph(&equal, Pool::Mean).unwrap(), vec![4.0]);
        assert!(pool_graph(&Matrix::zeros(0, 2), Pool::Mean).is_err());
    }

    #[test]
    fn head_examples() {
        let mut stream = SeedStream::new(5, "head");
        let mut head = TaskHead::init(HeadKind::Linear, Task::GraphClassification, 2, 2, &mut stream);
        for v in head.w1.data_mut() {
            *v = 0.0;
        }
        let e = Matrix::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let out = head.forward(&e).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0]);
        assert_eq!(argmax(out.row(0)), 0); // tie broken to lowest index

        head.w1 = Matrix::identity(2);
        let scores = head.forward(&Matrix::from_rows(&[vec![0.2, 0.9]]).unwrap()).unwrap();
        assert_eq!(argmax(scores.row(0)), 1);

        let reg = TaskHead::init(HeadKind::Linear, Task::GraphRegression, 2, 1, &mut stream);
        assert_eq!(reg.forward(&e).unwrap().cols(), 1);
    }

    #[test]
    fn head_width_mismatch() {
        let mut stream = SeedStream::new(5, "head2");
        let head = TaskHead::init(HeadKind::Mlp, Task::GraphClassification, 4, 3, &mut stream);
        assert!(head.forward(&Matrix::zeros(1, 5)).is_err());
        assert_eq!(head.out_dim(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = tiny_config();
        let mut stream = SeedStream::new(42, "ckpt");
        let params = EncoderParams::init(&cfg, &mut stream).unwrap();
        let mut heads = BTreeMap::new();
        heads.insert(
            "demo".to_string(),
            TaskHead::init(HeadKind::Mlp, Task::GraphClassification, 12, 2, &mut stream),
        );
        let ckpt = Checkpoint {
            config: cfg.clone(),
            params,
            heads,
            master_seed: 42,
            step: 17,
        };
        let json = checkpoint_to_json(&ckpt).unwrap();
        let back = checkpoint_from_json(&json).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.params.hash64(), ckpt.params.hash64());

        // forward outputs identical under a fixed projection
        let g = path_graph(5, 3);
        let r0 = gaussian_matrix(5, 4, &mut stream).unwrap();
        let (a, _) =
            forward_from_projection(&g, &r0, None, None, &ckpt.config, &ckpt.params, false).unwrap();
        let (b, _) =
            forward_from_projection(&g, &r0, None, None, &back.config, &back.params, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_version_and_shape_errors() {
        let cfg = tiny_config();
        let mut stream = SeedStream::new(42, "ckpt2");
        let params = EncoderParams::init(&cfg, &mut stream).unwrap();
        let ckpt = Checkpoint {
            config: cfg,
            params,
            heads: BTreeMap::new(),
            master_seed: 0,
            step: 0,
        };
        let json = checkpoint_to_json(&ckpt).unwrap();

        let bad_version = json.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(
            checkpoint_from_json(&bad_version),
            Err(Error::Version { found: 9, .. })
        ));

        assert!(matches!(
            checkpoint_from_json("{corrupted"),
            Err(Error::Parse(_))
        ));

        // config says width 24 but tensors were built for 12
        let widened = json.replacen("\"hidden_widths\":[12,12]", "\"hidden_widths\":[24,24]", 1);
        assert!(checkpoint_from_json(&widened).is_err());
    }

    #[test]
    fn encoder_forward_uses_projection_policy() {
        let cfg = tiny_config();
        let g = path_graph(5, 3);
        let mut stream = SeedStream::new(15, "fwd");
        let params = EncoderParams::init(&cfg, &mut stream).unwrap();
        let mut ps1 = ProjectionState::new(9, "d", 3, None, 4, ProjectionMode::PerPass, 1).unwrap();
        let mut ps2 = ProjectionState::new(9, "d", 3, None, 4, ProjectionMode::PerPass, 1).unwrap();
        let a = encoder_forward(&g, &mut ps1, &cfg, &params).unwrap();
        let b = encoder_forward(&g, &mut ps2, &cfg, &params).unwrap();
        assert_eq!(a, b); // same seed, same draw
        let c = encoder_forward(&g, &mut ps1, &cfg, &params).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-9); // per-pass resample
    }

    #[test]
    fn zero_feature_zero_param_forward_is_zero() {
        let mut cfg = tiny_config();
        cfg.norm = Norm::None;
        let g = Graph::new(
            3,
            false,
            vec![(0, 1), (1, 2)],
            Matrix::zeros(3, 3),
            None,
            None,
            Some(GraphLabel::Class(0)),
            None,
        );
        // zero features are fine (finite), but num cols must be >=1
        let g = g.unwrap();
        let mut stream = SeedStream::new(3, "zero2");
        let mut params = EncoderParams::init(&cfg, &mut stream).unwrap();
        for layer in &mut params.layers {
            for w in &mut layer.weights {
                for v in w.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let r0 = Matrix::zeros(3, 4);
        let (h, _) = forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }
}
