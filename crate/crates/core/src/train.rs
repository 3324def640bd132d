//! Adam, round-robin multitask pretraining, frozen-encoder transfer, and
//! evaluation.
//!
//! Pretraining shares one encoder across datasets with a dedicated head per
//! dataset. Each epoch iterates the datasets in list order with equal
//! weighting, mini-batching graphs within each; covariance operators are
//! per-graph, so batching is block-diagonal by construction and gradients
//! accumulate in a fixed (sorted) graph order. One projection draw serves a
//! whole batch; the cached refresh schedule counts batches as forward
//! passes.
//!
//! Transfer freezes every encoder bit: a fresh projection state is built for
//! the target's feature dimension and only the new head is optimized (at its
//! own learning rate). Evaluation resamples C once per forward pass unless
//! `eval_avg_draws > 1`, which averages logits over that many draws.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    apply_batch_stat_updates, Checkpoint, EncoderConfig, EncoderParams, HeadKind, TaskHead,
};
use crate::error::{Error, Result};
use crate::grad::{backward, forward_loss, head_backward, EncoderGrads, HeadGrads};
use crate::graph::{Dataset, Graph, GraphLabel, MetricKind, Split, Task};
use crate::loss::{loss_and_grad, LossSpec, Target};
use crate::matrix::Matrix;
use crate::projection::{aggregate_edges_to_nodes, ProjectionMode, ProjectionState};
use crate::rng::SeedStream;

// --- configuration -----------------------------------------------------------

fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-4
}
fn d_head_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_mode() -> ProjectionMode {
    ProjectionMode::Cached
}
fn d_refresh() -> u64 {
    crate::projection::DEFAULT_REFRESH_INTERVAL
}
fn d_draws() -> usize {
    1
}
fn d_head() -> HeadKind {
    HeadKind::Mlp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Used for the fresh head during transfer.
    #[serde(default = "d_head_lr")]
    pub head_learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_mode")]
    pub projection_mode: ProjectionMode,
    #[serde(default = "d_refresh")]
    pub refresh_interval: u64,
    #[serde(default = "d_draws")]
    pub eval_avg_draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_head")]
    pub head: HeadKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            batch_size: d_batch(),
            learning_rate: d_lr(),
            head_learning_rate: d_head_lr(),
            weight_decay: 0.0,
            beta1: d_beta1(),
            beta2: d_beta2(),
            adam_eps: d_eps(),
            projection_mode: d_mode(),
            refresh_interval: d_refresh(),
            eval_avg_draws: d_draws(),
            seed: 0,
            head: d_head(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.head_learning_rate <= 0.0 {
            return Err(Error::Config("train: learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train: adam betas must lie in [0,1)".into()));
        }
        if self.eval_avg_draws == 0 {
            return Err(Error::Config("train: eval_avg_draws must be positive".into()));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Config("train: refresh_interval must be positive".into()));
        }
        Ok(())
    }
}

// --- Adam ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Standard Adam with bias correction over a flattened view of the
/// parameters. L2 weight decay is folded into the gradient.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let total: usize = params.iter().map(|s| s.len()).sum();
    let gtotal: usize = grads.iter().map(|s| s.len()).sum();
    if total != state.m.len() || total != gtotal {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, state for {}",
            total,
            gtotal,
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    let mut idx = 0;
    for (pslice, gslice) in params.iter_mut().zip(grads) {
        for (p, &g0) in pslice.iter_mut().zip(gslice.iter()) {
            let g = g0 + hyper.weight_decay * *p;
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            idx += 1;
        }
    }
    Ok(())
}

// flattened views in canonical order (running norm statistics are not
// trainable and are excluded)

pub fn encoder_param_slices(params: &mut EncoderParams) -> Vec<&mut [f64]> {
    let mut out = Vec::new();
    for layer in &mut params.layers {
        for w in &mut layer.weights {
            out.push(w.data_mut());
        }
        for b in &mut layer.biases {
            out.push(b.as_mut_slice());
        }
        if let Some(np) = layer.norm.as_mut() {
            out.push(np.gamma.as_mut_slice());
            out.push(np.beta.as_mut_slice());
        }
    }
    out
}

pub fn encoder_grad_slices(grads: &EncoderGrads) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for layer in &grads.layers {
        for w in &layer.weights {
            out.push(w.data());
        }
        for b in &layer.biases {
            out.push(b.as_slice());
        }
        if let Some(g) = layer.gamma.as_ref() {
            out.push(g.as_slice());
        }
        if let Some(b) = layer.beta.as_ref() {
            out.push(b.as_slice());
        }
    }
    out
}

pub fn head_param_slices(head: &mut TaskHead) -> Vec<&mut [f64]> {
    let mut out = vec![head.w1.data_mut()];
    out.push(head.b1.as_mut_slice());
    if let Some(w2) = head.w2.as_mut() {
        out.push(w2.data_mut());
    }
    if let Some(b2) = head.b2.as_mut() {
        out.push(b2.as_mut_slice());
    }
    out
}

pub fn head_grad_slices(grads: &HeadGrads) -> Vec<&[f64]> {
    let mut out = vec![grads.w1.data()];
    out.push(grads.b1.as_slice());
    if let Some(w2) = grads.w2.as_ref() {
        out.push(w2.data());
    }
    if let Some(b2) = grads.b2.as_ref() {
        out.push(b2.as_slice());
    }
    out
}

fn slice_total(slices: &[&[f64]]) -> usize {
    slices.iter().map(|s| s.len()).sum()
}

// --- metrics ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub dataset: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Rank-statistic ROC-AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Dimension("roc-auc: mismatched or empty inputs".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(
            "roc-auc undefined: split contains a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank over the tie group [i, j]
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0)
        / (n_pos as f64 * n_neg as f64);
    Ok(auc)
}

fn binary_score(logits: &[f64]) -> f64 {
    if logits.len() >= 2 {
        logits[1] - logits[0]
    } else {
        logits[0]
    }
}

// --- forward helpers ------------------------------------------------------------

fn projected_inputs(
    ps: &ProjectionState,
    g: &Graph,
    use_edge_ops: bool,
) -> Result<(Matrix, Option<Matrix>)> {
    let r0_edge = if use_edge_ops {
        match ps.project_edges_with_current(g)? {
            Some(pe) => Some(aggregate_edges_to_nodes(g, &pe)?),
            None => None,
        }
    } else {
        None
    };
    let r0 = ps.project_nodes_with_current(g)?;
    Ok((r0, r0_edge))
}

/// Logits for one graph, averaged over `draws` projection draws. Each draw
/// advances the state. Node-level heads produce n×out, graph-level 1×out.
fn graph_logits(
    g: &Graph,
    ps: &mut ProjectionState,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    head: &TaskHead,
    s: Option<&Matrix>,
    draws: usize,
) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for _ in 0..draws {
        let (r0, r0_edge) = projected_inputs(ps, g, cfg.use_edge_ops)?;
        ps.advance();
        let (h_final, _) = crate::encoder::forward_from_projection(
            g,
            &r0,
            r0_edge.as_ref(),
            s,
            cfg,
            params,
            false,
        )?;
        let embedding = if head.task.is_node_level() {
            h_final
        } else {
            Matrix::from_rows(&[crate::encoder::pool_graph(&h_final, cfg.pool)?])?
        };
        let logits = head.forward(&embedding)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&logits)?,
            None => acc = Some(logits),
        }
    }
    let mut out = acc.expect("draws >= 1");
    out.scale(1.0 / draws as f64);
    Ok(out)
}

// --- evaluation -------------------------------------------------------------------

/// Metric value for one split. Node-level datasets use the stored masks,
/// graph-level datasets the deterministic index split.
pub fn evaluate(
    cfg: &EncoderConfig,
    params: &EncoderParams,
    head: &TaskHead,
    dataset: &Dataset,
    split: Split,
    ps: &mut ProjectionState,
    draws: usize,
) -> Result<f64> {
    match dataset.task {
        Task::NodeClassification => {
            let g = &dataset.graphs[0];
            let mask = g
                .masks()
                .ok_or_else(|| Error::Schema("masks missing".into()))?
                .get(split);
            if !mask.iter().any(|&b| b) {
                return Err(Error::EmptySplit(format!(
                    "{} has no {} nodes",
                    dataset.name,
                    split.name()
                )));
            }
            let logits = graph_logits(g, ps, cfg, params, head, None, draws)?;
            let labels = g.node_labels().expect("validated dataset");
            match dataset.metric {
                MetricKind::Accuracy => {
                    let mut hit = 0usize;
                    let mut total = 0usize;
                    for i in 0..g.num_nodes() {
                        if !mask[i] {
                            continue;
                        }
                        total += 1;
                        if crate::encoder::argmax(logits.row(i)) == labels[i] as usize {
                            hit += 1;
                        }
                    }
                    Ok(hit as f64 / total as f64)
                }
                MetricKind::RocAuc => {
                    let mut scores = Vec::new();
                    let mut ls = Vec::new();
                    for i in 0..g.num_nodes() {
                        if mask[i] {
                            scores.push(binary_score(logits.row(i)));
                            ls.push(labels[i] == 1);
                        }
                    }
                    roc_auc(&scores, &ls)
                }
                other => Err(Error::Config(format!(
                    "metric {} is not defined for node classification",
                    other.name()
                ))),
            }
        }
        _ => {
            let indices = dataset.graph_split(split);
            if indices.is_empty() {
                return Err(Error::EmptySplit(format!(
                    "{} has no {} graphs",
                    dataset.name,
                    split.name()
                )));
            }
            let mut logit_rows = Vec::with_capacity(indices.len());
            for &gi in &indices {
                let logits = graph_logits(
                    &dataset.graphs[gi],
                    ps,
                    cfg,
                    params,
                    head,
                    None,
                    draws,
                )?;
                logit_rows.push(logits.row(0).to_vec());
            }
            graph_level_metric(dataset, &indices, &logit_rows)
        }
    }
}

fn graph_level_metric(
    dataset: &Dataset,
    indices: &[usize],
    logits: &[Vec<f64>],
) -> Result<f64> {
    match dataset.metric {
        MetricKind::Accuracy => {
            let mut hit = 0usize;
            for (&gi, row) in indices.iter().zip(logits) {
                let Some(GraphLabel::Class(y)) = dataset.graphs[gi].graph_label() else {
                    return Err(Error::Schema("graph_label missing".into()));
                };
                if crate::encoder::argmax(row) == *y as usize {
                    hit += 1;
                }
            }
            Ok(hit as f64 / indices.len() as f64)
        }
        MetricKind::Mae | MetricKind::Rmse => {
            let mut total = 0.0;
            let mut count = 0usize;
            for (&gi, row) in indices.iter().zip(logits) {
                let Some(GraphLabel::Vector(t)) = dataset.graphs[gi].graph_label() else {
                    return Err(Error::Schema("graph_label missing".into()));
                };
                for (p, tv) in row.iter().zip(t) {
                    if tv.is_finite() {
                        let d = p - tv;
                        total += if dataset.metric == MetricKind::Mae {
                            d.abs()
                        } else {
                            d * d
                        };
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(Error::EmptySplit("no observed targets".into()));
            }
            let mean = total / count as f64;
            Ok(if dataset.metric == MetricKind::Rmse {
                mean.sqrt()
            } else {
                mean
            })
        }
        MetricKind::RocAuc => match dataset.task {
            Task::GraphMultilabel => {
                let arity = dataset.num_classes_or_targets;
                let mut aucs = Vec::new();
                for label in 0..arity {
                    let mut scores = Vec::new();
                    let mut ls = Vec::new();
                    for (&gi, row) in indices.iter().zip(logits) {
                        let Some(GraphLabel::Vector(t)) = dataset.graphs[gi].graph_label()
                        else {
                            continue;
                        };
                        if t[label].is_finite() {
                            scores.push(row[label]);
                            ls.push(t[label] > 0.5);
                        }
                    }
                    if let Ok(auc) = roc_auc(&scores, &ls) {
                        aucs.push(auc);
                    }
                }
                if aucs.is_empty() {
                    return Err(Error::Config(
                        "roc-auc undefined for every label in split".into(),
                    ));
                }
                Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
            }
            _ => {
                let mut scores = Vec::new();
                let mut ls = Vec::new();
                for (&gi, row) in indices.iter().zip(logits) {
                    let Some(GraphLabel::Class(y)) = dataset.graphs[gi].graph_label() else {
                        return Err(Error::Schema("graph_label missing".into()));
                    };
                    scores.push(binary_score(row));
                    ls.push(*y == 1);
                }
                roc_auc(&scores, &ls)
            }
        },
    }
}

/// Mean training-objective loss over a split, one projection draw per graph.
pub fn mean_loss(
    cfg: &EncoderConfig,
    params: &EncoderParams,
    head: &TaskHead,
    dataset: &Dataset,
    split: Split,
    ps: &mut ProjectionState,
) -> Result<f64> {
    let spec = LossSpec::for_task(dataset.task);
    match dataset.task {
        Task::NodeClassification => {
            let g = &dataset.graphs[0];
            let logits = graph_logits(g, ps, cfg, params, head, None, 1)?;
            let target = Target::for_graph(dataset, g, split)?;
            Ok(loss_and_grad(&logits, &target, spec)?.0)
        }
        _ => {
            let indices = dataset.graph_split(split);
            if indices.is_empty() {
                return Err(Error::EmptySplit(format!(
                    "{} has no {} graphs",
                    dataset.name,
                    split.name()
                )));
            }
            let mut total = 0.0;
            for &gi in &indices {
                let g = &dataset.graphs[gi];
                let logits = graph_logits(g, ps, cfg, params, head, None, 1)?;
                let target = Target::for_graph(dataset, g, split)?;
                total += loss_and_grad(&logits, &target, spec)?.0;
            }
            Ok(total / indices.len() as f64)
        }
    }
}

// --- pretraining ------------------------------------------------------------------

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

fn projection_state_for(
    ds: &Dataset,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    scope_prefix: &str,
) -> Result<ProjectionState> {
    let edge_dim = if enc_cfg.use_edge_ops {
        ds.edge_feature_dim()
    } else {
        None
    };
    ProjectionState::new(
        cfg.seed,
        &format!("{scope_prefix}{}", ds.name),
        ds.node_feature_dim(),
        edge_dim,
        enc_cfg.projection_dim,
        cfg.projection_mode,
        cfg.refresh_interval,
    )
}

fn train_batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle: &mut SeedStream,
) -> Vec<Vec<usize>> {
    if ds.task.is_node_level() {
        return vec![vec![0]];
    }
    let mut idx = ds.graph_split(Split::Train);
    shuffle.shuffle(&mut idx);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn record_metrics(
    out: &mut Vec<MetricRecord>,
    epoch: usize,
    ds: &Dataset,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    head: &TaskHead,
    ps: &mut ProjectionState,
    draws: usize,
) -> Result<()> {
    if let Ok(loss) = mean_loss(cfg, params, head, ds, Split::Train, ps) {
        out.push(MetricRecord {
            epoch,
            dataset: ds.name.clone(),
            split: "train".into(),
            metric: "loss".into(),
            value: loss,
        });
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        match evaluate(cfg, params, head, ds, split, ps, draws) {
            Ok(value) => out.push(MetricRecord {
                epoch,
                dataset: ds.name.clone(),
                split: split.name().into(),
                metric: ds.metric.name().into(),
                value,
            }),
            Err(Error::EmptySplit(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Round-robin multitask pretraining: one shared encoder, one head per
/// dataset. `on_epoch` runs after each epoch's metrics (checkpoint cadence
/// lives with the caller). Epoch 0 metrics describe the initialization.
pub fn pretrain(
    datasets: &[Dataset],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(usize, &Checkpoint) -> Result<()>>,
) -> Result<PretrainOutput> {
    if datasets.is_empty() {
        return Err(Error::Config("pretrain: at least one dataset required".into()));
    }
    enc_cfg.validate()?;
    cfg.validate()?;
    {
        let mut names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != datasets.len() {
            return Err(Error::Config("pretrain: dataset names must be unique".into()));
        }
    }

    let mut init_stream = SeedStream::new(cfg.seed, "init");
    let mut params = EncoderParams::init(enc_cfg, &mut init_stream)?;
    let out_w = enc_cfg.output_width();
    let mut heads: BTreeMap<String, TaskHead> = BTreeMap::new();
    for ds in datasets {
        let mut hs = init_stream.derive(&format!("head/{}", ds.name));
        heads.insert(
            ds.name.clone(),
            TaskHead::init(cfg.head, ds.task, out_w, ds.num_classes_or_targets, &mut hs),
        );
    }

    let mut states: Vec<ProjectionState> = datasets
        .iter()
        .map(|ds| projection_state_for(ds, enc_cfg, cfg, ""))
        .collect::<Result<_>>()?;
    let mut shufflers: Vec<SeedStream> = datasets
        .iter()
        .map(|ds| SeedStream::new(cfg.seed, &format!("shuffle/{}", ds.name)))
        .collect();
    // structural encodings are projection-independent; compute once
    let rwse_cache: Vec<Vec<Matrix>> = datasets
        .iter()
        .map(|ds| {
            ds.graphs
                .iter()
                .map(|g| crate::encoder::rwse(g, enc_cfg.structural_dim))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut enc_adam = AdamState::new(slice_total(&encoder_grad_slices(
        &EncoderGrads::zeros_like(&params),
    )));
    let mut head_adams: BTreeMap<String, AdamState> = heads
        .iter()
        .map(|(name, head)| {
            (
                name.clone(),
                AdamState::new(slice_total(&head_grad_slices(&HeadGrads::zeros_like(head)))),
            )
        })
        .collect();

    let mut metrics = Vec::new();
    let mut step: u64 = 0;
    for (di, ds) in datasets.iter().enumerate() {
        record_metrics(
            &mut metrics,
            0,
            ds,
            enc_cfg,
            &params,
            &heads[&ds.name],
            &mut states[di],
            cfg.eval_avg_draws,
        )?;
    }

    for epoch in 1..=cfg.epochs {
        for (di, ds) in datasets.iter().enumerate() {
            let spec = LossSpec::for_task(ds.task);
            let head_name = ds.name.clone();
            let batches = train_batches(ds, cfg.batch_size, &mut shufflers[di]);
            for mut batch in batches {
                batch.sort_unstable();
                let head = heads.get_mut(&head_name).expect("head exists");
                let mut enc_acc = EncoderGrads::zeros_like(&params);
                let mut head_acc = HeadGrads::zeros_like(head);
                for &gi in &batch {
                    let g = &ds.graphs[gi];
                    let (r0, r0_edge) = projected_inputs(&states[di], g, enc_cfg.use_edge_ops)?;
                    let target = Target::for_graph(ds, g, Split::Train)?;
                    let (_, tape) = forward_loss(
                        g,
                        &r0,
                        r0_edge.as_ref(),
                        Some(&rwse_cache[di][gi]),
                        enc_cfg,
                        &params,
                        head,
                        &target,
                        spec,
                        true,
                    )?;
                    let mg = backward(&tape, g, enc_cfg, &params, head)?;
                    enc_acc.add_assign(&mg.encoder)?;
                    head_acc.add_assign(&mg.head)?;
                    apply_batch_stat_updates(&mut params, &tape.fwd.layers);
                }
                states[di].advance();
                let scale = 1.0 / batch.len() as f64;
                enc_acc.scale(scale);
                head_acc.scale(scale);
                let hyper = cfg.adam(cfg.learning_rate);
                adam_step(
                    &mut encoder_param_slices(&mut params),
                    &encoder_grad_slices(&enc_acc),
                    &mut enc_adam,
                    &hyper,
                )?;
                adam_step(
                    &mut head_param_slices(head),
                    &head_grad_slices(&head_acc),
                    head_adams.get_mut(&head_name).expect("state exists"),
                    &hyper,
                )?;
                step += 1;
            }
        }
        for (di, ds) in datasets.iter().enumerate() {
            record_metrics(
                &mut metrics,
                epoch,
                ds,
                enc_cfg,
                &params,
                &heads[&ds.name],
                &mut states[di],
                cfg.eval_avg_draws,
            )?;
        }
        if let Some(cb) = on_epoch.as_deref_mut() {
            let snapshot = Checkpoint {
                config: enc_cfg.clone(),
                params: params.clone(),
                heads: heads.clone(),
                master_seed: cfg.seed,
                step,
            };
            cb(epoch, &snapshot)?;
        }
    }

    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            config: enc_cfg.clone(),
            params,
            heads,
            master_seed: cfg.seed,
            step,
        },
        metrics,
    })
}

// --- transfer ----------------------------------------------------------------------

pub struct TransferOutcome {
    pub head: TaskHead,
    pub val_metric: Option<f64>,
    pub test_metric: f64,
    pub metrics: Vec<MetricRecord>,
    pub encoder_hash: u64,
}

/// Frozen-encoder transfer: a fresh projection state for the target's
/// feature dimension, a fresh head trained on the target train split, and a
/// bit-identical encoder before and after.
pub fn transfer(
    ckpt: &Checkpoint,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let enc_cfg = &ckpt.config;
    let params = &ckpt.params;
    let hash_before = params.hash64();

    let mut ps = projection_state_for(target, enc_cfg, cfg, "transfer/")?;
    let mut head_stream = SeedStream::new(cfg.seed, &format!("transfer/head/{}", target.name));
    let mut head = TaskHead::init(
        cfg.head,
        target.task,
        enc_cfg.output_width(),
        target.num_classes_or_targets,
        &mut head_stream,
    );
    let mut head_adam = AdamState::new(slice_total(&head_grad_slices(&HeadGrads::zeros_like(
        &head,
    ))));
    let mut shuffler = SeedStream::new(cfg.seed, &format!("transfer/shuffle/{}", target.name));
    let rwse_cache: Vec<Matrix> = target
        .graphs
        .iter()
        .map(|g| crate::encoder::rwse(g, enc_cfg.structural_dim))
        .collect::<Result<_>>()?;
    let spec = LossSpec::for_task(target.task);

    let mut metrics = Vec::new();
    for epoch in 1..=cfg.epochs {
        for mut batch in train_batches(target, cfg.batch_size, &mut shuffler) {
            batch.sort_unstable();
            let mut head_acc = HeadGrads::zeros_like(&head);
            for &gi in &batch {
                let g = &target.graphs[gi];
                let (r0, r0_edge) = projected_inputs(&ps, g, enc_cfg.use_edge_ops)?;
                // encoder runs frozen, in evaluation mode: no gradients, no
                // statistic updates
                let (h_final, _) = crate::encoder::forward_from_projection(
                    g,
                    &r0,
                    r0_edge.as_ref(),
                    Some(&rwse_cache[gi]),
                    enc_cfg,
                    params,
                    false,
                )?;
                let embedding = if target.task.is_node_level() {
                    h_final
                } else {
                    Matrix::from_rows(&[crate::encoder::pool_graph(&h_final, enc_cfg.pool)?])?
                };
                let (pred, head_cache) = head.forward_cached(&embedding)?;
                let target_values = Target::for_graph(target, g, Split::Train)?;
                let (_, d_pred) = loss_and_grad(&pred, &target_values, spec)?;
                let (hg, _) = head_backward(&head, &head_cache, &d_pred)?;
                head_acc.add_assign(&hg)?;
            }
            ps.advance();
            head_acc.scale(1.0 / batch.len() as f64);
            let hyper = cfg.adam(cfg.head_learning_rate);
            adam_step(
                &mut head_param_slices(&mut head),
                &head_grad_slices(&head_acc),
                &mut head_adam,
                &hyper,
            )?;
        }
        record_metrics(
            &mut metrics,
            epoch,
            target,
            enc_cfg,
            params,
            &head,
            &mut ps,
            cfg.eval_avg_draws,
        )?;
    }

    let val_metric = match evaluate(
        enc_cfg,
        params,
        &head,
        target,
        Split::Val,
        &mut ps,
        cfg.eval_avg_draws,
    ) {
        Ok(v) => Some(v),
        Err(Error::EmptySplit(_)) => None,
        Err(e) => return Err(e),
    };
    let test_metric = evaluate(
        enc_cfg,
        params,
        &head,
        target,
        Split::Test,
        &mut ps,
        cfg.eval_avg_draws,
    )?;

    let hash_after = params.hash64();
    assert_eq!(
        hash_before, hash_after,
        "frozen encoder parameters changed during transfer"
    );
    Ok(TransferOutcome {
        head,
        val_metric,
        test_metric,
        metrics,
        encoder_hash: hash_after,
    })
}
