//! Exact reverse-mode gradients through the encoder, pooling, head, and
//! loss.
//!
//! The tape records the forward intermediates of one evaluation; backward
//! replays them in reverse. The projection C is data, not a parameter: no
//! gradient flows into it or through the operator construction. Operators
//! enter the backward pass only through their transpose application, which
//! coincides with forward application for every symmetric operator.

use crate::encoder::{
    pool_graph, EncoderConfig, EncoderParams, ForwardCache, HeadCache, LayerCache, Norm, Pool,
    TaskHead,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{loss_and_grad, LossSpec, Target};
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub layers: Vec<LayerGrads>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: l
                    .weights
                    .iter()
                    .map(|w| Matrix::zeros(w.rows(), w.cols()))
                    .collect(),
                biases: l.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
                gamma: l.norm.as_ref().map(|n| vec![0.0; n.gamma.len()]),
                beta: l.norm.as_ref().map(|n| vec![0.0; n.beta.len()]),
            })
            .collect();
        Self { layers }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (wa, wb) in a.weights.iter_mut().zip(&b.weights) {
                wa.add_assign(wb)?;
            }
            for (ba, bb) in a.biases.iter_mut().zip(&b.biases) {
                for (x, y) in ba.iter_mut().zip(bb) {
                    *x += y;
                }
            }
            if let (Some(ga), Some(gb)) = (a.gamma.as_mut(), b.gamma.as_ref()) {
                for (x, y) in ga.iter_mut().zip(gb) {
                    *x += y;
                }
            }
            if let (Some(ba), Some(bb)) = (a.beta.as_mut(), b.beta.as_ref()) {
                for (x, y) in ba.iter_mut().zip(bb) {
                    *x += y;
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for w in &mut l.weights {
                w.scale(s);
            }
            for b in &mut l.biases {
                b.iter_mut().for_each(|v| *v *= s);
            }
            if let Some(g) = l.gamma.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
            if let Some(b) = l.beta.as_mut() {
                b.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Option<Matrix>,
    pub b2: Option<Vec<f64>>,
}

impl HeadGrads {
    pub fn zeros_like(head: &TaskHead) -> Self {
        Self {
            w1: Matrix::zeros(head.w1.rows(), head.w1.cols()),
            b1: vec![0.0; head.b1.len()],
            w2: head
                .w2
                .as_ref()
                .map(|w| Matrix::zeros(w.rows(), w.cols())),
            b2: head.b2.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn add_assign(&mut self, other: &HeadGrads) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        for (x, y) in self.b1.iter_mut().zip(&other.b1) {
            *x += y;
        }
        if let (Some(a), Some(b)) = (self.w2.as_mut(), other.w2.as_ref()) {
            a.add_assign(b)?;
        }
        if let (Some(a), Some(b)) = (self.b2.as_mut(), other.b2.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.scale(s);
        self.b1.iter_mut().for_each(|v| *v *= s);
        if let Some(w) = self.w2.as_mut() {
            w.scale(s);
        }
        if let Some(b) = self.b2.as_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub head: HeadGrads,
}

/// Recorded intermediates of one forward + loss evaluation.
#[derive(Debug, Clone)]
pub struct GradTape {
    pub loss: f64,
    pub fwd: ForwardCache,
    head_cache: HeadCache,
    d_pred: Matrix,
    graph_level: bool,
    pool: Pool,
}

/// Runs the model on an already-drawn projection and records the tape.
/// `graph_level` pools before the head; node-level applies the head per node.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss(
    g: &Graph,
    r0: &Matrix,
    r0_edge: Option<&Matrix>,
    s: Option<&Matrix>,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    head: &TaskHead,
    target: &Target,
    spec: LossSpec,
    training: bool,
) -> Result<(f64, GradTape)> {
    let (h_final, fwd) =
        crate::encoder::forward_from_projection(g, r0, r0_edge, s, cfg, params, training)?;
    let graph_level = !head.task.is_node_level();
    let embedding = if graph_level {
        Matrix::from_rows(&[pool_graph(&h_final, cfg.pool)?])?
    } else {
        h_final
    };
    let (pred, head_cache) = head.forward_cached(&embedding)?;
    let (loss, d_pred) = loss_and_grad(&pred, target, spec)?;
    Ok((
        loss,
        GradTape {
            loss,
            fwd,
            head_cache,
            d_pred,
            graph_level,
            pool: cfg.pool,
        },
    ))
}

/// Head-only backward; returns gradients and the gradient at the head input.
pub fn head_backward(
    head: &TaskHead,
    cache: &HeadCache,
    d_pred: &Matrix,
) -> Result<(HeadGrads, Matrix)> {
    match (&head.w2, &cache.hidden) {
        (Some(w2), Some(hidden)) => {
            let dw2 = hidden.at_mul(d_pred)?;
            let db2 = col_sums(d_pred);
            let mut d_hidden = d_pred.mul_bt(w2)?;
            for (v, &h) in d_hidden.data_mut().iter_mut().zip(hidden.data()) {
                if h <= 0.0 {
                    *v = 0.0;
                }
            }
            let dw1 = cache.input.at_mul(&d_hidden)?;
            let db1 = col_sums(&d_hidden);
            let d_input = d_hidden.mul_bt(&head.w1)?;
            Ok((
                HeadGrads {
                    w1: dw1,
                    b1: db1,
                    w2: Some(dw2),
                    b2: Some(db2),
                },
                d_input,
            ))
        }
        _ => {
            let dw1 = cache.input.at_mul(d_pred)?;
            let db1 = col_sums(d_pred);
            let d_input = d_pred.mul_bt(&head.w1)?;
            Ok((
                HeadGrads {
                    w1: dw1,
                    b1: db1,
                    w2: None,
                    b2: None,
                },
                d_input,
            ))
        }
    }
}

/// Full backward pass over the tape.
pub fn backward(
    tape: &GradTape,
    g: &Graph,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    head: &TaskHead,
) -> Result<ModelGrads> {
    let (head_grads, d_embedding) = head_backward(head, &tape.head_cache, &tape.d_pred)?;
    let h_final = tape.fwd.h_final();
    let n = h_final.rows();
    let d_h_final = if tape.graph_level {
        let mut d = Matrix::zeros(n, h_final.cols());
        let scale = match tape.pool {
            Pool::Mean => 1.0 / n as f64,
            Pool::Sum => 1.0,
        };
        for i in 0..n {
            for (dv, &de) in d.row_mut(i).iter_mut().zip(d_embedding.row(0)) {
                *dv = de * scale;
            }
        }
        d
    } else {
        d_embedding
    };
    let encoder = encoder_backward(&tape.fwd, d_h_final, g, cfg, params)?;
    Ok(ModelGrads {
        encoder,
        head: head_grads,
    })
}

/// Backward through the layer stack given the gradient at H⁽ᴸ⁾.
pub fn encoder_backward(
    fwd: &ForwardCache,
    d_h_final: Matrix,
    g: &Graph,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<EncoderGrads> {
    let mut grads = EncoderGrads::zeros_like(params);
    let mut d_out = d_h_final;
    for l in (0..params.layers.len()).rev() {
        let cache = &fwd.layers[l];
        let layer = &params.layers[l];
        let (layer_grads, d_h_in) =
            layer_backward(cache, layer, &fwd.ops, g, cfg.norm, &d_out)?;
        grads.layers[l] = layer_grads;
        d_out = d_h_in;
    }
    Ok(grads)
}

fn layer_backward(
    cache: &LayerCache,
    layer: &crate::encoder::LayerParams,
    ops: &crate::operators::OperatorSet,
    g: &Graph,
    norm: Norm,
    d_out: &Matrix,
) -> Result<(LayerGrads, Matrix)> {
    let n = d_out.rows();
    let w = d_out.cols();
    // ReLU: gradient passes where the activation is strictly positive
    let mut d_y = d_out.clone();
    for (v, &o) in d_y.data_mut().iter_mut().zip(cache.output.data()) {
        if o <= 0.0 {
            *v = 0.0;
        }
    }
    let (d_z, d_gamma, d_beta) = norm_backward(cache, layer, norm, &d_y)?;
    let sub = w / ops.len();
    let mut weights = Vec::with_capacity(ops.len());
    let mut biases = Vec::with_capacity(ops.len());
    let h_in_cols = cache.op_inputs[0].cols();
    let mut d_h_in = Matrix::zeros(n, h_in_cols);
    for (o, op) in ops.ops().iter().enumerate() {
        let mut d_z_o = Matrix::zeros(n, sub);
        for i in 0..n {
            d_z_o
                .row_mut(i)
                .copy_from_slice(&d_z.row(i)[o * sub..(o + 1) * sub]);
        }
        weights.push(cache.op_inputs[o].at_mul(&d_z_o)?);
        biases.push(col_sums(&d_z_o));
        let d_p = d_z_o.mul_bt(&layer.weights[o])?;
        d_h_in.add_assign(&op.apply_transpose(g, &d_p)?)?;
    }
    let (d_gamma, d_beta) = match norm {
        Norm::None => (None, None),
        _ => (Some(d_gamma), Some(d_beta)),
    };
    Ok((
        LayerGrads {
            weights,
            biases,
            gamma: d_gamma,
            beta: d_beta,
        },
        d_h_in,
    ))
}

fn norm_backward(
    cache: &LayerCache,
    layer: &crate::encoder::LayerParams,
    norm: Norm,
    d_y: &Matrix,
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let n = d_y.rows();
    let w = d_y.cols();
    match norm {
        Norm::None => Ok((d_y.clone(), Vec::new(), Vec::new())),
        Norm::Layer => {
            let np = layer
                .norm
                .as_ref()
                .ok_or_else(|| Error::Config("norm params missing".into()))?;
            let zhat = cache
                .normalized
                .as_ref()
                .ok_or_else(|| Error::Config("tape missing normalized values".into()))?;
            let mut d_gamma = vec![0.0; w];
            let mut d_beta = vec![0.0; w];
            let mut d_z = Matrix::zeros(n, w);
            for i in 0..n {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..w {
                    let dy = d_y.get(i, j);
                    let zh = zhat.get(i, j);
                    d_beta[j] += dy;
                    d_gamma[j] += dy * zh;
                    let dzh = dy * np.gamma[j];
                    m1 += dzh;
                    m2 += dzh * zh;
                }
                m1 /= w as f64;
                m2 /= w as f64;
                let istd = cache.inv_std[i];
                for j in 0..w {
                    let dzh = d_y.get(i, j) * np.gamma[j];
                    let zh = zhat.get(i, j);
                    d_z.set(i, j, istd * (dzh - m1 - zh * m2));
                }
            }
            Ok((d_z, d_gamma, d_beta))
        }
        Norm::Batch => {
            let np = layer
                .norm
                .as_ref()
                .ok_or_else(|| Error::Config("norm params missing".into()))?;
            let zhat = cache
                .normalized
                .as_ref()
                .ok_or_else(|| Error::Config("tape missing normalized values".into()))?;
            if cache.batch_stats.is_none() {
                return Err(Error::Config(
                    "batch-norm backward requires a training-mode tape".into(),
                ));
            }
            let mut d_gamma = vec![0.0; w];
            let mut d_beta = vec![0.0; w];
            let mut d_z = Matrix::zeros(n, w);
            for j in 0..w {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for i in 0..n {
                    let dy = d_y.get(i, j);
                    let zh = zhat.get(i, j);
                    d_beta[j] += dy;
                    d_gamma[j] += dy * zh;
                    let dzh = dy * np.gamma[j];
                    m1 += dzh;
                    m2 += dzh * zh;
                }
                m1 /= n as f64;
                m2 /= n as f64;
                let istd = cache.inv_std[j];
                for i in 0..n {
                    let dzh = d_y.get(i, j) * np.gamma[j];
                    let zh = zhat.get(i, j);
                    d_z.set(i, j, istd * (dzh - m1 - zh * m2));
                }
            }
            Ok((d_z, d_gamma, d_beta))
        }
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}
