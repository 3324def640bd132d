//! Losses with mean reduction and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, GraphLabel, Split, Task};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "cross-entropy")]
    CrossEntropy,
    #[serde(rename = "mse")]
    Mse,
    /// Metric-only; has no gradient.
    #[serde(rename = "mae-eval-only")]
    MaeEvalOnly,
    #[serde(rename = "bce-multilabel")]
    BceMultilabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
}

impl LossSpec {
    /// The loss matching a dataset's task kind.
    pub fn for_task(task: Task) -> Self {
        let kind = match task {
            Task::NodeClassification | Task::GraphClassification => LossKind::CrossEntropy,
            Task::GraphRegression => LossKind::Mse,
            Task::GraphMultilabel => LossKind::BceMultilabel,
        };
        Self { kind }
    }
}

/// Training target for one prediction matrix.
#[derive(Debug, Clone)]
pub enum Target {
    /// One class index per prediction row; rows with `mask == false`
    /// contribute nothing.
    Classes {
        labels: Vec<usize>,
        mask: Option<Vec<bool>>,
    },
    /// Same shape as the predictions. NaN entries mark missing labels and
    /// are masked out (multi-label datasets).
    Values(Matrix),
}

impl Target {
    /// Builds the target for a graph under a dataset's task. Node-level
    /// targets restrict to the given split mask.
    pub fn for_graph(dataset: &Dataset, g: &Graph, split: Split) -> Result<Target> {
        match dataset.task {
            Task::NodeClassification => {
                let labels = g
                    .node_labels()
                    .ok_or_else(|| Error::Schema("node_labels missing".into()))?
                    .iter()
                    .map(|&y| y as usize)
                    .collect();
                let mask = g
                    .masks()
                    .ok_or_else(|| Error::Schema("masks missing".into()))?
                    .get(split)
                    .to_vec();
                Ok(Target::Classes {
                    labels,
                    mask: Some(mask),
                })
            }
            Task::GraphClassification => match g.graph_label() {
                Some(GraphLabel::Class(y)) => Ok(Target::Classes {
                    labels: vec![*y as usize],
                    mask: None,
                }),
                _ => Err(Error::Schema("graph_label missing".into())),
            },
            Task::GraphRegression | Task::GraphMultilabel => match g.graph_label() {
                Some(GraphLabel::Vector(v)) => {
                    Ok(Target::Values(Matrix::from_rows(&[v.clone()])?))
                }
                _ => Err(Error::Schema("graph_label missing".into())),
            },
        }
    }
}

/// Loss value and gradient with respect to the predictions.
pub fn loss_and_grad(pred: &Matrix, target: &Target, spec: LossSpec) -> Result<(f64, Matrix)> {
    match spec.kind {
        LossKind::CrossEntropy => cross_entropy(pred, target),
        LossKind::Mse => mse(pred, target),
        LossKind::BceMultilabel => bce_masked(pred, target),
        LossKind::MaeEvalOnly => Err(Error::Config(
            "mae is an evaluation metric, not a training loss".into(),
        )),
    }
}

pub fn loss_value(pred: &Matrix, target: &Target, spec: LossSpec) -> Result<f64> {
    match spec.kind {
        LossKind::MaeEvalOnly => {
            let Target::Values(t) = target else {
                return Err(Error::Config("mae expects value targets".into()));
            };
            check_same_shape(pred, t)?;
            let n = (pred.rows() * pred.cols()) as f64;
            let sum: f64 = pred
                .data()
                .iter()
                .zip(t.data())
                .map(|(p, t)| (p - t).abs())
                .sum();
            Ok(sum / n)
        }
        _ => Ok(loss_and_grad(pred, target, spec)?.0),
    }
}

fn check_same_shape(pred: &Matrix, t: &Matrix) -> Result<()> {
    if pred.rows() != t.rows() || pred.cols() != t.cols() {
        return Err(Error::Dimension(format!(
            "loss: prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            t.rows(),
            t.cols()
        )));
    }
    Ok(())
}

/// Row-wise softmax cross-entropy with log-sum-exp stabilization.
fn cross_entropy(pred: &Matrix, target: &Target) -> Result<(f64, Matrix)> {
    let Target::Classes { labels, mask } = target else {
        return Err(Error::Config("cross-entropy expects class targets".into()));
    };
    if labels.len() != pred.rows() {
        return Err(Error::Dimension(format!(
            "cross-entropy: {} labels for {} rows",
            labels.len(),
            pred.rows()
        )));
    }
    let k = pred.cols();
    let active: Vec<usize> = (0..pred.rows())
        .filter(|&i| mask.as_ref().map_or(true, |m| m[i]))
        .collect();
    let mut grad = Matrix::zeros(pred.rows(), k);
    if active.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / active.len() as f64;
    let mut total = 0.0;
    for &i in &active {
        let y = labels[i];
        if y >= k {
            return Err(Error::Dimension(format!(
                "cross-entropy: class {y} outside [0,{k})"
            )));
        }
        let row = pred.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        total += lse - row[y];
        for j in 0..k {
            let p = (row[j] - m).exp() / sum_exp;
            let delta = if j == y { 1.0 } else { 0.0 };
            grad.set(i, j, (p - delta) * scale);
        }
    }
    Ok((total * scale, grad))
}

fn mse(pred: &Matrix, target: &Target) -> Result<(f64, Matrix)> {
    let Target::Values(t) = target else {
        return Err(Error::Config("mse expects value targets".into()));
    };
    check_same_shape(pred, t)?;
    let n = (pred.rows() * pred.cols()) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for (idx, (p, tv)) in pred.data().iter().zip(t.data()).enumerate() {
        let d = p - tv;
        total += d * d;
        grad.data_mut()[idx] = 2.0 * d / n;
    }
    Ok((total / n, grad))
}

/// Elementwise sigmoid cross-entropy; NaN targets are masked out and the
/// mean runs over the observed entries. All-masked targets contribute zero.
fn bce_masked(pred: &Matrix, target: &Target) -> Result<(f64, Matrix)> {
    let Target::Values(t) = target else {
        return Err(Error::Config("bce expects value targets".into()));
    };
    check_same_shape(pred, t)?;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let observed = t.data().iter().filter(|v| v.is_finite()).count();
    if observed == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / observed as f64;
    let mut total = 0.0;
    for (idx, (&x, &y)) in pred.data().iter().zip(t.data()).enumerate() {
        if !y.is_finite() {
            continue;
        }
        // max(x,0) - x*y + ln(1 + exp(-|x|))
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        let sigma = 1.0 / (1.0 + (-x).exp());
        grad.data_mut()[idx] = (sigma - y) * scale;
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_logits() {
        let pred = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let target = Target::Classes {
            labels: vec![0],
            mask: None,
        };
        let (loss, grad) = loss_and_grad(
            &pred,
            &target,
            LossSpec {
                kind: LossKind::CrossEntropy,
            },
        )
        .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad.get(0, 0) - (-0.5)).abs() < 1e-12);
        assert!((grad.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mse_hand_example() {
        let pred = Matrix::from_rows(&[vec![3.0]]).unwrap();
        let t = Target::Values(Matrix::from_rows(&[vec![1.0]]).unwrap());
        let (loss, grad) =
            loss_and_grad(&pred, &t, LossSpec { kind: LossKind::Mse }).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(grad.get(0, 0), 4.0);
    }

    #[test]
    fn bce_logit_zero_target_one() {
        let pred = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let t = Target::Values(Matrix::from_rows(&[vec![1.0]]).unwrap());
        let (loss, grad) = loss_and_grad(
            &pred,
            &t,
            LossSpec {
                kind: LossKind::BceMultilabel,
            },
        )
        .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad.get(0, 0) - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn bce_all_nan_is_zero() {
        let pred = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let t = Target::Values(Matrix::from_rows(&[vec![f64::NAN, f64::NAN]]).unwrap());
        let (loss, grad) = loss_and_grad(
            &pred,
            &t,
            LossSpec {
                kind: LossKind::BceMultilabel,
            },
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let pred = Matrix::from_rows(&[vec![5.0, -5.0], vec![0.0, 0.0]]).unwrap();
        let target = Target::Classes {
            labels: vec![1, 0],
            mask: Some(vec![false, true]),
        };
        let (loss, grad) = loss_and_grad(
            &pred,
            &target,
            LossSpec {
                kind: LossKind::CrossEntropy,
            },
        )
        .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn all_masked_is_zero_contribution() {
        let pred = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let target = Target::Classes {
            labels: vec![0],
            mask: Some(vec![false]),
        };
        let (loss, grad) = loss_and_grad(
            &pred,
            &target,
            LossSpec {
                kind: LossKind::CrossEntropy,
            },
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn arity_mismatch_rejected() {
        let pred = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let t = Target::Values(Matrix::from_rows(&[vec![1.0]]).unwrap());
        assert!(loss_and_grad(&pred, &t, LossSpec { kind: LossKind::Mse }).is_err());
    }

    #[test]
    fn mae_is_eval_only() {
        let pred = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let t = Target::Values(Matrix::from_rows(&[vec![1.0]]).unwrap());
        assert!(loss_and_grad(
            &pred,
            &t,
            LossSpec {
                kind: LossKind::MaeEvalOnly
            }
        )
        .is_err());
        let v = loss_value(
            &pred,
            &t,
            LossSpec {
                kind: LossKind::MaeEvalOnly,
            },
        )
        .unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn zero_loss_zero_gradient() {
        let pred = Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap();
        let t = Target::Values(pred.clone());
        let (loss, grad) =
            loss_and_grad(&pred, &t, LossSpec { kind: LossKind::Mse }).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
    }
}
