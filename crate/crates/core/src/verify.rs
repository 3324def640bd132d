//! Executable verification of the method's guarantees.
//!
//! Each check is deterministic given its seed and carries a paired negative
//! control that must fail, guarding against vacuous tests. Distributional
//! claims are operationalized as two-moment tests: entrywise means and
//! variances estimated from T samples must agree within 4 standard errors
//! for at least 95% of entries. This is a test-power choice, not a claim
//! that two moments characterize the distributions; the negative controls
//! are what anchor it.
//!
//! Wall time is reported in the human-readable table but excluded from the
//! serialized reports so that re-runs with one seed are byte-identical.

use serde::Serialize;

use crate::encoder::{
    forward_from_projection, EncoderConfig, EncoderParams, HeadKind, Norm, TaskHead,
};
use crate::error::{Error, Result};
use crate::grad::{backward, forward_loss};
use crate::graph::{Graph, GraphLabel, Task};
use crate::loss::{loss_and_grad, LossKind, LossSpec, Target};
use crate::matrix::Matrix;
use crate::operators::{expected_cov, make_factored, node_cov_dense, Operator};
use crate::rng::{gaussian_matrix, random_orthogonal, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CheckStatus {
    #[serde(rename = "passed")]
    Passed,
    #[serde(rename = "failed")]
    Failed,
    /// Degenerate input made the check trivially true; flagged, not failed.
    #[serde(rename = "vacuous-pass")]
    VacuousPass,
    /// The check's hypothesis is unmet (e.g. a nonconvex head for the
    /// convexity bound); not counted as a failure.
    #[serde(rename = "not-applicable")]
    NotApplicable,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check_name: String,
    pub status: CheckStatus,
    pub passed: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub trials: u64,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl CheckReport {
    fn new(
        name: &str,
        status: CheckStatus,
        statistic: f64,
        threshold: f64,
        trials: u64,
        seed: u64,
    ) -> Self {
        Self {
            check_name: name.to_string(),
            status,
            passed: status != CheckStatus::Failed,
            statistic,
            threshold,
            trials,
            seed,
            wall_time_s: 0.0,
        }
    }
}

/// The 3-node witness features whose deterministic covariance makes the
/// nodes mutually automorphic while the stochastic operator separates them.
pub fn witness_features() -> Matrix {
    Matrix::from_rows(&[
        vec![1.0, 0.0, 1.0],
        vec![0.0, 1.0, 1.0],
        vec![1.0, 1.0, 0.0],
    ])
    .expect("static fixture")
}

/// Fixed 6-node fixture graph used by the propagated-operator and hidden
/// representation checks.
fn bundled_graph() -> Graph {
    let mut stream = SeedStream::new(0x42, "fixture/bundled-graph");
    let n = 6;
    let d = 5;
    let x = gaussian_matrix(n, d, &mut stream).unwrap();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if stream.next_f64() < 0.45 {
                edges.push((u, v));
            }
        }
    }
    edges.push((0, 1)); // guarantee at least one edge regardless of draws
    let edges = {
        let mut dedup = std::collections::BTreeSet::new();
        edges.retain(|&(u, v)| dedup.insert((u.min(v), u.max(v))));
        edges
    };
    Graph::new(n, false, edges, x, None, None, Some(GraphLabel::Class(0)), None).unwrap()
}

// --- projection samplers (negative controls replace the isotropic draw) ------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProjectionSampler {
    Isotropic,
    /// Row i of C scaled by (1+i): non-isotropic across features, breaking
    /// permutation invariance.
    PerFeatureScales,
    /// Deterministic feature-index-dependent matrix; no randomness at all.
    DeterministicRamp,
}

fn draw_c(sampler: ProjectionSampler, d: usize, h: usize, stream: &mut SeedStream) -> Matrix {
    match sampler {
        ProjectionSampler::Isotropic => gaussian_matrix(d, h, stream).unwrap(),
        ProjectionSampler::PerFeatureScales => {
            let mut c = gaussian_matrix(d, h, stream).unwrap();
            for i in 0..d {
                let s = (1 + i) as f64;
                for v in c.row_mut(i) {
                    *v *= s;
                }
            }
            c
        }
        ProjectionSampler::DeterministicRamp => {
            let mut c = Matrix::zeros(d, h);
            for i in 0..d {
                for j in 0..h {
                    c.set(i, j, ((i + 1) as f64) * 0.3 + (j as f64) * 0.05);
                }
            }
            c
        }
    }
}

// --- two-moment machinery ------------------------------------------------------

struct MomentStats {
    s1: Vec<f64>,
    s2: Vec<f64>,
    s3: Vec<f64>,
    s4: Vec<f64>,
    t: u64,
}

impl MomentStats {
    fn new(len: usize) -> Self {
        Self {
            s1: vec![0.0; len],
            s2: vec![0.0; len],
            s3: vec![0.0; len],
            s4: vec![0.0; len],
            t: 0,
        }
    }

    fn add(&mut self, m: &Matrix) {
        debug_assert_eq!(m.data().len(), self.s1.len());
        self.t += 1;
        for (i, &x) in m.data().iter().enumerate() {
            let x2 = x * x;
            self.s1[i] += x;
            self.s2[i] += x2;
            self.s3[i] += x2 * x;
            self.s4[i] += x2 * x2;
        }
    }

    fn mean(&self, i: usize) -> f64 {
        self.s1[i] / self.t as f64
    }

    fn var(&self, i: usize) -> f64 {
        let t = self.t as f64;
        (self.s2[i] / t - self.mean(i).powi(2)).max(0.0)
    }

    /// Fourth central moment.
    fn mu4(&self, i: usize) -> f64 {
        let t = self.t as f64;
        let m = self.mean(i);
        (self.s4[i] / t - 4.0 * m * self.s3[i] / t + 6.0 * m * m * self.s2[i] / t
            - 3.0 * m.powi(4))
        .max(0.0)
    }
}

/// Fraction of entries whose means and variances agree within 4 SE between
/// the two sampled populations.
fn two_moment_agreement(a: &MomentStats, b: &MomentStats) -> f64 {
    let t = a.t as f64;
    let len = a.s1.len();
    let mut ok = 0usize;
    for i in 0..len {
        let se_mean = (a.var(i) / t + b.var(i) / t).sqrt();
        let mean_ok = if se_mean == 0.0 {
            a.mean(i) == b.mean(i)
        } else {
            (a.mean(i) - b.mean(i)).abs() <= 4.0 * se_mean
        };
        let var_a = a.var(i);
        let var_b = b.var(i);
        let se_var =
            ((a.mu4(i) - var_a * var_a).max(0.0) / t + (b.mu4(i) - var_b * var_b).max(0.0) / t)
                .sqrt();
        let var_ok = if se_var == 0.0 {
            var_a == var_b
        } else {
            (var_a - var_b).abs() <= 4.0 * se_var
        };
        if mean_ok && var_ok {
            ok += 1;
        }
    }
    ok as f64 / len as f64
}

/// One-sample version against known true means and second moments.
fn closed_form_agreement(stats: &MomentStats, true_mean: &[f64], true_m2: &[f64]) -> f64 {
    let t = stats.t as f64;
    let len = stats.s1.len();
    let mut ok = 0usize;
    for i in 0..len {
        let se_mean = (stats.var(i) / t).sqrt();
        let mean_ok = if se_mean == 0.0 {
            stats.mean(i) == true_mean[i]
        } else {
            (stats.mean(i) - true_mean[i]).abs() <= 4.0 * se_mean
        };
        let m2 = stats.s2[i] / t;
        let var_of_sq = (stats.mu4(i)
            + 4.0 * stats.mean(i)
                * (stats.s3[i] / t - stats.mean(i) * stats.s2[i] / t)
            - stats.var(i).powi(2))
        .max(stats.mu4(i))
        .max(0.0);
        // SE of the raw second moment: Var(x²)/t, estimated from the sample
        let raw_var_sq = (stats.s4[i] / t - m2 * m2).max(0.0);
        let se_m2 = (raw_var_sq / t).sqrt();
        let _ = var_of_sq;
        let m2_ok = if se_m2 == 0.0 {
            m2 == true_m2[i]
        } else {
            (m2 - true_m2[i]).abs() <= 4.0 * se_m2
        };
        if mean_ok && m2_ok {
            ok += 1;
        }
    }
    ok as f64 / len as f64
}

// --- permutation invariance (projected features and covariance operators) -----

fn perm_invariance_fraction(
    x: &Matrix,
    trials: u64,
    stream: &mut SeedStream,
    sampler: ProjectionSampler,
    force_reversal_perm: bool,
) -> f64 {
    let h = 16usize;
    let d = x.cols();
    let perm = if force_reversal_perm {
        (0..d).rev().collect::<Vec<_>>()
    } else {
        let mut p: Vec<usize> = (0..d).collect();
        stream.shuffle(&mut p);
        p
    };
    let mut p_mat = Matrix::zeros(d, d);
    for (from, &to) in perm.iter().enumerate() {
        p_mat.set(from, to, 1.0);
    }
    let xp = x.matmul(&p_mat).unwrap();

    // population stats over R⁰ and K⁰ for the given features
    let n = x.rows();
    let mut r_a = MomentStats::new(n * h);
    let mut r_b = MomentStats::new(n * h);
    let mut k_a = MomentStats::new(n * n);
    let mut k_b = MomentStats::new(n * n);
    for _ in 0..trials {
        let c = draw_c(sampler, d, h, stream);
        let r0 = x.matmul(&c).unwrap();
        k_a.add(&node_cov_dense(&r0).unwrap());
        r_a.add(&r0);
    }
    for _ in 0..trials {
        let c = draw_c(sampler, d, h, stream);
        let r0 = xp.matmul(&c).unwrap();
        k_b.add(&node_cov_dense(&r0).unwrap());
        r_b.add(&r0);
    }
    let mut frac = two_moment_agreement(&r_a, &r_b).min(two_moment_agreement(&k_a, &k_b));

    // closed form for the projected features under the isotropic draw:
    // E[R⁰] = 0 and E[(R⁰_ij)²] = ‖x_i‖²
    if sampler == ProjectionSampler::Isotropic {
        let mut true_mean = vec![0.0; n * h];
        let mut true_m2 = vec![0.0; n * h];
        for i in 0..n {
            let norm2: f64 = x.row(i).iter().map(|v| v * v).sum();
            for j in 0..h {
                true_m2[i * h + j] = norm2;
            }
        }
        true_mean.iter_mut().for_each(|v| *v = 0.0);
        frac = frac.min(closed_form_agreement(&r_a, &true_mean, &true_m2));
    }

    // propagated operators K⁰..K² on the bundled graph
    let g = bundled_graph();
    let xg = g.node_features().clone();
    let dg = xg.cols();
    let permg: Vec<usize> = if force_reversal_perm {
        (0..dg).rev().collect()
    } else {
        let mut p: Vec<usize> = (0..dg).collect();
        stream.shuffle(&mut p);
        p
    };
    let mut pg = Matrix::zeros(dg, dg);
    for (from, &to) in permg.iter().enumerate() {
        pg.set(from, to, 1.0);
    }
    let xgp = xg.matmul(&pg).unwrap();
    let ng = g.num_nodes();
    let mut ks_a: Vec<MomentStats> = (0..3).map(|_| MomentStats::new(ng * ng)).collect();
    let mut ks_b: Vec<MomentStats> = (0..3).map(|_| MomentStats::new(ng * ng)).collect();
    let run = |features: &Matrix, stats: &mut Vec<MomentStats>, stream: &mut SeedStream| {
        for _ in 0..trials {
            let c = draw_c(sampler, dg, h, stream);
            let mut r = features.matmul(&c).unwrap();
            for p in 0..3 {
                if p > 0 {
                    r = g.adjacency_apply(&r).unwrap();
                }
                stats[p].add(&node_cov_dense(&r).unwrap());
            }
        }
    };
    run(&xg, &mut ks_a, stream);
    run(&xgp, &mut ks_b, stream);
    for p in 0..3 {
        frac = frac.min(two_moment_agreement(&ks_a[p], &ks_b[p]));
    }
    frac
}

/// Distributional permutation invariance of R⁰ and K⁰..K², plus the closed
/// forms for the projected-feature moments.
pub fn check_perm_invariance(x: &Matrix, trials: u64, seed: u64) -> Result<CheckReport> {
    if trials < 1000 {
        return Err(Error::Config("perm check needs at least 1000 trials".into()));
    }
    let mut stream = SeedStream::new(seed, "check/perm");
    let frac = perm_invariance_fraction(x, trials, &mut stream, ProjectionSampler::Isotropic, false);
    let status = if frac >= 0.95 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(CheckReport::new("perm_invariance", status, frac, 0.95, trials, seed))
}

fn check_perm_invariance_negative(x: &Matrix, trials: u64, seed: u64) -> CheckReport {
    let mut stream = SeedStream::new(seed, "check/perm-negative");
    let frac = perm_invariance_fraction(
        x,
        trials,
        &mut stream,
        ProjectionSampler::PerFeatureScales,
        true,
    );
    // the control passes when the broken sampler is detected
    let status = if frac < 0.95 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    CheckReport::new(
        "perm_invariance/negative-control",
        status,
        frac,
        0.95,
        trials,
        seed,
    )
}

// --- orthogonal expectation -----------------------------------------------------

fn mc_mean_cov(
    x: &Matrix,
    h: usize,
    trials: u64,
    stream: &mut SeedStream,
    center: bool,
) -> Matrix {
    let n = x.rows();
    let mut acc = Matrix::zeros(n, n);
    for _ in 0..trials {
        let c = draw_c(ProjectionSampler::Isotropic, x.cols(), h, stream);
        let r0 = x.matmul(&c).unwrap();
        let k = if center {
            node_cov_dense(&r0).unwrap()
        } else {
            let mut k = r0.mul_bt(&r0).unwrap();
            k.scale(1.0 / h as f64);
            k
        };
        acc.add_assign(&k).unwrap();
    }
    acc.scale(1.0 / trials as f64);
    acc
}

fn orthogonal_statistic(
    x: &Matrix,
    trials: u64,
    stream: &mut SeedStream,
    center: bool,
    q: Option<&Matrix>,
) -> Result<f64> {
    let h = 64;
    let expected = expected_cov(x);
    let scale = expected.frobenius_norm();
    if scale == 0.0 {
        return Err(Error::Config("orthogonal check: centered features are zero".into()));
    }
    let q_owned;
    let q = match q {
        Some(q) => q,
        None => {
            q_owned = random_orthogonal(x.cols(), stream)?;
            &q_owned
        }
    };
    let plain = mc_mean_cov(x, h, trials, stream, center);
    let xq = x.matmul(q)?;
    let rotated = mc_mean_cov(&xq, h, trials, stream, center);
    let d1 = plain.sub(&expected)?.frobenius_norm() / scale;
    let d2 = rotated.sub(&expected)?.frobenius_norm() / scale;
    Ok(d1.max(d2))
}

/// Monte Carlo means of the stochastic covariance, with and without an
/// orthogonal basis change, against the exact expectation `Π_c X Xᵀ Π_c`.
pub fn check_orthogonal_expectation(x: &Matrix, trials: u64, seed: u64) -> Result<CheckReport> {
    let mut stream = SeedStream::new(seed, "check/ortho");
    if expected_cov(x).frobenius_norm() == 0.0 {
        return Ok(CheckReport::new(
            "orthogonal_expectation",
            CheckStatus::VacuousPass,
            0.0,
            0.05,
            trials,
            seed,
        ));
    }
    let stat = orthogonal_statistic(x, trials, &mut stream, true, None)?;
    let status = if stat <= 0.05 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(CheckReport::new(
        "orthogonal_expectation",
        status,
        stat,
        0.05,
        trials,
        seed,
    ))
}

fn check_orthogonal_negative(x: &Matrix, trials: u64, seed: u64) -> CheckReport {
    // skipping the centering shifts the expectation to X Xᵀ, which differs
    // from the centered Gram matrix for non-centered features
    let mut stream = SeedStream::new(seed, "check/ortho-negative");
    let stat = orthogonal_statistic(x, trials, &mut stream, false, None).unwrap_or(f64::INFINITY);
    let status = if stat > 0.05 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    CheckReport::new(
        "orthogonal_expectation/negative-control",
        status,
        stat,
        0.05,
        trials,
        seed,
    )
}

// --- consistency rate -------------------------------------------------------------

fn consistency_slope(
    x: &Matrix,
    h_list: &[usize],
    trials_per_h: u64,
    stream: &mut SeedStream,
    mis_scale: bool,
) -> Result<Option<f64>> {
    if h_list.len() < 2 {
        return Err(Error::Config(
            "consistency check needs at least two projection dimensions".into(),
        ));
    }
    let expected = expected_cov(x);
    let mut points = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let mut errs: Vec<f64> = (0..trials_per_h)
            .map(|_| {
                let c = draw_c(ProjectionSampler::Isotropic, x.cols(), h, stream);
                let r0 = x.matmul(&c).unwrap();
                let mut k = node_cov_dense(&r0).unwrap();
                if mis_scale {
                    k.scale(1.0 / (h as f64).sqrt());
                }
                k.sub(&expected).unwrap().frobenius_norm()
            })
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let median = if errs.len() % 2 == 1 {
            errs[errs.len() / 2]
        } else {
            0.5 * (errs[errs.len() / 2 - 1] + errs[errs.len() / 2])
        };
        if median == 0.0 {
            return Ok(None); // degenerate input: all errors exactly zero
        }
        points.push(((h as f64).ln(), median.ln()));
    }
    // least-squares slope
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    Ok(Some((n * sxy - sx * sy) / (n * sxx - sx * sx)))
}

/// Median Frobenius error versus projection dimension on log-log axes; the
/// least-squares slope must sit in [-0.6, -0.4].
pub fn check_consistency_slope(
    x: &Matrix,
    h_list: &[usize],
    trials_per_h: u64,
    seed: u64,
) -> Result<CheckReport> {
    let mut stream = SeedStream::new(seed, "check/consistency");
    let slope = consistency_slope(x, h_list, trials_per_h, &mut stream, false)?;
    let trials = trials_per_h * h_list.len() as u64;
    Ok(match slope {
        None => CheckReport::new(
            "consistency_slope",
            CheckStatus::VacuousPass,
            0.0,
            -0.5,
            trials,
            seed,
        ),
        Some(s) => {
            let status = if (-0.6..=-0.4).contains(&s) {
                CheckStatus::Passed
            } else {
                CheckStatus::Failed
            };
            CheckReport::new("consistency_slope", status, s, -0.5, trials, seed)
        }
    })
}

fn check_consistency_negative(
    x: &Matrix,
    h_list: &[usize],
    trials_per_h: u64,
    seed: u64,
) -> CheckReport {
    let mut stream = SeedStream::new(seed, "check/consistency-negative");
    let slope = consistency_slope(x, h_list, trials_per_h, &mut stream, true)
        .ok()
        .flatten();
    let trials = trials_per_h * h_list.len() as u64;
    let status = match slope {
        Some(s) if !(-0.6..=-0.4).contains(&s) => CheckStatus::Passed,
        _ => CheckStatus::Failed,
    };
    CheckReport::new(
        "consistency_slope/negative-control",
        status,
        slope.unwrap_or(f64::NAN),
        -0.5,
        trials,
        seed,
    )
}

// --- expressivity witness ------------------------------------------------------------

fn witness_distinguish_count(trials: u64, stream: &mut SeedStream, stochastic: bool) -> u64 {
    let x = witness_features();
    let mut count = 0;
    for _ in 0..trials {
        let k = if stochastic {
            let c = draw_c(ProjectionSampler::Isotropic, 3, 8, stream);
            node_cov_dense(&x.matmul(&c).unwrap()).unwrap()
        } else {
            node_cov_dense(&x).unwrap()
        };
        if (k.get(0, 2) - k.get(1, 2)).abs() > 1e-9 {
            count += 1;
        }
    }
    count
}

/// Deterministic part: NodeCov of the witness has every off-diagonal at
/// -1/9, making the nodes automorphic. Stochastic part: at h=8 the sampled
/// operator separates rows u,v in at least trials-1 of trials draws.
pub fn check_expressivity_witness(trials: u64, seed: u64) -> Result<CheckReport> {
    let x = witness_features();
    let k = node_cov_dense(&x)?;
    let mut max_dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let expected = if i == j { 2.0 / 9.0 } else { -1.0 / 9.0 };
            max_dev = max_dev.max((k.get(i, j) - expected).abs());
        }
    }
    if max_dev > 1e-12 {
        return Ok(CheckReport::new(
            "expressivity_witness",
            CheckStatus::Failed,
            max_dev,
            1e-12,
            trials,
            seed,
        ));
    }
    let mut stream = SeedStream::new(seed, "check/witness");
    let count = witness_distinguish_count(trials, &mut stream, true);
    let status = if count + 1 >= trials {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(CheckReport::new(
        "expressivity_witness",
        status,
        count as f64 / trials as f64,
        (trials - 1) as f64 / trials as f64,
        trials,
        seed,
    ))
}

fn check_witness_negative(trials: u64, seed: u64) -> CheckReport {
    // the deterministic operator never separates the automorphic nodes
    let mut stream = SeedStream::new(seed, "check/witness-negative");
    let count = witness_distinguish_count(trials, &mut stream, false);
    let status = if count + 1 < trials {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    CheckReport::new(
        "expressivity_witness/negative-control",
        status,
        count as f64 / trials as f64,
        (trials - 1) as f64 / trials as f64,
        trials,
        seed,
    )
}

// --- Jensen bound ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JensenLoss {
    Mse,
    CrossEntropy,
    /// Concave control: Jensen flips direction.
    NegatedMse,
}

fn jensen_config() -> (EncoderConfig, Graph) {
    let mut cfg = EncoderConfig::uniform(2, 8, 1, 8, 4);
    cfg.norm = Norm::Layer;
    (cfg, bundled_graph())
}

fn jensen_loss_of(pred: &Matrix, loss: JensenLoss, labels: &[usize], targets: &Matrix) -> f64 {
    match loss {
        JensenLoss::CrossEntropy => {
            let target = Target::Classes {
                labels: labels.to_vec(),
                mask: None,
            };
            loss_and_grad(
                pred,
                &target,
                LossSpec {
                    kind: LossKind::CrossEntropy,
                },
            )
            .unwrap()
            .0
        }
        JensenLoss::Mse => {
            loss_and_grad(
                pred,
                &Target::Values(targets.clone()),
                LossSpec { kind: LossKind::Mse },
            )
            .unwrap()
            .0
        }
        JensenLoss::NegatedMse => {
            -loss_and_grad(
                pred,
                &Target::Values(targets.clone()),
                LossSpec { kind: LossKind::Mse },
            )
            .unwrap()
            .0
        }
    }
}

/// Minimum slack of `mean_t L(φ(H_t)) - L(φ(mean_t H_t))` over random
/// parameter settings.
fn jensen_min_slack(
    settings: u64,
    draws: u64,
    seed: u64,
    tag: &str,
    losses: &[JensenLoss],
) -> f64 {
    let (cfg, g) = jensen_config();
    let mut stream = SeedStream::new(seed, tag);
    let n = g.num_nodes();
    let out_dim = 2;
    let labels: Vec<usize> = (0..n).map(|i| i % out_dim).collect();
    let d = g.node_features().cols();
    let mut min_slack = f64::INFINITY;
    for _ in 0..settings {
        let params = EncoderParams::init(&cfg, &mut stream).unwrap();
        let head = TaskHead::init(
            HeadKind::Linear,
            Task::NodeClassification,
            cfg.output_width(),
            out_dim,
            &mut stream,
        );
        let targets = gaussian_matrix(n, out_dim, &mut stream).unwrap();
        let mut mean_h: Option<Matrix> = None;
        let mut mean_losses = vec![0.0f64; losses.len()];
        for _ in 0..draws {
            let c = gaussian_matrix(d, cfg.projection_dim, &mut stream).unwrap();
            let r0 = g.node_features().matmul(&c).unwrap();
            let (h_final, _) =
                forward_from_projection(&g, &r0, None, None, &cfg, &params, false).unwrap();
            let pred = head.forward(&h_final).unwrap();
            for (acc, &loss) in mean_losses.iter_mut().zip(losses) {
                *acc += jensen_loss_of(&pred, loss, &labels, &targets);
            }
            match mean_h.as_mut() {
                Some(m) => m.add_assign(&h_final).unwrap(),
                None => mean_h = Some(h_final),
            }
        }
        let mut mean_h = mean_h.expect("draws >= 1");
        mean_h.scale(1.0 / draws as f64);
        let pred_of_mean = head.forward(&mean_h).unwrap();
        for (acc, &loss) in mean_losses.iter().zip(losses) {
            let mean_loss = acc / draws as f64;
            let loss_of_mean = jensen_loss_of(&pred_of_mean, loss, &labels, &targets);
            min_slack = min_slack.min(mean_loss - loss_of_mean);
        }
    }
    min_slack
}

/// Empirical-measure Jensen bound for a linear head: the average training
/// loss over sampled projections dominates the loss of the averaged
/// representation, exactly, up to float roundoff.
pub fn check_jensen(settings: u64, draws: u64, head: HeadKind, seed: u64) -> Result<CheckReport> {
    if head != HeadKind::Linear {
        // convexity hypothesis unmet for the MLP head
        return Ok(CheckReport::new(
            "jensen_bound",
            CheckStatus::NotApplicable,
            f64::NAN,
            -1e-12,
            0,
            seed,
        ));
    }
    let slack = jensen_min_slack(
        settings,
        draws,
        seed,
        "check/jensen",
        &[JensenLoss::Mse, JensenLoss::CrossEntropy],
    );
    let status = if slack >= -1e-12 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(CheckReport::new(
        "jensen_bound",
        status,
        slack,
        -1e-12,
        settings * draws,
        seed,
    ))
}

fn check_jensen_negative(settings: u64, draws: u64, seed: u64) -> CheckReport {
    let slack = jensen_min_slack(
        settings,
        draws,
        seed,
        "check/jensen-negative",
        &[JensenLoss::NegatedMse],
    );
    let status = if slack < -1e-12 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    CheckReport::new(
        "jensen_bound/negative-control",
        status,
        slack,
        -1e-12,
        settings * draws,
        seed,
    )
}

// --- factored vs dense -----------------------------------------------------------------

fn factored_dense_max_diff(instances: u64, seed: u64, corrupt_scale: bool) -> f64 {
    let mut stream = SeedStream::new(seed, "check/factored");
    let mut max_diff = 0.0f64;
    for _ in 0..instances {
        let n = 20 + stream.next_index(181); // up to 200
        let h = 8 + stream.next_index(505); // up to 512
        let c = 1 + stream.next_index(64); // up to 64
        let r = gaussian_matrix(n, h, &mut stream).unwrap();
        let h_in = gaussian_matrix(n, c, &mut stream).unwrap();
        let dense = node_cov_dense(&r).unwrap().matmul(&h_in).unwrap();
        let factored = match make_factored(&r).unwrap() {
            Operator::FactoredCov { rc, scale } => {
                let scale = if corrupt_scale {
                    scale * h as f64 / (h as f64 + 1.0)
                } else {
                    scale
                };
                let tmp = rc.transpose_mul_exact(&h_in).unwrap();
                let mut out = rc.matmul(&tmp).unwrap();
                out.scale(scale);
                out
            }
            _ => unreachable!(),
        };
        max_diff = max_diff.max(dense.max_abs_diff(&factored));
    }
    max_diff
}

/// Dense and factored application agree to 1e-10 across random instances.
pub fn check_factored_dense(instances: u64, seed: u64) -> Result<CheckReport> {
    let stat = factored_dense_max_diff(instances, seed, false);
    let status = if stat < 1e-10 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(CheckReport::new(
        "factored_dense",
        status,
        stat,
        1e-10,
        instances,
        seed,
    ))
}

fn check_factored_negative(instances: u64, seed: u64) -> CheckReport {
    let stat = factored_dense_max_diff(instances, seed, true);
    let status = if stat >= 1e-10 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    CheckReport::new(
        "factored_dense/negative-control",
        status,
        stat,
        1e-10,
        instances,
        seed,
    )
}

// --- hidden representation invariance -----------------------------------------------

fn hidden_invariance_fraction(
    trials: u64,
    num_layers: usize,
    stream: &mut SeedStream,
    sampler: ProjectionSampler,
) -> f64 {
    let g = bundled_graph();
    let x = g.node_features().clone();
    let d = x.cols();
    let mut cfg = EncoderConfig::uniform(num_layers.max(1), 8, 1, 8, 4);
    cfg.norm = Norm::Layer;
    let params = EncoderParams::init(&cfg, &mut SeedStream::new(0x77, "fixture/hidden-params"))
        .unwrap();
    let use_layers = num_layers > 0;

    let perm: Vec<usize> = if sampler == ProjectionSampler::Isotropic {
        let mut p: Vec<usize> = (0..d).collect();
        stream.shuffle(&mut p);
        p
    } else {
        (0..d).rev().collect()
    };
    let mut p_mat = Matrix::zeros(d, d);
    for (from, &to) in perm.iter().enumerate() {
        p_mat.set(from, to, 1.0);
    }
    let xp = x.matmul(&p_mat).unwrap();

    let s = crate::encoder::rwse(&g, cfg.structural_dim).unwrap();
    let width = if use_layers {
        cfg.output_width()
    } else {
        cfg.input_width()
    };
    let n = g.num_nodes();
    let mut stats_a = MomentStats::new(n * width);
    let mut stats_b = MomentStats::new(n * width);
    let run = |features: &Matrix, stats: &mut MomentStats, stream: &mut SeedStream| {
        for _ in 0..trials {
            let c = draw_c(sampler, d, cfg.projection_dim, stream);
            let r0 = features.matmul(&c).unwrap();
            let m = if use_layers {
                forward_from_projection(&g, &r0, None, Some(&s), &cfg, &params, false)
                    .unwrap()
                    .0
            } else {
                crate::encoder::build_h0(&r0, &s).unwrap()
            };
            stats.add(&m);
        }
    };
    run(&x, &mut stats_a, stream);
    run(&xp, &mut stats_b, stream);
    two_moment_agreement(&stats_a, &stats_b)
}

/// Distributional invariance of the final hidden representations under
/// feature permutation. With zero layers this degenerates to the invariance
/// of H⁰ = R⁰ ⊕ S.
pub fn check_hidden_invariance(num_layers: usize, trials: u64, seed: u64) -> Result<CheckReport> {
    let mut stream = SeedStream::new(seed, "check/hidden");
    let frac =
        hidden_invariance_fraction(trials, num_layers, &mut stream, ProjectionSampler::Isotropic);
    let status = if frac >= 0.95 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(CheckReport::new(
        "hidden_invariance",
        status,
        frac,
        0.95,
        trials,
        seed,
    ))
}

fn check_hidden_negative(num_layers: usize, trials: u64, seed: u64) -> CheckReport {
    let mut stream = SeedStream::new(seed, "check/hidden-negative");
    let frac = hidden_invariance_fraction(
        trials,
        num_layers,
        &mut stream,
        ProjectionSampler::DeterministicRamp,
    );
    let status = if frac < 0.95 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    CheckReport::new(
        "hidden_invariance/negative-control",
        status,
        frac,
        0.95,
        trials,
        seed,
    )
}

// --- gradient correctness -------------------------------------------------------------

fn gradient_max_rel_err(samples: u64, seed: u64, corrupt: bool) -> f64 {
    let g = bundled_graph();
    let mut cfg = EncoderConfig::uniform(2, 8, 1, 6, 3);
    cfg.norm = Norm::Layer;
    let mut stream = SeedStream::new(seed, "check/grad");
    let params = EncoderParams::init(&cfg, &mut stream).unwrap();
    let head = TaskHead::init(
        HeadKind::Mlp,
        Task::GraphClassification,
        cfg.output_width(),
        2,
        &mut stream,
    );
    let c = gaussian_matrix(g.node_features().cols(), cfg.projection_dim, &mut stream).unwrap();
    let r0 = g.node_features().matmul(&c).unwrap();
    let target = Target::Classes {
        labels: vec![1],
        mask: None,
    };
    let spec = LossSpec {
        kind: LossKind::CrossEntropy,
    };
    let loss_of = |params: &EncoderParams| -> f64 {
        forward_loss(&g, &r0, None, None, &cfg, params, &head, &target, spec, true)
            .unwrap()
            .0
    };
    let (_, tape) =
        forward_loss(&g, &r0, None, None, &cfg, &params, &head, &target, spec, true).unwrap();
    let grads = backward(&tape, &g, &cfg, &params, &head).unwrap();
    let step = 1e-5;
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let l = stream.next_index(cfg.num_layers);
        let o = stream.next_index(params.layers[l].weights.len());
        let idx = stream.next_index(params.layers[l].weights[o].data().len());
        let mut analytic = grads.encoder.layers[l].weights[o].data()[idx];
        if corrupt {
            analytic *= 1.001;
        }
        let mut plus = params.clone();
        plus.layers[l].weights[o].data_mut()[idx] += step;
        let mut minus = params.clone();
        minus.layers[l].weights[o].data_mut()[idx] -= step;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
        let denom = analytic.abs().max(fd.abs());
        let rel = if denom < 1e-8 {
            (analytic - fd).abs()
        } else {
            (analytic - fd).abs() / denom
        };
        max_rel = max_rel.max(rel);
    }
    max_rel
}

/// Reverse-mode gradients versus central finite differences at step 1e-5
/// over sampled encoder parameters, with a fixed projection.
pub fn check_gradients(samples: u64, seed: u64) -> Result<CheckReport> {
    let stat = gradient_max_rel_err(samples, seed, false);
    let status = if stat < 1e-5 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    Ok(CheckReport::new(
        "gradient_correctness",
        status,
        stat,
        1e-5,
        samples,
        seed,
    ))
}

fn check_gradients_negative(samples: u64, seed: u64) -> CheckReport {
    let stat = gradient_max_rel_err(samples, seed, true);
    let status = if stat >= 1e-5 {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed
    };
    CheckReport::new(
        "gradient_correctness/negative-control",
        status,
        stat,
        1e-5,
        samples,
        seed,
    )
}

// --- suite ---------------------------------------------------------------------------------

pub const SUITE_NAMES: [&str; 8] = [
    "perm",
    "ortho",
    "consistency",
    "witness",
    "jensen",
    "factored",
    "hidden",
    "grad",
];

pub const CONSISTENCY_H_LIST: [usize; 5] = [16, 64, 256, 1024, 4096];

fn run_one(name: &str, seed: u64) -> Result<Vec<CheckReport>> {
    let x = witness_features();
    Ok(match name {
        "perm" => vec![
            check_perm_invariance(&x, 20_000, seed)?,
            check_perm_invariance_negative(&x, 20_000, seed),
        ],
        "ortho" => vec![
            check_orthogonal_expectation(&x, 10_000, seed)?,
            check_orthogonal_negative(&x, 10_000, seed),
        ],
        "consistency" => vec![
            check_consistency_slope(&x, &CONSISTENCY_H_LIST, 50, seed)?,
            check_consistency_negative(&x, &CONSISTENCY_H_LIST, 50, seed),
        ],
        "witness" => vec![
            check_expressivity_witness(1000, seed)?,
            check_witness_negative(1000, seed),
        ],
        "jensen" => vec![
            check_jensen(100, 512, HeadKind::Linear, seed)?,
            check_jensen_negative(4, 512, seed),
        ],
        "factored" => vec![
            check_factored_dense(20, seed)?,
            check_factored_negative(20, seed),
        ],
        "hidden" => vec![
            check_hidden_invariance(2, 20_000, seed)?,
            check_hidden_negative(2, 20_000, seed),
        ],
        "grad" => vec![
            check_gradients(50, seed)?,
            check_gradients_negative(50, seed),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown suite '{other}' (expected one of {})",
                SUITE_NAMES.join("|")
            )))
        }
    })
}

/// Runs the selected checks (and their negative controls). `threads` caps
/// the number of parallel workers; each check owns its seed streams so the
/// result is identical regardless of parallelism. Report order follows the
/// request order, not completion order.
pub fn run_suite(names: &[String], seed: u64, threads: usize) -> Result<Vec<CheckReport>> {
    let selected: Vec<String> = if names.iter().any(|n| n == "all") {
        SUITE_NAMES.iter().map(ToString::to_string).collect()
    } else {
        names.to_vec()
    };
    for name in &selected {
        if !SUITE_NAMES.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown suite '{name}' (expected all|{})",
                SUITE_NAMES.join("|")
            )));
        }
    }
    let threads = threads.max(1).min(selected.len().max(1));
    let mut slots: Vec<Option<Result<Vec<CheckReport>>>> = Vec::new();
    slots.resize_with(selected.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs: Vec<std::sync::Mutex<&mut Option<Result<Vec<CheckReport>>>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= selected.len() {
                    break;
                }
                let started = std::time::Instant::now();
                let mut result = run_one(&selected[i], seed);
                if let Ok(reports) = result.as_mut() {
                    let elapsed = started.elapsed().as_secs_f64();
                    for r in reports.iter_mut() {
                        r.wall_time_s = elapsed / 2.0;
                    }
                }
                **slot_refs[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    let mut out = Vec::new();
    for slot in slots {
        out.extend(slot.expect("all slots filled")?);
    }
    Ok(out)
}

/// True iff every applicable check (including negative controls) is in
/// order.
pub fn suite_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.status != CheckStatus::Failed)
}

pub fn format_report_table(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<44} {:>12} {:>13} {:>12} {:>9} {:>9}\n",
        "check", "status", "statistic", "threshold", "trials", "time(s)"
    ));
    for r in reports {
        let status = match r.status {
            CheckStatus::Passed => "passed",
            CheckStatus::Failed => "FAILED",
            CheckStatus::VacuousPass => "vacuous",
            CheckStatus::NotApplicable => "n/a",
        };
        out.push_str(&format!(
            "{:<44} {:>12} {:>13.6e} {:>12.2e} {:>9} {:>9.2}\n",
            r.check_name, status, r.statistic, r.threshold, r.trials, r.wall_time_s
        ));
    }
    out
}
