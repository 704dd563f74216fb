//! Soft-margin SVM for LOS/NLOS identification.
//!
//! Inputs use the homogenized layout `[d, fp, rx, 1]` built from normalized
//! channels. Training solves the standard dual with two-variable SMO updates
//! and second-order working-set selection; the linear kernel collapses the
//! result into a single weight vector `[w_d, w_fp, w_rx, b]` so that the
//! decision value is a plain dot product.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensor::Channels;

/// Dimension of a homogenized sample.
pub const DIM: usize = 4;

const TAU: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training set contains a single class")]
    SingleClassDataset,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidParameter(String),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Los,
    Nlos,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Los => 1.0,
            Label::Nlos => -1.0,
        }
    }

    pub fn from_los(los: bool) -> Self {
        if los {
            Label::Los
        } else {
            Label::Nlos
        }
    }

    /// Score 0 resolves to LOS.
    pub fn from_score(score: f64) -> Self {
        Self::from_los(score >= 0.0)
    }

    pub fn is_los(self) -> bool {
        self == Label::Los
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Los => Label::Nlos,
            Label::Nlos => Label::Los,
        }
    }
}

/// Maps normalized channels to `[d, fp, rx, 1]`.
pub fn homogenize(norm: &Channels) -> [f64; DIM] {
    [norm.d(), norm.fp(), norm.rx(), 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: [f64; DIM],
    pub y: Label,
}

impl LabeledSample {
    /// Builds a sample from the first three features; the bias slot is set to 1.
    pub fn new(features: [f64; 3], y: Label) -> Self {
        Self {
            x: [features[0], features[1], features[2], 1.0],
            y,
        }
    }

    pub fn from_channels(norm: &Channels, y: Label) -> Self {
        Self {
            x: homogenize(norm),
            y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Gaussian { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64; DIM], b: &[f64; DIM]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Gaussian { gamma } => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * sq).exp()
            }
        }
    }

    fn validate(&self) -> Result<(), SvmError> {
        match *self {
            Kernel::Linear => Ok(()),
            Kernel::Gaussian { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            Kernel::Gaussian { gamma } => Err(SvmError::InvalidParameter(format!(
                "gaussian gamma {gamma} must be positive"
            ))),
        }
    }
}

fn dot(a: &[f64; DIM], b: &[f64; DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportVector {
    pub x: [f64; DIM],
    pub y: Label,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum Decision {
    /// `score = w . x`, bias in the last slot.
    Linear { w: [f64; DIM] },
    /// `score = sum_j alpha_j y_j K(x_j, x) + bias`.
    Dual {
        support: Vec<SupportVector>,
        bias: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c_reg: f64,
    pub decision: Decision,
    /// False when training stopped at the iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Iteration cap, expressed in passes over the training set.
    pub max_passes: usize,
    /// Maximal KKT violation accepted at convergence.
    pub kkt_tol: f64,
    /// Dual objective change per pass below which training stops.
    pub objective_tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_passes: 10_000,
            kkt_tol: 1e-3,
            objective_tol: 1e-6,
        }
    }
}

pub fn train(samples: &[LabeledSample], kernel: Kernel, c_reg: f64) -> Result<SvmModel, SvmError> {
    train_with(samples, kernel, c_reg, &TrainOptions::default())
}

pub fn train_with(
    samples: &[LabeledSample],
    kernel: Kernel,
    c_reg: f64,
    opts: &TrainOptions,
) -> Result<SvmModel, SvmError> {
    kernel.validate()?;
    if !(c_reg > 0.0 && c_reg.is_finite()) {
        return Err(SvmError::InvalidParameter(format!("C = {c_reg} must be positive")));
    }
    if samples.is_empty() {
        return Err(SvmError::EmptyDataset);
    }
    let has_los = samples.iter().any(|s| s.y == Label::Los);
    let has_nlos = samples.iter().any(|s| s.y == Label::Nlos);
    if samples.len() < 2 || !has_los || !has_nlos {
        return Err(SvmError::SingleClassDataset);
    }

    let solution = Smo::new(samples, kernel, c_reg).solve(opts);
    if !solution.converged {
        log::warn!(
            "SVM training hit the iteration cap after {} iterations",
            solution.iterations
        );
    }

    let decision = match kernel {
        Kernel::Linear => {
            let mut w = [0.0; DIM];
            for (s, &a) in samples.iter().zip(&solution.alpha) {
                if a > 0.0 {
                    for k in 0..3 {
                        w[k] += a * s.y.sign() * s.x[k];
                    }
                }
            }
            w[3] = solution.bias;
            Decision::Linear { w }
        }
        Kernel::Gaussian { .. } => Decision::Dual {
            support: samples
                .iter()
                .zip(&solution.alpha)
                .filter(|(_, &a)| a > 0.0)
                .map(|(s, &alpha)| SupportVector { x: s.x, y: s.y, alpha })
                .collect(),
            bias: solution.bias,
        },
    };

    Ok(SvmModel {
        kernel,
        c_reg,
        decision,
        converged: solution.converged,
        iterations: solution.iterations,
    })
}

struct SmoSolution {
    alpha: Vec<f64>,
    bias: f64,
    converged: bool,
    iterations: usize,
}

/// Dual solver for `min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0`.
struct Smo<'a> {
    samples: &'a [LabeledSample],
    kernel: Kernel,
    c: f64,
    y: Vec<f64>,
    diag: Vec<f64>,
    gram: Option<Vec<f64>>,
}

// Above this size kernel rows are computed on demand instead of cached.
const GRAM_CACHE_LIMIT: usize = 2000;

impl<'a> Smo<'a> {
    fn new(samples: &'a [LabeledSample], kernel: Kernel, c: f64) -> Self {
        let n = samples.len();
        let y: Vec<f64> = samples.iter().map(|s| s.y.sign()).collect();
        let diag = samples.iter().map(|s| kernel.eval(&s.x, &s.x)).collect();
        let gram = (n <= GRAM_CACHE_LIMIT).then(|| {
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let k = kernel.eval(&samples[i].x, &samples[j].x);
                    g[i * n + j] = k;
                    g[j * n + i] = k;
                }
            }
            g
        });
        Self {
            samples,
            kernel,
            c,
            y,
            diag,
            gram,
        }
    }

    /// Row `i` of Q, `Q_ij = y_i y_j K(x_i, x_j)`.
    fn q_row(&self, i: usize, out: &mut [f64]) {
        let n = self.samples.len();
        for j in 0..n {
            let k = match &self.gram {
                Some(g) => g[i * n + j],
                None => self.kernel.eval(&self.samples[i].x, &self.samples[j].x),
            };
            out[j] = self.y[i] * self.y[j] * k;
        }
    }

    fn solve(&self, opts: &TrainOptions) -> SmoSolution {
        let n = self.samples.len();
        let c = self.c;
        let y = &self.y;
        let mut alpha = vec![0.0; n];
        let mut grad = vec![-1.0; n];
        let mut qi = vec![0.0; n];
        let mut qj = vec![0.0; n];

        let max_iter = opts.max_passes.saturating_mul(n).max(1);
        let mut iterations = 0;
        let mut converged = false;
        let mut last_objective = 0.0;

        while iterations < max_iter {
            // maximal violating index from I_up
            let mut gmax = f64::NEG_INFINITY;
            let mut i_sel = None;
            for t in 0..n {
                let up = if y[t] > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
                if up && -y[t] * grad[t] >= gmax {
                    gmax = -y[t] * grad[t];
                    i_sel = Some(t);
                }
            }
            let Some(i) = i_sel else {
                converged = true;
                break;
            };
            self.q_row(i, &mut qi);

            // second-order choice from I_low
            let mut gmax2 = f64::NEG_INFINITY;
            let mut obj_min = f64::INFINITY;
            let mut j_sel = None;
            for t in 0..n {
                let low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
                if !low {
                    continue;
                }
                let ygt = y[t] * grad[t];
                gmax2 = gmax2.max(ygt);
                let grad_diff = gmax + ygt;
                if grad_diff > 0.0 {
                    let quad = self.diag[i] + self.diag[t] - 2.0 * qi[t] * y[i] * y[t];
                    let quad = if quad > 0.0 { quad } else { TAU };
                    let obj = -(grad_diff * grad_diff) / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        j_sel = Some(t);
                    }
                }
            }
            if gmax + gmax2 < opts.kkt_tol {
                converged = true;
                break;
            }
            let Some(j) = j_sel else {
                converged = true;
                break;
            };
            self.q_row(j, &mut qj);

            let (old_i, old_j) = (alpha[i], alpha[j]);
            if y[i] != y[j] {
                let quad = (self.diag[i] + self.diag[j] + 2.0 * qi[j]).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (self.diag[i] + self.diag[j] - 2.0 * qi[j]).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }

            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for t in 0..n {
                grad[t] += qi[t] * di + qj[t] * dj;
            }
            iterations += 1;

            if iterations % n == 0 {
                let objective: f64 = alpha
                    .iter()
                    .zip(&grad)
                    .map(|(a, g)| a * (g - 1.0))
                    .sum::<f64>()
                    / 2.0;
                if iterations > n && (last_objective - objective).abs() < opts.objective_tol {
                    converged = true;
                    break;
                }
                last_objective = objective;
            }
        }

        SmoSolution {
            bias: self.bias(&alpha, &grad),
            alpha,
            converged,
            iterations,
        }
    }

    fn bias(&self, alpha: &[f64], grad: &[f64]) -> f64 {
        let c = self.c;
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        let mut free_sum = 0.0;
        let mut free_count = 0usize;
        for t in 0..alpha.len() {
            let yg = self.y[t] * grad[t];
            let positive = self.y[t] > 0.0;
            if alpha[t] >= c {
                if positive {
                    lb = lb.max(yg);
                } else {
                    ub = ub.min(yg);
                }
            } else if alpha[t] <= 0.0 {
                if positive {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                free_count += 1;
                free_sum += yg;
            }
        }
        let rho = if free_count > 0 {
            free_sum / free_count as f64
        } else {
            (ub + lb) / 2.0
        };
        -rho
    }
}

/// Label and raw decision value for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub label: Label,
    pub score: f64,
}

impl Classification {
    pub fn with_weight(self, lambda: f64) -> LosDecision {
        LosDecision {
            label: self.label,
            score: self.score,
            beta: score_to_weight(self.score, lambda),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosDecision {
    pub label: Label,
    pub score: f64,
    /// Range weight in [0, 1].
    pub beta: f64,
}

impl SvmModel {
    pub fn decision_value(&self, x: &[f64; DIM]) -> f64 {
        match &self.decision {
            Decision::Linear { w } => dot(w, x),
            Decision::Dual { support, bias } => {
                support
                    .iter()
                    .map(|sv| sv.alpha * sv.y.sign() * self.kernel.eval(&sv.x, x))
                    .sum::<f64>()
                    + bias
            }
        }
    }

    /// Primal soft-margin objective `1/2 |w|^2 + C sum hinge` on `samples`.
    /// The zero model scores `C * n`.
    pub fn hinge_objective(&self, samples: &[LabeledSample]) -> f64 {
        let reg = match &self.decision {
            Decision::Linear { w } => w[..3].iter().map(|v| v * v).sum::<f64>(),
            Decision::Dual { support, .. } => {
                let mut acc = 0.0;
                for a in support {
                    for b in support {
                        acc += a.alpha * b.alpha * a.y.sign() * b.y.sign() * self.kernel.eval(&a.x, &b.x);
                    }
                }
                acc
            }
        };
        let hinge: f64 = samples
            .iter()
            .map(|s| (1.0 - s.y.sign() * self.decision_value(&s.x)).max(0.0))
            .sum();
        0.5 * reg + self.c_reg * hinge
    }

    pub fn save(&self, path: &Path) -> Result<(), SvmError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SvmError> {
        let text = fs::read_to_string(path)?;
        let model: SvmModel = serde_json::from_str(&text)?;
        model.kernel.validate()?;
        Ok(model)
    }
}

pub fn classify(model: &SvmModel, x: &[f64]) -> Result<Classification, SvmError> {
    let x: &[f64; DIM] = x.try_into().map_err(|_| SvmError::DimensionMismatch {
        expected: DIM,
        got: x.len(),
    })?;
    let score = model.decision_value(x);
    Ok(Classification {
        label: Label::from_score(score),
        score,
    })
}

/// `1/2 (1 + tanh(lambda * score))`.
pub fn score_to_weight(score: f64, lambda: f64) -> f64 {
    0.5 * (1.0 + (lambda * score).tanh())
}

/// Confusion counts with LOS as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Evaluation {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

pub fn evaluate(model: &SvmModel, samples: &[LabeledSample]) -> Result<Evaluation, SvmError> {
    if samples.is_empty() {
        return Err(SvmError::EmptyDataset);
    }
    let mut ev = Evaluation::default();
    for s in samples {
        let predicted = Label::from_score(model.decision_value(&s.x));
        match (predicted, s.y) {
            (Label::Los, Label::Los) => ev.tp += 1,
            (Label::Nlos, Label::Nlos) => ev.tn += 1,
            (Label::Los, Label::Nlos) => ev.fp += 1,
            (Label::Nlos, Label::Los) => ev.fn_ += 1,
        }
    }
    Ok(ev)
}
