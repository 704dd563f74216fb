//! Per-frame tag state estimation.
//!
//! The state `(p, u)` minimizes a stacked weighted least-squares system made
//! of range residuals weighted by the NLOS confidence `beta`, the same range
//! residuals weighted by the prior-map clearance `alpha`, and a constant
//! velocity motion prior. Solved with Levenberg-Marquardt and an analytic
//! Jacobian.

use nalgebra::{Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{raycast, CellState, GridError, TriMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("time step {0} must be positive")]
    NonPositiveDt(f64),
    #[error("no observations and no motion prior")]
    Underdetermined,
    #[error("unknown anchor id {0}")]
    UnknownAnchor(u32),
    #[error("invalid anchor configuration: {0}")]
    InvalidAnchors(String),
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub p: Vector2<f64>,
    pub u: Vector2<f64>,
    pub timestamp: f64,
}

impl AgentState {
    pub fn at_rest(x: f64, y: f64, timestamp: f64) -> Self {
        Self {
            p: Vector2::new(x, y),
            u: Vector2::zeros(),
            timestamp,
        }
    }

    fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.p.x, self.p.y, self.u.x, self.u.y)
    }

    fn from_vector(v: &Vector4<f64>, timestamp: f64) -> Self {
        Self {
            p: Vector2::new(v[0], v[1]),
            u: Vector2::new(v[2], v[3]),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub id: u32,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorConfig {
    anchors: Vec<Anchor>,
}

impl AnchorConfig {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self, LocalizeError> {
        let cfg = Self { anchors };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LocalizeError> {
        for (k, a) in self.anchors.iter().enumerate() {
            if !(a.position[0].is_finite() && a.position[1].is_finite()) {
                return Err(LocalizeError::InvalidAnchors(format!("anchor {} is not finite", a.id)));
            }
            for b in &self.anchors[..k] {
                if a.id == b.id {
                    return Err(LocalizeError::InvalidAnchors(format!("duplicate id {}", a.id)));
                }
                if a.position == b.position {
                    return Err(LocalizeError::InvalidAnchors(format!(
                        "anchors {} and {} share a position",
                        b.id, a.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.anchors.iter()
    }

    pub fn position(&self, id: u32) -> Option<[f64; 2]> {
        self.anchors.iter().find(|a| a.id == id).map(|a| a.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    /// Weights of the NLOS, motion and prior-map terms.
    pub rho: [f64; 3],
    /// Sharpness of the score to weight mapping.
    pub lambda: f64,
    /// Influence of the prior map on `alpha`, in [0, 1].
    pub zeta: f64,
    /// Scale of the motion noise (m). Folded into `rho[1]`; kept for reporting.
    pub motion_noise: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            rho: [1.0, 0.25, 1.0],
            lambda: 2.0,
            zeta: 0.8,
            motion_noise: 0.05,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), LocalizeError> {
        if self.rho.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(LocalizeError::InvalidWeights(format!("rho {:?} must be non-negative", self.rho)));
        }
        if self.rho.iter().all(|&r| r == 0.0) {
            return Err(LocalizeError::InvalidWeights("all rho are zero".into()));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(LocalizeError::InvalidWeights(format!("zeta {} outside [0, 1]", self.zeta)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(LocalizeError::InvalidWeights(format!("lambda {} must be positive", self.lambda)));
        }
        if !(self.motion_noise >= 0.0) {
            return Err(LocalizeError::InvalidWeights("motion noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Same weights without the prior-map term.
    pub fn without_map(&self) -> Self {
        Self {
            rho: [self.rho[0], self.rho[1], 0.0],
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObservation {
    pub anchor_id: u32,
    /// Smoothed range, meters.
    pub range: f64,
    pub beta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub step_tol: f64,
    pub initial_damping: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tol: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solution {
    pub state: AgentState,
    pub converged: bool,
    pub iterations: usize,
    /// Half the squared residual norm at the returned state.
    pub cost: f64,
    pub initial_cost: f64,
}

/// Constant-velocity prediction; velocity is carried over unchanged.
pub fn predict(prev: &AgentState, dt: f64) -> Result<AgentState, LocalizeError> {
    if !(dt > 0.0) {
        return Err(LocalizeError::NonPositiveDt(dt));
    }
    Ok(AgentState {
        p: prev.p + prev.u * dt,
        u: prev.u,
        timestamp: prev.timestamp + dt,
    })
}

/// `1 - zeta * occupied / total` along the ray from `p_est` to `anchor`.
pub fn map_weight(map: &TriMap, p_est: [f64; 2], anchor: [f64; 2], zeta: f64) -> Result<f64, GridError> {
    let ray = raycast(&map.geometry, p_est, anchor)?;
    let occupied = ray.cells.iter().filter(|&&c| map.get(c) == CellState::Occupied).count();
    Ok(1.0 - zeta * occupied as f64 / ray.len() as f64)
}

/// One range term with its anchor resolved and weights pre-multiplied.
#[derive(Debug, Clone, Copy)]
struct RangeTerm {
    anchor: Vector2<f64>,
    range: f64,
    nlos_weight: f64,
    map_weight: f64,
}

/// The stacked residual system for one frame.
#[derive(Debug, Clone)]
pub struct Objective {
    terms: Vec<RangeTerm>,
    motion_weight: f64,
    p_pred: Vector2<f64>,
    u_prev: Vector2<f64>,
}

impl Objective {
    pub fn new(
        observations: &[RangeObservation],
        prev: &AgentState,
        dt: f64,
        anchors: &AnchorConfig,
        weights: &ObjectiveWeights,
    ) -> Result<Self, LocalizeError> {
        weights.validate()?;
        let pred = predict(prev, dt)?;
        let terms = observations
            .iter()
            .map(|o| {
                let a = anchors.position(o.anchor_id).ok_or(LocalizeError::UnknownAnchor(o.anchor_id))?;
                Ok(RangeTerm {
                    anchor: Vector2::new(a[0], a[1]),
                    range: o.range,
                    nlos_weight: weights.rho[0] * o.beta.clamp(0.0, 1.0),
                    map_weight: weights.rho[2] * o.alpha.clamp(0.0, 1.0),
                })
            })
            .collect::<Result<Vec<_>, LocalizeError>>()?;
        let motion_weight = weights.rho[1];
        if motion_weight == 0.0 && terms.iter().all(|t| t.nlos_weight == 0.0 && t.map_weight == 0.0) {
            return Err(LocalizeError::Underdetermined);
        }
        Ok(Self {
            terms,
            motion_weight,
            p_pred: pred.p,
            u_prev: prev.u,
        })
    }

    fn for_each_row(&self, x: &Vector4<f64>, mut f: impl FnMut(f64, [f64; 4])) {
        let p = Vector2::new(x[0], x[1]);
        for t in &self.terms {
            let diff = p - t.anchor;
            let r = diff.norm();
            let e = t.range - r;
            let grad = if r > 0.0 {
                [-diff.x / r, -diff.y / r, 0.0, 0.0]
            } else {
                [0.0; 4]
            };
            for w in [t.nlos_weight, t.map_weight] {
                if w > 0.0 {
                    let s = w.sqrt();
                    f(s * e, grad.map(|g| s * g));
                }
            }
        }
        if self.motion_weight > 0.0 {
            let s = self.motion_weight.sqrt();
            f(s * (x[0] - self.p_pred.x), [s, 0.0, 0.0, 0.0]);
            f(s * (x[1] - self.p_pred.y), [0.0, s, 0.0, 0.0]);
            f(s * (x[2] - self.u_prev.x), [0.0, 0.0, s, 0.0]);
            f(s * (x[3] - self.u_prev.y), [0.0, 0.0, 0.0, s]);
        }
    }

    /// Residual vector at `[px, py, vx, vy]`.
    pub fn residuals(&self, x: [f64; 4]) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_row(&Vector4::from(x), |r, _| out.push(r));
        out
    }

    /// Analytic Jacobian rows matching [`Objective::residuals`].
    pub fn jacobian(&self, x: [f64; 4]) -> Vec<[f64; 4]> {
        let mut out = Vec::new();
        self.for_each_row(&Vector4::from(x), |_, g| out.push(g));
        out
    }

    /// Half the squared residual norm.
    pub fn cost(&self, x: [f64; 4]) -> f64 {
        self.cost_at(&Vector4::from(x))
    }

    fn cost_at(&self, x: &Vector4<f64>) -> f64 {
        let mut c = 0.0;
        self.for_each_row(x, |r, _| c += r * r);
        0.5 * c
    }

    fn normal_equations(&self, x: &Vector4<f64>) -> (Matrix4<f64>, Vector4<f64>) {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        self.for_each_row(x, |r, g| {
            let g = Vector4::from(g);
            jtj += g * g.transpose();
            jtr += g * r;
        });
        (jtj, jtr)
    }

    pub fn minimize(&self, start: &AgentState, timestamp: f64, lm: &LmSettings) -> Solution {
        let mut x = start.to_vector();
        let mut cost = self.cost_at(&x);
        let initial_cost = cost;
        let mut damping = lm.initial_damping;
        let mut converged = false;
        let mut iterations = 0;

        while iterations < lm.max_iterations {
            iterations += 1;
            let (jtj, jtr) = self.normal_equations(&x);
            if jtr.norm() == 0.0 {
                converged = true;
                break;
            }
            let lhs = jtj + Matrix4::identity() * damping;
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= 10.0;
                continue;
            };
            let candidate = x + step;
            let candidate_cost = self.cost_at(&candidate);
            if candidate_cost < cost {
                x = candidate;
                cost = candidate_cost;
                damping /= 10.0;
            } else {
                damping *= 10.0;
            }
            if step.norm() < lm.step_tol {
                converged = true;
                break;
            }
        }

        Solution {
            state: AgentState::from_vector(&x, timestamp),
            converged,
            iterations,
            cost,
            initial_cost,
        }
    }
}

/// Full objective: NLOS-weighted ranges, motion prior and prior-map weighted
/// ranges. Starts from the constant-velocity prediction.
pub fn solve(
    observations: &[RangeObservation],
    prev: &AgentState,
    dt: f64,
    anchors: &AnchorConfig,
    weights: &ObjectiveWeights,
    lm: &LmSettings,
) -> Result<Solution, LocalizeError> {
    let objective = Objective::new(observations, prev, dt, anchors, weights)?;
    let start = predict(prev, dt)?;
    Ok(objective.minimize(&start, start.timestamp, lm))
}

/// Baseline weighted least squares: `solve` with the prior-map term removed.
pub fn wls_baseline(
    observations: &[RangeObservation],
    prev: &AgentState,
    dt: f64,
    anchors: &AnchorConfig,
    weights: &ObjectiveWeights,
    lm: &LmSettings,
) -> Result<Solution, LocalizeError> {
    solve(observations, prev, dt, anchors, &weights.without_map(), lm)
}

/// Closed-form linearized multilateration used to seed the first frame.
/// Falls back to the anchor centroid when fewer than three usable ranges exist
/// or the geometry is degenerate.
pub fn initial_fix(observations: &[RangeObservation], anchors: &AnchorConfig) -> Option<[f64; 2]> {
    let pts: Vec<([f64; 2], f64)> = observations
        .iter()
        .filter_map(|o| anchors.position(o.anchor_id).map(|a| (a, o.range)))
        .collect();
    if pts.is_empty() {
        let n = anchors.len();
        if n == 0 {
            return None;
        }
        let (sx, sy) = anchors.iter().fold((0.0, 0.0), |(x, y), a| (x + a.position[0], y + a.position[1]));
        return Some([sx / n as f64, sy / n as f64]);
    }
    let centroid = {
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), (a, _)| (x + a[0], y + a[1]));
        [sx / n, sy / n]
    };
    if pts.len() < 3 {
        return Some(centroid);
    }
    let (a0, r0) = pts[0];
    let mut ata = nalgebra::Matrix2::<f64>::zeros();
    let mut atb = Vector2::<f64>::zeros();
    for &(a, r) in &pts[1..] {
        let row = Vector2::new(2.0 * (a[0] - a0[0]), 2.0 * (a[1] - a0[1]));
        let rhs = r0 * r0 - r * r + a[0] * a[0] + a[1] * a[1] - a0[0] * a0[0] - a0[1] * a0[1];
        ata += row * row.transpose();
        atb += row * rhs;
    }
    match ata.try_inverse() {
        Some(inv) if ata.determinant().abs() > 1e-9 => {
            let p = inv * atb;
            Some([p.x, p.y])
        }
        _ => Some(centroid),
    }
}
