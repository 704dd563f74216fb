//! Deterministic synthetic UWB streams.
//!
//! A scenario describes anchors, axis-aligned rectangular obstacles and agents
//! following closed waypoint loops at constant speed. Every frame carries one
//! measurement per anchor with its geometric LOS truth and the label presented
//! downstream after identification degradation.

use std::f64::consts::LN_10;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::localizer::{Anchor, AnchorConfig};
use crate::sensor::UwbFrame;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("distance {0} must be positive")]
    NonPositiveDistance(f64),
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.contains_closed(other.min) && self.contains_closed(other.max)
    }

    fn is_valid(&self) -> bool {
        (0..2).all(|k| self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k])
    }

    /// True iff the segment `a -> b` passes through the open interior.
    /// Touching an edge or a corner does not count.
    pub fn segment_hits_interior(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let mut enter = f64::NEG_INFINITY;
        let mut exit = f64::INFINITY;
        for k in 0..2 {
            let d = b[k] - a[k];
            if d == 0.0 {
                if !(a[k] > self.min[k] && a[k] < self.max[k]) {
                    return false;
                }
            } else {
                let t0 = (self.min[k] - a[k]) / d;
                let t1 = (self.max[k] - a[k]) / d;
                enter = enter.max(t0.min(t1));
                exit = exit.min(t0.max(t1));
            }
        }
        enter < exit && enter < 1.0 && exit > 0.0
    }
}

/// Geometric line of sight between `p` and `anchor`.
pub fn los_ground_truth(p: [f64; 2], anchor: [f64; 2], obstacles: &[Rect]) -> bool {
    !obstacles.iter().any(|r| r.segment_hits_interior(p, anchor))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// LOS range noise std (m).
    pub sigma_los: f64,
    /// Mean of the exponential NLOS range bias (m).
    pub nlos_bias_mean: f64,
    /// NLOS range noise std (m).
    pub sigma_nlos: f64,
    /// Received power at 1 m (dBm).
    pub p0: f64,
    /// Path-loss exponent.
    pub pathloss_exponent: f64,
    /// Extra NLOS attenuation (dB); first path loses twice this.
    pub nlos_atten: f64,
    /// Power measurement noise std (dB).
    pub sigma_rssi: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_los: 0.05,
            nlos_bias_mean: 0.5,
            sigma_nlos: 0.15,
            p0: -40.0,
            pathloss_exponent: 2.0,
            nlos_atten: 10.0,
            sigma_rssi: 1.0,
        }
    }
}

impl NoiseParams {
    /// All noise terms off; deterministic path loss and attenuation remain.
    pub fn noiseless() -> Self {
        Self {
            sigma_los: 0.0,
            nlos_bias_mean: 0.0,
            sigma_nlos: 0.0,
            sigma_rssi: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let non_neg = [
            ("sigma_los", self.sigma_los),
            ("nlos_bias_mean", self.nlos_bias_mean),
            ("sigma_nlos", self.sigma_nlos),
            ("sigma_rssi", self.sigma_rssi),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidScenario(format!("noise.{name} = {v} must be non-negative")));
            }
        }
        if !(self.p0.is_finite() && self.pathloss_exponent.is_finite() && self.nlos_atten.is_finite()) {
            return Err(SimError::InvalidScenario("noise parameters must be finite".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma validated").sample(rng)
}

/// Measured range for a true distance.
pub fn synthesize_range(d_true: f64, los: bool, noise: &NoiseParams, rng: &mut impl Rng) -> f64 {
    let d = if los {
        d_true + gaussian(rng, noise.sigma_los)
    } else {
        let bias = if noise.nlos_bias_mean > 0.0 {
            Exp::new(1.0 / noise.nlos_bias_mean).expect("positive rate").sample(rng)
        } else {
            0.0
        };
        d_true + bias + gaussian(rng, noise.sigma_nlos)
    };
    d.max(0.0)
}

/// `(rx, fp)` in dBm from log-distance path loss.
pub fn synthesize_rssi(d: f64, los: bool, noise: &NoiseParams, rng: &mut impl Rng) -> Result<(f64, f64), SimError> {
    if !(d > 0.0) {
        return Err(SimError::NonPositiveDistance(d));
    }
    let mean = noise.p0 - 10.0 * noise.pathloss_exponent * d.ln() / LN_10;
    let rx = mean + gaussian(rng, noise.sigma_rssi);
    let fp = mean + gaussian(rng, noise.sigma_rssi);
    Ok(if los {
        (rx, fp)
    } else {
        (rx - noise.nlos_atten, fp - 2.0 * noise.nlos_atten)
    })
}

/// Keeps a label with probability `ident_rate`, flips it otherwise.
pub fn degrade_label(true_los: bool, ident_rate: f64, rng: &mut impl Rng) -> bool {
    let keep = rng.gen::<f64>() < ident_rate;
    if keep {
        true_los
    } else {
        !true_los
    }
}

pub fn degrade_labels(true_los: &[bool], ident_rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    true_los.iter().map(|&l| degrade_label(l, ident_rate, rng)).collect()
}

/// How LOS labels reach the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Degraded ground truth replaces the classifier.
    #[default]
    OracleDegraded,
    /// Frames go through the trained SVM.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub waypoints: Vec<[f64; 2]>,
    /// Speed along the path (m/s).
    pub speed: f64,
    /// Number of loops around the closed waypoint polygon.
    #[serde(default)]
    pub laps: Option<f64>,
    /// Run length in seconds; overrides `laps` when both are set.
    #[serde(default)]
    pub duration: Option<f64>,
}

impl AgentSpec {
    /// Length of one closed loop.
    pub fn perimeter(&self) -> f64 {
        let n = self.waypoints.len();
        (0..n)
            .map(|i| dist(self.waypoints[i], self.waypoints[(i + 1) % n]))
            .sum()
    }

    /// Duration of one lap (s), if the path has nonzero length.
    pub fn lap_duration(&self) -> Option<f64> {
        let p = self.perimeter();
        (p > 0.0).then(|| p / self.speed)
    }

    pub fn duration(&self) -> f64 {
        match (self.duration, self.laps) {
            (Some(d), _) => d,
            (None, Some(l)) => l * self.lap_duration().unwrap_or(0.0),
            (None, None) => 0.0,
        }
    }

    /// Position after travelling `s` meters around the loop.
    pub fn position_at(&self, s: f64) -> [f64; 2] {
        let n = self.waypoints.len();
        let perimeter = self.perimeter();
        if n == 1 || perimeter == 0.0 {
            return self.waypoints[0];
        }
        let mut s = s.rem_euclid(perimeter);
        for i in 0..n {
            let a = self.waypoints[i];
            let b = self.waypoints[(i + 1) % n];
            let len = dist(a, b);
            if s <= len && len > 0.0 {
                let f = s / len;
                return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
            }
            s -= len;
        }
        self.waypoints[0]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub bounds: Rect,
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    pub agents: Vec<AgentSpec>,
    /// Sampling rate (Hz).
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseParams,
    /// Probability that a presented label matches the truth.
    #[serde(default = "default_ident_rate")]
    pub ident_rate: f64,
    #[serde(default)]
    pub mode: LabelMode,
}

fn default_ident_rate() -> f64 {
    1.0
}

impl Scenario {
    /// 20 x 20 m area, anchors at the corners, a central 10 x 10 m obstacle and
    /// one agent looping twice around a 15 x 15 m square at 2.5 m/s, 50 Hz.
    pub fn central_obstacle(ident_rate: f64, seed: u64) -> Self {
        Self {
            bounds: Rect::new([0.0, 0.0], [20.0, 20.0]),
            anchors: vec![
                Anchor { id: 1, position: [0.0, 0.0] },
                Anchor { id: 2, position: [20.0, 0.0] },
                Anchor { id: 3, position: [20.0, 20.0] },
                Anchor { id: 4, position: [0.0, 20.0] },
            ],
            obstacles: vec![Rect::new([5.0, 5.0], [15.0, 15.0])],
            agents: vec![AgentSpec {
                waypoints: vec![[2.5, 2.5], [17.5, 2.5], [17.5, 17.5], [2.5, 17.5]],
                speed: 2.5,
                laps: Some(2.0),
                duration: None,
            }],
            rate: 50.0,
            seed,
            noise: NoiseParams::default(),
            ident_rate,
            mode: LabelMode::OracleDegraded,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn anchor_config(&self) -> Result<AnchorConfig, SimError> {
        AnchorConfig::new(self.anchors.clone()).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !self.bounds.is_valid() {
            return bad("bounds must have min < max".into());
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad(format!("rate {} must be positive", self.rate));
        }
        if !(0.0..=1.0).contains(&self.ident_rate) {
            return bad(format!("ident_rate {} outside [0, 1]", self.ident_rate));
        }
        if self.anchors.is_empty() {
            return bad("no anchors".into());
        }
        self.anchor_config()?;
        for a in &self.anchors {
            if !self.bounds.contains_closed(a.position) {
                return bad(format!("anchor {} lies outside the bounds", a.id));
            }
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            if !o.is_valid() {
                return bad(format!("obstacle {k} must have min < max"));
            }
            if !self.bounds.contains_rect(o) {
                return bad(format!("obstacle {k} lies outside the bounds"));
            }
        }
        if self.agents.is_empty() {
            return bad("no agents".into());
        }
        for (k, agent) in self.agents.iter().enumerate() {
            if agent.waypoints.is_empty() {
                return bad(format!("agent {k} has no waypoints"));
            }
            if !(agent.speed > 0.0 && agent.speed.is_finite()) {
                return bad(format!("agent {k} speed {} must be positive", agent.speed));
            }
            if let Some(w) = agent.waypoints.iter().find(|w| !self.bounds.contains_closed(**w)) {
                return bad(format!("agent {k} waypoint {w:?} lies outside the bounds"));
            }
            if agent.laps.is_none() && agent.duration.is_none() {
                return bad(format!("agent {k} needs `laps` or `duration`"));
            }
            let d = agent.duration();
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("agent {k} has invalid run length {d}"));
            }
        }
        self.noise.validate()
    }
}

/// One anchor's synthetic measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub frame: UwbFrame,
    pub true_los: bool,
    pub presented_los: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub agent: usize,
    pub timestamp: f64,
    pub true_pose: [f64; 2],
    pub measurements: Vec<Measurement>,
}

// Near-field floor for the path-loss model.
const MIN_RSSI_DISTANCE: f64 = 0.1;

struct AgentStream {
    noise_rng: ChaCha8Rng,
    label_rng: ChaCha8Rng,
    frames: usize,
}

/// Generates all frames, ordered by tick and then by agent index.
pub fn run(scenario: &Scenario) -> Result<Vec<SyntheticFrame>, SimError> {
    scenario.validate()?;
    let mut streams: Vec<AgentStream> = scenario
        .agents
        .iter()
        .enumerate()
        .map(|(k, agent)| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            noise_rng.set_stream(2 * k as u64);
            let mut label_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            label_rng.set_stream(2 * k as u64 + 1);
            AgentStream {
                noise_rng,
                label_rng,
                frames: (agent.duration() * scenario.rate).round() as usize,
            }
        })
        .collect();

    let ticks = streams.iter().map(|s| s.frames).max().unwrap_or(0);
    let mut out = Vec::with_capacity(streams.iter().map(|s| s.frames).sum());
    for tick in 0..ticks {
        let t = tick as f64 / scenario.rate;
        for (k, (agent, stream)) in scenario.agents.iter().zip(streams.iter_mut()).enumerate() {
            if tick >= stream.frames {
                continue;
            }
            let pose = agent.position_at(agent.speed * t);
            let mut measurements = Vec::with_capacity(scenario.anchors.len());
            for anchor in &scenario.anchors {
                let true_los = los_ground_truth(pose, anchor.position, &scenario.obstacles);
                let d_true = dist(pose, anchor.position);
                let d = synthesize_range(d_true, true_los, &scenario.noise, &mut stream.noise_rng);
                let (rx, fp) = synthesize_rssi(
                    d_true.max(MIN_RSSI_DISTANCE),
                    true_los,
                    &scenario.noise,
                    &mut stream.noise_rng,
                )?;
                let presented_los = degrade_label(true_los, scenario.ident_rate, &mut stream.label_rng);
                measurements.push(Measurement {
                    frame: UwbFrame {
                        anchor_id: anchor.id,
                        timestamp: t,
                        d,
                        rx,
                        fp,
                    },
                    true_los,
                    presented_los,
                });
            }
            out.push(SyntheticFrame {
                agent: k,
                timestamp: t,
                true_pose: pose,
                measurements,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn los_examples() {
        assert!(los_ground_truth([0.0, 0.0], [10.0, 10.0], &[]));
        let r = Rect::new([4.0, 4.0], [6.0, 6.0]);
        assert!(!los_ground_truth([0.0, 0.0], [10.0, 10.0], &[r]));
        // grazing the bottom edge
        assert!(los_ground_truth([0.0, 4.0], [10.0, 4.0], &[r]));
        // touching a corner only
        assert!(los_ground_truth([0.0, 8.0], [8.0, 0.0], &[Rect::new([4.0, 4.0], [6.0, 6.0])]));
        // segment ending before the obstacle
        assert!(los_ground_truth([0.0, 5.0], [3.9, 5.0], &[r]));
        // vertical segment through the middle
        assert!(!los_ground_truth([5.0, 0.0], [5.0, 10.0], &[r]));
    }

    #[test]
    fn zero_noise_range() {
        let noise = NoiseParams::noiseless();
        assert_eq!(synthesize_range(3.7, true, &noise, &mut rng()), 3.7);
    }

    #[test]
    fn nlos_range_is_biased_up() {
        let noise = NoiseParams {
            sigma_nlos: 0.0,
            ..NoiseParams::default()
        };
        let mut r = rng();
        for _ in 0..1000 {
            assert!(synthesize_range(5.0, false, &noise, &mut r) >= 5.0);
        }
    }

    #[test]
    fn rssi_examples() {
        let noise = NoiseParams::noiseless();
        let (rx, fp) = synthesize_rssi(1.0, true, &noise, &mut rng()).unwrap();
        assert_eq!((rx, fp), (noise.p0, noise.p0));
        let (rx, fp) = synthesize_rssi(4.0, false, &noise, &mut rng()).unwrap();
        assert!((fp - rx + 10.0).abs() < 1e-12);
        let (rx, _) = synthesize_rssi(10.0, true, &noise, &mut rng()).unwrap();
        assert!((rx + 60.0).abs() < 1e-12);
        assert!(matches!(
            synthesize_rssi(0.0, true, &noise, &mut rng()),
            Err(SimError::NonPositiveDistance(_))
        ));
    }

    #[test]
    fn degradation_extremes() {
        let labels = [true, false, false, true, true];
        assert_eq!(degrade_labels(&labels, 1.0, &mut rng()), labels);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        assert_eq!(degrade_labels(&labels, 0.0, &mut rng()), flipped);
    }

    #[test]
    fn stationary_agent() {
        let mut s = Scenario::central_obstacle(1.0, 0);
        s.rate = 1.0;
        s.agents = vec![AgentSpec {
            waypoints: vec![[3.0, 3.0]],
            speed: 1.0,
            laps: None,
            duration: Some(3.0),
        }];
        let frames = run(&s).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.true_pose == [3.0, 3.0]));
    }

    #[test]
    fn one_lap_frame_count() {
        let mut s = Scenario::central_obstacle(1.0, 0);
        s.agents[0].laps = Some(1.0);
        assert_eq!(s.agents[0].perimeter(), 60.0);
        assert_eq!(run(&s).unwrap().len(), 1200);
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = Scenario::central_obstacle(1.0, 0);
        s.agents[0].waypoints.push([25.0, 1.0]);
        assert!(matches!(run(&s), Err(SimError::InvalidScenario(_))));

        let mut s = Scenario::central_obstacle(1.0, 0);
        s.rate = 0.0;
        assert!(s.validate().is_err());

        let mut s = Scenario::central_obstacle(1.0, 0);
        s.agents[0].speed = 0.0;
        assert!(s.validate().is_err());

        let mut s = Scenario::central_obstacle(1.0, 0);
        s.obstacles.push(Rect::new([18.0, 18.0], [22.0, 22.0]));
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let s = Scenario::central_obstacle(0.8, 7);
        let back = Scenario::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        assert!(Scenario::from_toml("rate = 50.0\nunknown = 1\n").is_err());
    }
}
