//! Per-anchor UWB preprocessing: normalization against training statistics,
//! 3-sigma exception filtering over a sliding window, and weighted moving
//! average smoothing.
//!
//! All window statistics are kept over normalized values. Smoothed output is
//! reported both normalized (classifier input) and as a range in meters
//! (localizer input).

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channel names in storage order.
pub const CHANNEL_NAMES: [&str; 3] = ["d", "rx", "fp"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("dataset is empty or has fewer than 2 frames")]
    EmptyDataset,
    #[error("channel `{0}` has zero variance")]
    DegenerateChannel(&'static str),
    #[error("window holds {have} entries, smoothing needs {need}")]
    InsufficientHistory { have: usize, need: usize },
    #[error("invalid smoothing weights: {0}")]
    InvalidWeights(String),
    #[error("invalid channel statistics: {0}")]
    InvalidStats(String),
    #[error("window capacity must be at least 1")]
    ZeroCapacity,
}

/// A (d, rx, fp) triple. Raw frames carry meters and dBm, normalized frames
/// are unitless.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Channels(pub [f64; 3]);

impl Channels {
    pub fn new(d: f64, rx: f64, fp: f64) -> Self {
        Self([d, rx, fp])
    }

    pub fn d(&self) -> f64 {
        self.0[0]
    }

    pub fn rx(&self) -> f64 {
        self.0[1]
    }

    pub fn fp(&self) -> f64 {
        self.0[2]
    }
}

/// One anchor's measurement at a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UwbFrame {
    pub anchor_id: u32,
    pub timestamp: f64,
    /// Range in meters.
    pub d: f64,
    /// Total received power, dBm.
    pub rx: f64,
    /// First-path power, dBm.
    pub fp: f64,
}

impl UwbFrame {
    pub fn channels(&self) -> Channels {
        Channels::new(self.d, self.rx, self.fp)
    }
}

/// Per-channel mean and standard deviation of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

impl ChannelStats {
    pub fn new(mu: [f64; 3], sigma: [f64; 3]) -> Result<Self, SensorError> {
        for (i, (&m, &s)) in mu.iter().zip(sigma.iter()).enumerate() {
            if !m.is_finite() {
                return Err(SensorError::InvalidStats(format!(
                    "mean of `{}` is not finite",
                    CHANNEL_NAMES[i]
                )));
            }
            if !(s > 0.0 && s.is_finite()) {
                return Err(SensorError::DegenerateChannel(CHANNEL_NAMES[i]));
            }
        }
        Ok(Self { mu, sigma })
    }

    /// Stats that leave values untouched (mean 0, std 1).
    pub fn identity() -> Self {
        Self {
            mu: [0.0; 3],
            sigma: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        Self::new(self.mu, self.sigma).map(|_| ())
    }
}

/// Sample mean and sample standard deviation of each channel.
pub fn compute_stats(frames: &[UwbFrame]) -> Result<ChannelStats, SensorError> {
    if frames.len() < 2 {
        return Err(SensorError::EmptyDataset);
    }
    // Welford accumulation
    let mut mean = [0.0f64; 3];
    let mut m2 = [0.0f64; 3];
    for (k, frame) in frames.iter().enumerate() {
        let x = frame.channels().0;
        let n = (k + 1) as f64;
        for c in 0..3 {
            let delta = x[c] - mean[c];
            mean[c] += delta / n;
            m2[c] += delta * (x[c] - mean[c]);
        }
    }
    let denom = (frames.len() - 1) as f64;
    let mut sigma = [0.0; 3];
    for c in 0..3 {
        sigma[c] = (m2[c] / denom).sqrt();
    }
    ChannelStats::new(mean, sigma)
}

pub fn normalize(frame: &UwbFrame, stats: &ChannelStats) -> Channels {
    normalize_channels(frame.channels(), stats)
}

pub fn normalize_channels(raw: Channels, stats: &ChannelStats) -> Channels {
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (raw.0[c] - stats.mu[c]) / stats.sigma[c];
    }
    Channels(out)
}

pub fn denormalize(norm: Channels, stats: &ChannelStats) -> Channels {
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = norm.0[c] * stats.sigma[c] + stats.mu[c];
    }
    Channels(out)
}

/// Newest-first moving-average weights: positive, strictly decreasing, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingWeights {
    k: Vec<f64>,
}

impl SmoothingWeights {
    pub fn new(k: Vec<f64>) -> Result<Self, SensorError> {
        if k.is_empty() {
            return Err(SensorError::InvalidWeights("no weights".into()));
        }
        if k.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(SensorError::InvalidWeights("weights must be positive".into()));
        }
        if k.windows(2).any(|p| p[0] <= p[1]) {
            return Err(SensorError::InvalidWeights(
                "weights must be strictly decreasing".into(),
            ));
        }
        let sum: f64 = k.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SensorError::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self { k })
    }

    /// `n` weights proportional to `ratio^i`, renormalized to sum to one.
    pub fn geometric(n: usize, ratio: f64) -> Result<Self, SensorError> {
        if n == 0 {
            return Err(SensorError::InvalidWeights("no weights".into()));
        }
        if n > 1 && !(ratio > 0.0 && ratio < 1.0) {
            return Err(SensorError::InvalidWeights(format!(
                "geometric ratio {ratio} must lie in (0, 1)"
            )));
        }
        let raw: Vec<f64> = (0..n).map(|i| ratio.powi(i as i32)).collect();
        let sum: f64 = raw.iter().sum();
        Self::new(raw.into_iter().map(|w| w / sum).collect())
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.k
    }
}

/// Last `capacity` normalized frames of one anchor, newest at the back, with
/// running per-channel mean and sample standard deviation.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    capacity: usize,
    entries: VecDeque<Channels>,
    mu: [f64; 3],
    sigma: [f64; 3],
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Result<Self, SensorError> {
        if capacity == 0 {
            return Err(SensorError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            mu: [0.0; 3],
            sigma: [0.0; 3],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &Channels> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mu
    }

    pub fn std_dev(&self) -> [f64; 3] {
        self.sigma
    }

    pub fn push(&mut self, value: Channels) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(value);
        self.recompute();
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.mu = [0.0; 3];
        self.sigma = [0.0; 3];
    }

    // N_W is small, so a full recount per push keeps the stats exact.
    fn recompute(&mut self) {
        let n = self.entries.len();
        let mut mu = [0.0; 3];
        for e in &self.entries {
            for c in 0..3 {
                mu[c] += e.0[c];
            }
        }
        for m in &mut mu {
            *m /= n as f64;
        }
        let mut sigma = [0.0; 3];
        if n >= 2 {
            for e in &self.entries {
                for c in 0..3 {
                    let dev = e.0[c] - mu[c];
                    sigma[c] += dev * dev;
                }
            }
            for s in &mut sigma {
                *s = (*s / (n - 1) as f64).sqrt();
            }
        }
        self.mu = mu;
        self.sigma = sigma;
    }
}

/// 3-sigma gate: accepts iff every channel lies in the closed interval
/// `[mu_w - 3 sigma_w, mu_w + 3 sigma_w]`. Windows with fewer than two
/// entries accept unconditionally.
pub fn exception_filter(window: &SlidingWindow, frame: &Channels) -> bool {
    if window.len() < 2 {
        return true;
    }
    (0..3).all(|c| (frame.0[c] - window.mu[c]).abs() <= 3.0 * window.sigma[c])
}

/// Weighted moving average, `k[0]` applied to the newest entry.
pub fn smooth(window: &SlidingWindow, weights: &SmoothingWeights) -> Result<Channels, SensorError> {
    let need = weights.len();
    if window.len() < need {
        return Err(SensorError::InsufficientHistory {
            have: window.len(),
            need,
        });
    }
    let mut out = [0.0; 3];
    for (w, e) in weights.as_slice().iter().zip(window.entries.iter().rev()) {
        for c in 0..3 {
            out[c] += w * e.0[c];
        }
    }
    Ok(Channels(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorParams {
    /// Window length N_W in frames.
    pub window: usize,
    /// Number of smoothing taps N_S.
    pub taps: usize,
    /// Geometric ratio between consecutive smoothing weights.
    pub ratio: f64,
    /// Consecutive rejections after which an anchor's window is restarted.
    pub max_consecutive_rejects: usize,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            window: 20,
            taps: 5,
            ratio: 0.7,
            max_consecutive_rejects: 5,
        }
    }
}

/// Result of pushing one raw frame through an anchor's pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameOutcome {
    /// Dropped by the exception filter.
    Rejected,
    /// Accepted, but the window is still shorter than the smoothing kernel.
    Warming,
    Smoothed(SmoothedFrame),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedFrame {
    pub anchor_id: u32,
    pub timestamp: f64,
    /// Smoothed value in normalized units.
    pub normalized: Channels,
    /// Smoothed range converted back to meters.
    pub range: f64,
}

#[derive(Debug, Clone)]
struct AnchorState {
    window: SlidingWindow,
    rejects: usize,
}

/// Independent sliding windows for every anchor seen so far.
#[derive(Debug, Clone)]
pub struct SensorPipeline {
    stats: ChannelStats,
    weights: SmoothingWeights,
    params: SensorParams,
    anchors: BTreeMap<u32, AnchorState>,
}

impl SensorPipeline {
    pub fn new(stats: ChannelStats, params: SensorParams) -> Result<Self, SensorError> {
        stats.validate()?;
        if params.window == 0 {
            return Err(SensorError::ZeroCapacity);
        }
        let weights = SmoothingWeights::geometric(params.taps, params.ratio)?;
        if weights.len() > params.window {
            return Err(SensorError::InvalidWeights(format!(
                "{} taps exceed window of {}",
                weights.len(),
                params.window
            )));
        }
        Ok(Self {
            stats,
            weights,
            params,
            anchors: BTreeMap::new(),
        })
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn window(&self, anchor_id: u32) -> Option<&SlidingWindow> {
        self.anchors.get(&anchor_id).map(|a| &a.window)
    }

    pub fn process(&mut self, frame: &UwbFrame) -> FrameOutcome {
        let norm = normalize(frame, &self.stats);
        let capacity = self.params.window;
        let state = self.anchors.entry(frame.anchor_id).or_insert_with(|| AnchorState {
            window: SlidingWindow::new(capacity).expect("capacity checked at construction"),
            rejects: 0,
        });
        if !exception_filter(&state.window, &norm) {
            state.rejects += 1;
            if state.rejects < self.params.max_consecutive_rejects.max(1) {
                return FrameOutcome::Rejected;
            }
            // A persistent level shift (e.g. entering NLOS) would otherwise lock
            // the window out forever; restart it from the current frame.
            state.window.clear();
        }
        state.rejects = 0;
        state.window.push(norm);
        match smooth(&state.window, &self.weights) {
            Ok(normalized) => FrameOutcome::Smoothed(SmoothedFrame {
                anchor_id: frame.anchor_id,
                timestamp: frame.timestamp,
                normalized,
                range: denormalize(normalized, &self.stats).d(),
            }),
            Err(_) => FrameOutcome::Warming,
        }
    }
}
