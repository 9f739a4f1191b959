//! The loss-trend controller steering the model-driven / input-driven
//! weight pair `(W_m, W_I)`.
//!
//! Measurer: weighted ratio of the recent loss window to the older window.
//! Sensor: piecewise response to that ratio. Adjuster: multiplicative
//! update followed by renormalisation, so the pair always sums to one.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounded history of recent losses, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMemory {
    capacity: usize,
    losses: VecDeque<f64>,
}

impl LossMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            losses: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, loss: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.losses.len() == self.capacity {
            self.losses.pop_back();
        }
        self.losses.push_front(loss);
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `loss_{t-1}, loss_{t-2}, …`
    pub fn newest_first(&self) -> impl Iterator<Item = f64> + '_ {
        self.losses.iter().copied()
    }

    pub fn clear(&mut self) {
        self.losses.clear();
    }
}

/// Window sizes and averaging weights of the measurer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurerConfig {
    recent: usize,
    total: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

/// Linearly decaying weights `2(m+1-i) / (m(m+1))`, `i = 1..=m`.
fn decaying_weights(m: usize) -> Vec<f64> {
    let denom = (m * (m + 1)) as f64;
    (1..=m).map(|i| 2.0 * (m + 1 - i) as f64 / denom).collect()
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} weights sum to {sum}, expected 1")));
    }
    if w.len() >= 2 {
        let step = w[1] - w[0];
        if w.windows(2).any(|p| ((p[1] - p[0]) - step).abs() > 1e-9) {
            return Err(Error::Config(format!(
                "{name} weights must form an arithmetic progression"
            )));
        }
    }
    Ok(())
}

impl MeasurerConfig {
    /// Windows `n < N` with recency-weighted arithmetic weights on both
    /// windows.
    pub fn new(recent: usize, total: usize) -> Result<Self> {
        if recent == 0 || recent >= total {
            return Err(Error::Config(format!(
                "measurer windows need 0 < n < N, got n={recent}, N={total}"
            )));
        }
        Self::with_weights(recent, total, decaying_weights(recent), decaying_weights(total - recent))
    }

    pub fn with_weights(recent: usize, total: usize, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if recent == 0 || recent >= total {
            return Err(Error::Config(format!(
                "measurer windows need 0 < n < N, got n={recent}, N={total}"
            )));
        }
        if alpha.len() != recent || beta.len() != total - recent {
            return Err(Error::Config(format!(
                "expected {} alpha and {} beta weights, got {} and {}",
                recent,
                total - recent,
                alpha.len(),
                beta.len()
            )));
        }
        check_weights("alpha", &alpha)?;
        check_weights("beta", &beta)?;
        Ok(Self {
            recent,
            total,
            alpha,
            beta,
        })
    }

    pub fn recent(&self) -> usize {
        self.recent
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Positive momentum amplitude, applied on a flat or falling loss.
    pub pi_pma: f64,
    /// Negative momentum amplitude, applied on a rising loss.
    pub pi_nma: f64,
}

impl SensorConfig {
    pub fn new(pi_pma: f64, pi_nma: f64) -> Result<Self> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(pi_pma) || !open_unit(pi_nma) {
            return Err(Error::Config(format!(
                "momentum amplitudes must lie in (0, 1), got pma={pi_pma}, nma={pi_nma}"
            )));
        }
        Ok(Self { pi_pma, pi_nma })
    }
}

/// Loss trend `Δl`: recent weighted mean over older weighted mean.
pub fn measure(mem: &LossMemory, cfg: &MeasurerConfig) -> Result<f64> {
    if mem.len() < cfg.total {
        return Err(Error::InsufficientHistory {
            have: mem.len(),
            need: cfg.total,
        });
    }
    let losses: Vec<f64> = mem.newest_first().take(cfg.total).collect();
    let num: f64 = cfg.alpha.iter().zip(&losses[..cfg.recent]).map(|(a, l)| a * l).sum();
    let den: f64 = cfg.beta.iter().zip(&losses[cfg.recent..]).map(|(b, l)| b * l).sum();
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::DegenerateDenominator);
    }
    Ok(num / den)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weight change `Δw` for a loss trend. The boundary `Δl = 1` takes the
/// linear branch.
pub fn sense(delta_l: f64, cfg: &SensorConfig) -> f64 {
    if delta_l > 1.0 {
        cfg.pi_nma * sigmoid(delta_l - 1.0)
    } else {
        -cfg.pi_pma * delta_l
    }
}

/// Smallest weight the adjuster will report. Repeated same-sign updates
/// shrink one weight geometrically; without a floor the other rounds to
/// exactly 1.0 after a few dozen cycles.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Multiplicative update of `(W_m, W_I)` followed by sum-normalisation.
pub fn adjust(w_m: f64, w_i: f64, delta_w: f64) -> Result<(f64, f64)> {
    let m = w_m * (1.0 + delta_w);
    let i = w_i * (1.0 - delta_w);
    if !(m > 0.0 && i > 0.0) {
        return Err(Error::NonPositiveWeight { w_m: m, w_i: i });
    }
    let s = m + i;
    let (m, i) = (m / s, i / s);
    if m < WEIGHT_FLOOR {
        Ok((WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR))
    } else if i < WEIGHT_FLOOR {
        Ok((1.0 - WEIGHT_FLOOR, WEIGHT_FLOOR))
    } else {
        Ok((m, i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Recent window `n`.
    pub recent: usize,
    /// Total window `N`.
    pub total: usize,
    /// Update cycle `T_b`.
    pub cycle: usize,
    /// Iterations up to and including this one only seed the memory.
    /// `None` means `N`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
    pub pi_pma: f64,
    pub pi_nma: f64,
    /// `(W_m, W_I)` restored on every warm-up iteration.
    pub initial_weights: (f64, f64),
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            recent: 25,
            total: 75,
            cycle: 150,
            start: None,
            pi_pma: 0.33,
            pi_nma: 0.5,
            initial_weights: (0.8, 0.2),
        }
    }
}

/// One executed update cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub iteration: usize,
    pub loss: f64,
    pub delta_l: f64,
    pub delta_w: f64,
    pub w_m: f64,
    pub w_i: f64,
}

/// Controller state owned by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    w_m: f64,
    w_i: f64,
    iteration: usize,
    start: usize,
    cycle: usize,
    initial: (f64, f64),
    memory: LossMemory,
    measurer: MeasurerConfig,
    sensor: SensorConfig,
}

impl AdaptiveState {
    pub fn new(cfg: &AdaptiveConfig) -> Result<Self> {
        let measurer = MeasurerConfig::new(cfg.recent, cfg.total)?;
        let sensor = SensorConfig::new(cfg.pi_pma, cfg.pi_nma)?;
        if cfg.cycle == 0 {
            return Err(Error::Config("update cycle T_b must be positive".into()));
        }
        let (m, i) = cfg.initial_weights;
        if !(m > 0.0 && m < 1.0 && i > 0.0 && i < 1.0 && (m + i - 1.0).abs() <= 1e-9) {
            return Err(Error::Config(format!(
                "initial weights must lie in (0, 1) and sum to 1, got ({m}, {i})"
            )));
        }
        Ok(Self {
            w_m: m,
            w_i: i,
            iteration: 0,
            start: cfg.start.unwrap_or(cfg.total),
            cycle: cfg.cycle,
            initial: cfg.initial_weights,
            memory: LossMemory::new(cfg.total),
            measurer,
            sensor,
        })
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.w_m, self.w_i)
    }

    /// Index of the next call to [`step`](Self::step).
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn memory(&self) -> &LossMemory {
        &self.memory
    }

    /// Feeds one iteration's loss. Returns the update record when this
    /// iteration ran a weight update.
    pub fn step(&mut self, loss: f64) -> Option<UpdateRecord> {
        let t = self.iteration;
        self.iteration += 1;
        if t <= self.start {
            (self.w_m, self.w_i) = self.initial;
            self.memory.push(loss);
            return None;
        }
        self.memory.push(loss);
        if !t.is_multiple_of(self.cycle) {
            return None;
        }
        // a failed measurement holds the weights for this cycle
        let delta_l = measure(&self.memory, &self.measurer).ok()?;
        let delta_w = sense(delta_l, &self.sensor);
        let (w_m, w_i) = adjust(self.w_m, self.w_i, delta_w).ok()?;
        self.w_m = w_m;
        self.w_i = w_i;
        Some(UpdateRecord {
            iteration: t,
            loss,
            delta_l,
            delta_w,
            w_m,
            w_i,
        })
    }
}

pub const TRACE_HEADER: &str = "iteration,loss,delta_l,delta_w,w_m,w_i";

pub fn trace_csv(records: &[UpdateRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.loss, r.delta_l, r.delta_w, r.w_m, r.w_i
        );
    }
    out
}
