//! EMG control channel: exponential smoothing of a rectified raw signal and
//! the sources that feed it.

use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::TrajectoryConfig;
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmgState {
    pub s_emg: f64,
    pub tau: f64,
}

impl EmgState {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("EMG time constant {tau} outside (0,1]")));
        }
        Ok(EmgState { s_emg: 0.0, tau })
    }
}

impl Default for EmgState {
    fn default() -> Self {
        EmgState { s_emg: 0.0, tau: DEFAULT_TAU }
    }
}

/// `s(t+1) = (1 - τ)·s(t) + τ·|raw(t)|`
pub fn smooth_emg(state: EmgState, s_raw: f64) -> EmgState {
    EmgState { s_emg: (1.0 - state.tau) * state.s_emg + state.tau * s_raw.abs(), tau: state.tau }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimEmgConfig {
    pub level_lo: f64,
    pub level_hi: f64,
    pub noise_std: f64,
}

impl Default for SimEmgConfig {
    fn default() -> Self {
        SimEmgConfig { level_lo: 0.1, level_hi: 0.8, noise_std: 0.1 }
    }
}

impl SimEmgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.level_lo && self.level_lo < self.level_hi && self.level_hi <= 1.0) {
            return Err(Error::Config("simulated EMG needs 0 <= level_lo < level_hi <= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("EMG noise std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Noisy estimate of the target phase, clamped to `[0,1]`.
pub fn simulated_emg_raw<R: Rng + ?Sized>(phase: f64, cfg: &SimEmgConfig, rng: &mut R) -> f64 {
    let base = cfg.level_lo + phase.clamp(0.0, 1.0) * (cfg.level_hi - cfg.level_lo);
    let noise = if cfg.noise_std > 0.0 {
        // noise_std validated finite and positive
        Normal::new(0.0, cfg.noise_std).map(|n| n.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    };
    (base + noise).clamp(0.0, 1.0)
}

/// Anything that yields one raw EMG sample per learner step.
pub trait EmgSource: Send {
    fn next_raw(&mut self, t: u64) -> Result<f64>;
}

/// Raw samples derived from the target trajectory.
pub struct SimulatedEmg<R> {
    cfg: SimEmgConfig,
    trajectory: TrajectoryConfig,
    rng: R,
}

impl<R: Rng + Send> SimulatedEmg<R> {
    pub fn new(cfg: SimEmgConfig, trajectory: TrajectoryConfig, rng: R) -> Result<Self> {
        cfg.validate()?;
        Ok(SimulatedEmg { cfg, trajectory, rng })
    }
}

impl<R: Rng + Send> EmgSource for SimulatedEmg<R> {
    fn next_raw(&mut self, t: u64) -> Result<f64> {
        let phase = self.trajectory.phase_level(t);
        Ok(simulated_emg_raw(phase, &self.cfg, &mut self.rng))
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ReplayRow {
    s_raw: f64,
}

/// Plays back a recorded trace, one sample per step.
#[derive(Clone, Debug)]
pub struct ReplayEmg {
    samples: Vec<f64>,
    cursor: usize,
}

impl ReplayEmg {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("replay trace holds non-finite sample {bad}")));
        }
        Ok(ReplayEmg { samples, cursor: 0 })
    }

    /// Reads a CSV with an `s_raw` column.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let samples = reader
            .deserialize::<ReplayRow>()
            .map(|row| row.map(|r| r.s_raw))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn write_replay_csv(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for &s_raw in samples {
        writer.serialize(ReplayRow { s_raw })?;
    }
    writer.flush()?;
    Ok(())
}

impl EmgSource for ReplayEmg {
    fn next_raw(&mut self, t: u64) -> Result<f64> {
        let v = self.samples.get(self.cursor).copied().ok_or(Error::SourceExhausted { step: t })?;
        self.cursor += 1;
        Ok(v)
    }
}

/// Shared slot holding the most recent live sample. Writers push from any
/// thread; the trial loop reads without blocking on I/O.
#[derive(Clone, Debug, Default)]
pub struct LatestSample(Arc<Mutex<f64>>);

impl LatestSample {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, s_raw: f64) {
        if s_raw.is_finite() {
            *self.0.lock().unwrap_or_else(|p| p.into_inner()) = s_raw;
        }
    }

    pub fn latest(&self) -> f64 {
        *self.0.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Live source: returns the latest pushed sample divided by a declared
/// calibration maximum.
#[derive(Clone, Debug)]
pub struct LiveEmg {
    slot: LatestSample,
    calibration_max: f64,
}

impl LiveEmg {
    pub fn new(slot: LatestSample, calibration_max: f64) -> Result<Self> {
        if !(calibration_max > 0.0 && calibration_max.is_finite()) {
            return Err(Error::Config("live EMG needs a positive calibration maximum".into()));
        }
        Ok(LiveEmg { slot, calibration_max })
    }
}

impl EmgSource for LiveEmg {
    fn next_raw(&mut self, _t: u64) -> Result<f64> {
        Ok(self.slot.latest() / self.calibration_max)
    }
}
