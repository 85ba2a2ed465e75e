//! Reward regimes and the decaying human-feedback trace.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POSITIVE_FEEDBACK: f64 = 1.0;
pub const NEGATIVE_FEEDBACK: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Fixed,
    Relative,
    HumanOnly,
    FixedPlusHuman,
}

impl RewardMode {
    pub const ALL: [RewardMode; 4] =
        [RewardMode::Fixed, RewardMode::Relative, RewardMode::HumanOnly, RewardMode::FixedPlusHuman];

    pub fn uses_human(self) -> bool {
        matches!(self, RewardMode::HumanOnly | RewardMode::FixedPlusHuman)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Fixed => "fixed",
            RewardMode::Relative => "relative",
            RewardMode::HumanOnly => "human_only",
            RewardMode::FixedPlusHuman => "fixed_plus_human",
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fixed" => Ok(RewardMode::Fixed),
            "relative" => Ok(RewardMode::Relative),
            "human_only" | "human" => Ok(RewardMode::HumanOnly),
            "fixed_plus_human" | "fixed+human" => Ok(RewardMode::FixedPlusHuman),
            other => Err(Error::Config(format!("unknown reward mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackOrigin {
    Human,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    /// Step at which the event is applied.
    pub step: u64,
    pub value: f64,
    pub source: FeedbackOrigin,
}

pub fn is_legal_feedback(value: f64) -> bool {
    value == POSITIVE_FEEDBACK || value == NEGATIVE_FEEDBACK
}

impl FeedbackEvent {
    pub fn new(step: u64, value: f64, source: FeedbackOrigin) -> Result<Self> {
        if !is_legal_feedback(value) {
            return Err(Error::IllegalFeedback(value));
        }
        Ok(FeedbackEvent { step, value, source })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub mode: RewardMode,
    pub deviation_threshold: f64,
    pub human_decay: f64,
    pub human_trace: f64,
}

impl RewardSpec {
    pub fn new(mode: RewardMode, deviation_threshold: f64, human_decay: f64) -> Result<Self> {
        if !(deviation_threshold > 0.0) {
            return Err(Error::Config("deviation threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&human_decay) {
            return Err(Error::Config(format!("human decay {human_decay} outside [0,1)")));
        }
        Ok(RewardSpec { mode, deviation_threshold, human_decay, human_trace: 0.0 })
    }
}

/// +1 within the threshold (inclusive), -0.5 otherwise.
pub fn reward_fixed(theta: f64, theta_t: f64, spec: &RewardSpec) -> f64 {
    if (theta - theta_t).abs() <= spec.deviation_threshold {
        1.0
    } else {
        -0.5
    }
}

/// +1 within the threshold (inclusive), minus the absolute error otherwise.
pub fn reward_relative(theta: f64, theta_t: f64, spec: &RewardSpec) -> f64 {
    let err = (theta - theta_t).abs();
    if err <= spec.deviation_threshold {
        1.0
    } else {
        -err
    }
}

/// Advances the human trace by one step: `trace' = decay·trace + Σ events`.
/// Illegal event values are dropped with a warning.
pub fn human_trace_step(spec: &RewardSpec, events: &[FeedbackEvent]) -> (f64, RewardSpec) {
    let pressed: f64 = events
        .iter()
        .filter(|e| {
            let ok = is_legal_feedback(e.value);
            if !ok {
                warn!("dropping feedback event with illegal value {} at step {}", e.value, e.step);
            }
            ok
        })
        .map(|e| e.value)
        .sum();
    let trace = spec.human_decay * spec.human_trace + pressed;
    (trace, RewardSpec { human_trace: trace, ..spec.clone() })
}

pub fn total_reward(mode: RewardMode, r_env: f64, r_human: f64) -> f64 {
    match mode {
        RewardMode::Fixed | RewardMode::Relative => r_env,
        RewardMode::HumanOnly => r_human,
        RewardMode::FixedPlusHuman => r_env + r_human,
    }
}

/// Per-step reward breakdown as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    /// Environment term (r_fixed or r_relative per mode), absent for human-only.
    pub env: Option<f64>,
    /// Human trace value, absent for environment-only modes.
    pub human: Option<f64>,
    pub total: f64,
}

/// Stateful reward computation for one trial.
#[derive(Clone, Debug)]
pub struct RewardChannel {
    spec: RewardSpec,
}

impl RewardChannel {
    pub fn new(spec: RewardSpec) -> Self {
        RewardChannel { spec }
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn human_trace(&self) -> f64 {
        self.spec.human_trace
    }

    /// Computes this step's reward. Feedback only touches the trace in human modes.
    pub fn step(&mut self, theta: f64, theta_t: f64, events: &[FeedbackEvent]) -> RewardComponents {
        let mode = self.spec.mode;
        let env = match mode {
            RewardMode::Fixed | RewardMode::FixedPlusHuman => Some(reward_fixed(theta, theta_t, &self.spec)),
            RewardMode::Relative => Some(reward_relative(theta, theta_t, &self.spec)),
            RewardMode::HumanOnly => None,
        };
        let human = if mode.uses_human() {
            let (r_h, next) = human_trace_step(&self.spec, events);
            self.spec = next;
            Some(r_h)
        } else {
            None
        };
        RewardComponents { env, human, total: total_reward(mode, env.unwrap_or(0.0), human.unwrap_or(0.0)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Mean number of steps between presses.
    pub period: f64,
    /// Probability a press has its polarity flipped.
    pub noise_p: f64,
    pub deviation_threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { period: 33.0, noise_p: 0.1, deviation_threshold: 0.1 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.period >= 1.0) {
            return Err(Error::Config("oracle period must be >= 1 step".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(Error::Config("oracle noise_p must lie in [0,1]".into()));
        }
        if !(self.deviation_threshold > 0.0) {
            return Err(Error::Config("oracle deviation threshold must be positive".into()));
        }
        Ok(())
    }
}

/// The press a consistent trainer would make: positive when on target or
/// improving, negative otherwise.
pub fn oracle_judgement(error: f64, prev_error: Option<f64>, threshold: f64) -> f64 {
    let improving = prev_error.is_some_and(|prev| error < prev);
    if error <= threshold || improving {
        POSITIVE_FEEDBACK
    } else {
        NEGATIVE_FEEDBACK
    }
}

/// One oracle decision. Fires with probability `1/period`; when it fires the
/// judgement is inverted with probability `noise_p`.
pub fn oracle_feedback<R: Rng + ?Sized>(
    step: u64,
    theta: f64,
    theta_t: f64,
    prev_error: Option<f64>,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Option<FeedbackEvent> {
    // Both draws are taken every step so the stream position is independent of outcomes.
    let fire = rng.random::<f64>() < 1.0 / cfg.period;
    let flip = rng.random::<f64>() < cfg.noise_p;
    if !fire {
        return None;
    }
    let judged = oracle_judgement((theta - theta_t).abs(), prev_error, cfg.deviation_threshold);
    let value = match (judged == POSITIVE_FEEDBACK, flip) {
        (true, false) | (false, true) => POSITIVE_FEEDBACK,
        _ => NEGATIVE_FEEDBACK,
    };
    Some(FeedbackEvent { step, value, source: FeedbackOrigin::Oracle })
}

/// Scripted trainer that remembers the error at its last press.
#[derive(Clone, Debug)]
pub struct Oracle<R> {
    cfg: OracleConfig,
    rng: R,
    last_error: Option<f64>,
}

impl<R: Rng> Oracle<R> {
    pub fn new(cfg: OracleConfig, rng: R) -> Result<Self> {
        cfg.validate()?;
        Ok(Oracle { cfg, rng, last_error: None })
    }

    pub fn observe(&mut self, step: u64, theta: f64, theta_t: f64) -> Option<FeedbackEvent> {
        let event = oracle_feedback(step, theta, theta_t, self.last_error, &self.cfg, &mut self.rng);
        if event.is_some() {
            self.last_error = Some((theta - theta_t).abs());
        }
        event
    }
}
