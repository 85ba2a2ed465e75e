//! Experiment orchestration: the per-step trial loop, seeded multi-trial
//! runs, tracking-error metrics and run logs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acrl::{Learner, LearnerParams};
use crate::env::{apply_action, normalize_state, target_angle, JointConfig, PlantState, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::funcapprox::{SparseFeatures, TileCoder, TileCoderConfig};
use crate::reward::{
    FeedbackEvent, FeedbackOrigin, Oracle, OracleConfig, RewardChannel, RewardComponents, RewardMode, RewardSpec,
};
use crate::signals::{smooth_emg, EmgSource, EmgState, ReplayEmg, SimEmgConfig, SimulatedEmg, DEFAULT_TAU};

/// RNG stream ids derived from a trial seed.
const STREAM_POLICY: u64 = 0;
const STREAM_EMG: u64 = 1;
const STREAM_FEEDBACK: u64 = 2;
const STREAM_ACTUATION: u64 = 3;

pub const INTERACTIVE_STEP: Duration = Duration::from_millis(30);

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pacing {
    /// As fast as possible.
    #[default]
    Fast,
    /// One step every ~30 ms (~33 Hz).
    Realtime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmgSourceConfig {
    Simulated(SimEmgConfig),
    Replay {
        path: PathBuf,
    },
    /// Samples pushed by a live client; raw values are divided by `calibration_max`.
    Live {
        calibration_max: f64,
    },
}

impl Default for EmgSourceConfig {
    fn default() -> Self {
        EmgSourceConfig::Simulated(SimEmgConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackConfig {
    None,
    Oracle(OracleConfig),
    /// CSV with columns `step,value`.
    Replay {
        path: PathBuf,
    },
    /// Presses arrive from the session bridge.
    Live,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig::Oracle(OracleConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: RewardMode,
    pub max_steps: u64,
    pub seeds: Vec<u64>,
    pub tile_coder: TileCoderConfig,
    pub learner: LearnerParams,
    pub joint: JointConfig,
    pub trajectory: TrajectoryConfig,
    pub emg_tau: f64,
    pub emg: EmgSourceConfig,
    pub feedback: FeedbackConfig,
    pub human_decay: f64,
    /// Starting joint angle; defaults to the trajectory's low plateau.
    pub initial_theta: Option<f64>,
    pub pacing: Pacing,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: RewardMode::Fixed,
            max_steps: 40_000,
            seeds: (0..10).collect(),
            tile_coder: TileCoderConfig::default(),
            learner: LearnerParams::default(),
            joint: JointConfig::default(),
            trajectory: TrajectoryConfig::default(),
            emg_tau: DEFAULT_TAU,
            emg: EmgSourceConfig::default(),
            feedback: FeedbackConfig::default(),
            human_decay: 0.01,
            initial_theta: None,
            pacing: Pacing::Fast,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.tile_coder.validate()?;
        if self.tile_coder.state_dims != 2 {
            return Err(Error::Config("the joint task uses a 2-dimensional state".into()));
        }
        self.learner.validate()?;
        self.joint.validate()?;
        self.trajectory.validate(&self.joint)?;
        if self.learner.action_limit != self.joint.action_limit {
            return Err(Error::Config(format!(
                "learner action limit {} disagrees with joint action limit {}",
                self.learner.action_limit, self.joint.action_limit
            )));
        }
        EmgState::new(self.emg_tau)?;
        RewardSpec::new(self.mode, self.joint.deviation_threshold, self.human_decay)?;
        match &self.emg {
            EmgSourceConfig::Simulated(c) => c.validate()?,
            EmgSourceConfig::Live { calibration_max } if !(*calibration_max > 0.0) => {
                return Err(Error::Config("live EMG needs a positive calibration maximum".into()))
            }
            _ => {}
        }
        if let FeedbackConfig::Oracle(c) = &self.feedback {
            c.validate()?;
        }
        if let Some(theta) = self.initial_theta {
            if !(self.joint.theta_min..=self.joint.theta_max).contains(&theta) {
                return Err(Error::Config(format!("initial angle {theta} outside joint limits")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads `.json` as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn with_mode(&self, mode: RewardMode) -> Self {
        ExperimentConfig { mode, ..self.clone() }
    }
}

/// Snapshot of what an external trainer can see after a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    /// Step whose reward the feedback will enter.
    pub step: u64,
    pub theta: f64,
    pub theta_t: f64,
}

/// Source of trainer feedback, polled once per step.
pub trait FeedbackSource: Send {
    fn poll(&mut self, obs: &Observation) -> Vec<FeedbackEvent>;
}

pub struct NoFeedback;

impl FeedbackSource for NoFeedback {
    fn poll(&mut self, _obs: &Observation) -> Vec<FeedbackEvent> {
        Vec::new()
    }
}

impl<R: rand::Rng + Send> FeedbackSource for Oracle<R> {
    fn poll(&mut self, obs: &Observation) -> Vec<FeedbackEvent> {
        self.observe(obs.step, obs.theta, obs.theta_t).into_iter().collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeedbackRow {
    step: u64,
    value: f64,
}

/// Presses replayed at fixed steps.
#[derive(Clone, Debug, Default)]
pub struct ScriptedFeedback {
    by_step: BTreeMap<u64, Vec<f64>>,
}

impl ScriptedFeedback {
    pub fn new(presses: impl IntoIterator<Item = (u64, f64)>) -> Result<Self> {
        let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (step, value) in presses {
            FeedbackEvent::new(step, value, FeedbackOrigin::Human)?;
            by_step.entry(step).or_default().push(value);
        }
        Ok(ScriptedFeedback { by_step })
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader
            .deserialize::<FeedbackRow>()
            .map(|r| r.map(|r| (r.step, r.value)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(rows)
    }
}

impl FeedbackSource for ScriptedFeedback {
    fn poll(&mut self, obs: &Observation) -> Vec<FeedbackEvent> {
        self.by_step
            .remove(&obs.step)
            .unwrap_or_default()
            .into_iter()
            .map(|value| FeedbackEvent { step: obs.step, value, source: FeedbackOrigin::Human })
            .collect()
    }
}

/// One logged learner step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    /// Joint angle after the action.
    pub theta: f64,
    /// Target for the post-action time index.
    pub theta_t: f64,
    pub a_raw: f64,
    pub a_exec: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Smoothed EMG level entering the next state.
    pub s_emg: f64,
    pub r: f64,
    pub r_env: Option<f64>,
    pub r_human: Option<f64>,
    pub cumulative_reward: f64,
    pub delta: f64,
    pub active_features: usize,
    /// Feedback values applied at this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feedback: Vec<f64>,
}

impl StepRecord {
    pub fn abs_error(&self) -> f64 {
        (self.theta - self.theta_t).abs()
    }
}

/// Single-writer trial loop state. One call to [`Trial::step`] executes one
/// iteration of the learning loop.
pub struct Trial {
    mode: RewardMode,
    joint: JointConfig,
    trajectory: TrajectoryConfig,
    coder: TileCoder,
    learner: Learner,
    plant: PlantState,
    emg: EmgState,
    reward: RewardChannel,
    policy_rng: ChaCha8Rng,
    actuation: Option<(Normal<f64>, ChaCha8Rng)>,
    x: SparseFeatures,
    cumulative: f64,
}

impl Trial {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let coder = TileCoder::new(cfg.tile_coder.clone())?;
        let learner = Learner::new(cfg.learner.clone(), coder.total_dim())?;
        let theta0 = cfg.initial_theta.unwrap_or(cfg.trajectory.theta_lo);
        let plant = PlantState::new(theta0, &cfg.joint);
        let emg = EmgState::new(cfg.emg_tau)?;
        let x = coder.encode(&normalize_state(plant.theta, emg.s_emg, &cfg.joint))?;
        let actuation = if cfg.joint.actuation_noise_std > 0.0 {
            let n = Normal::new(0.0, cfg.joint.actuation_noise_std)
                .map_err(|e| Error::Config(format!("actuation noise: {e}")))?;
            Some((n, seeded_stream(seed, STREAM_ACTUATION)))
        } else {
            None
        };
        Ok(Trial {
            mode: cfg.mode,
            joint: cfg.joint.clone(),
            trajectory: cfg.trajectory.clone(),
            coder,
            learner,
            plant,
            emg,
            reward: RewardChannel::new(RewardSpec::new(cfg.mode, cfg.joint.deviation_threshold, cfg.human_decay)?),
            policy_rng: seeded_stream(seed, STREAM_POLICY),
            actuation,
            x,
            cumulative: 0.0,
        })
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn plant(&self) -> PlantState {
        self.plant
    }

    pub fn s_emg(&self) -> f64 {
        self.emg.s_emg
    }

    pub fn mode(&self) -> RewardMode {
        self.mode
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cumulative
    }

    /// Policy parameters at the current state, without stepping.
    pub fn current_policy(&self) -> Result<(f64, f64)> {
        self.learner.policy_params(&self.x)
    }

    /// Runs one iteration: sample and execute an action, read the next EMG
    /// sample, score the post-action angle against the next target, learn.
    pub fn step(&mut self, emg: &mut dyn EmgSource, feedback: &mut dyn FeedbackSource) -> Result<StepRecord> {
        let t = self.plant.t;
        let fault = |e: Error| match e {
            Error::NumericFault { what, .. } => Error::NumericFault { step: t, what },
            other => other,
        };

        // Read the raw sample first so an exhausted source leaves state untouched.
        let s_raw = emg.next_raw(t)?;
        let sample = self.learner.sample_action(&self.x, &mut self.policy_rng).map_err(fault)?;

        let mut a = sample.a_exec;
        if let Some((noise, rng)) = self.actuation.as_mut() {
            a += noise.sample(rng);
        }
        let next_plant = apply_action(self.plant, a, &self.joint);
        let next_emg = smooth_emg(self.emg, s_raw);
        let x_next = self.coder.encode(&normalize_state(next_plant.theta, next_emg.s_emg, &self.joint))?;

        let theta_t = target_angle(next_plant.t, &self.trajectory);
        let obs = Observation { step: t, theta: next_plant.theta, theta_t };
        let events: Vec<FeedbackEvent> =
            feedback.poll(&obs).into_iter().map(|e| FeedbackEvent { step: t, ..e }).collect();
        let RewardComponents { env, human, total } = self.reward.step(next_plant.theta, theta_t, &events);

        let delta = self.learner.step_update(&self.x, &sample, total, &x_next).map_err(fault)?;

        self.plant = next_plant;
        self.emg = next_emg;
        self.x = x_next;
        self.cumulative += total;

        Ok(StepRecord {
            t,
            theta: next_plant.theta,
            theta_t,
            a_raw: sample.a_raw,
            a_exec: sample.a_exec,
            mu: sample.mu,
            sigma: sample.sigma,
            s_emg: next_emg.s_emg,
            r: total,
            r_env: env,
            r_human: human,
            cumulative_reward: self.cumulative,
            delta,
            active_features: self.x.len(),
            feedback: events.iter().filter(|_| self.mode.uses_human()).map(|e| e.value).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    All,
    Last(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub value: f64,
    /// The trace was shorter than the requested window.
    pub truncated: bool,
}

/// Mean absolute angular error over a suffix window.
pub fn mae(angles: &[f64], targets: &[f64], window: Window) -> Result<Mae> {
    if angles.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: angles.len(), got: targets.len() });
    }
    if angles.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let (start, truncated) = match window {
        Window::All => (0, false),
        Window::Last(k) => (angles.len().saturating_sub(k), k > angles.len()),
    };
    let n = angles.len() - start;
    if n == 0 {
        return Err(Error::EmptyTrace);
    }
    let sum: f64 = angles[start..].iter().zip(&targets[start..]).map(|(a, b)| (a - b).abs()).sum();
    Ok(Mae { value: sum / n as f64, truncated })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub mode: RewardMode,
    pub records: Vec<StepRecord>,
    pub mae_all: Option<Mae>,
    pub mae_last10k: Option<Mae>,
    pub mae_last5k: Option<Mae>,
    /// Diagnostic when the trial aborted on a numeric fault.
    pub fault: Option<String>,
    /// Step at which a finite signal source ran out.
    pub exhausted_at: Option<u64>,
}

impl TrialResult {
    fn finish(
        seed: u64,
        mode: RewardMode,
        records: Vec<StepRecord>,
        fault: Option<String>,
        exhausted_at: Option<u64>,
    ) -> Self {
        let angles: Vec<f64> = records.iter().map(|r| r.theta).collect();
        let targets: Vec<f64> = records.iter().map(|r| r.theta_t).collect();
        let m = |w| mae(&angles, &targets, w).ok();
        TrialResult {
            seed,
            mode,
            mae_all: m(Window::All),
            mae_last10k: m(Window::Last(10_000)),
            mae_last5k: m(Window::Last(5_000)),
            records,
            fault,
            exhausted_at,
        }
    }

    pub fn faulted(&self) -> bool {
        self.fault.is_some()
    }

    /// Fraction of the last `k` steps within `threshold` of the target.
    pub fn fraction_within(&self, k: usize, threshold: f64) -> f64 {
        let start = self.records.len().saturating_sub(k);
        let tail = &self.records[start..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().filter(|r| r.abs_error() <= threshold).count() as f64 / tail.len() as f64
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_jsonl(&self.records, &mut out)?;
        out.flush()?;
        Ok(())
    }
}

pub fn write_jsonl<W: Write>(records: &[StepRecord], out: &mut W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Builds the EMG source a config names.
pub fn build_emg_source(cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn EmgSource>> {
    Ok(match &cfg.emg {
        EmgSourceConfig::Simulated(c) => {
            Box::new(SimulatedEmg::new(c.clone(), cfg.trajectory.clone(), seeded_stream(seed, STREAM_EMG))?)
        }
        EmgSourceConfig::Replay { path } => Box::new(ReplayEmg::from_csv(path)?),
        EmgSourceConfig::Live { .. } => {
            return Err(Error::Config("live EMG is only available in an interactive session".into()))
        }
    })
}

/// Builds the scripted feedback source a config names. Environment-only
/// modes get no feedback.
pub fn build_feedback_source(cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn FeedbackSource>> {
    if !cfg.mode.uses_human() {
        return Ok(Box::new(NoFeedback));
    }
    Ok(match &cfg.feedback {
        FeedbackConfig::None => Box::new(NoFeedback),
        FeedbackConfig::Oracle(c) => {
            let c = OracleConfig { deviation_threshold: cfg.joint.deviation_threshold, ..c.clone() };
            Box::new(Oracle::new(c, seeded_stream(seed, STREAM_FEEDBACK))?)
        }
        FeedbackConfig::Replay { path } => Box::new(ScriptedFeedback::from_csv(path)?),
        FeedbackConfig::Live => {
            return Err(Error::Config("live feedback is only available in an interactive session".into()))
        }
    })
}

/// Runs `cfg.max_steps` iterations with the given sources.
pub fn run_trial_with(
    cfg: &ExperimentConfig,
    seed: u64,
    feedback: &mut dyn FeedbackSource,
    emg: &mut dyn EmgSource,
) -> Result<TrialResult> {
    let mut trial = Trial::new(cfg, seed)?;
    let mut records = Vec::with_capacity(cfg.max_steps as usize);
    let mut fault = None;
    let mut exhausted_at = None;
    let mut next_tick = Instant::now();
    for _ in 0..cfg.max_steps {
        match trial.step(emg, feedback) {
            Ok(rec) => records.push(rec),
            Err(Error::SourceExhausted { step }) => {
                exhausted_at = Some(step);
                break;
            }
            Err(e @ Error::NumericFault { .. }) => {
                log::warn!("trial seed {seed} aborted: {e}");
                fault = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.pacing == Pacing::Realtime {
            next_tick += INTERACTIVE_STEP;
            if let Some(wait) = next_tick.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
    Ok(TrialResult::finish(seed, cfg.mode, records, fault, exhausted_at))
}

/// Runs one seeded trial with the sources named in the config.
pub fn run_trial(cfg: &ExperimentConfig, seed: u64) -> Result<TrialResult> {
    let mut emg = build_emg_source(cfg, seed)?;
    let mut feedback = build_feedback_source(cfg, seed)?;
    run_trial_with(cfg, seed, feedback.as_mut(), emg.as_mut())
}

/// Runs every seed in parallel, writing one JSONL log per trial when an
/// output directory is configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let results = cfg.seeds.par_iter().map(|&seed| run_trial(cfg, seed)).collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        for r in &results {
            r.write_jsonl(dir.join(trial_log_name(r.mode, r.seed)))?;
        }
    }
    Ok(results)
}

pub fn trial_log_name(mode: RewardMode, seed: u64) -> String {
    format!("{mode}_seed{seed}.jsonl")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 when n = 1.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        if values.iter().all(|&v| v == values[0]) {
            return Some(Stat { mean: values[0], std: 0.0 });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Stat { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub condition: String,
    pub n: usize,
    pub n_faulted: usize,
    pub mae_all: Stat,
    pub mae_last10k: Stat,
    pub mae_last5k: Stat,
}

/// Mean and sample std of each MAE window across non-faulted trials.
pub fn aggregate(condition: &str, results: &[TrialResult]) -> Result<Summary> {
    let ok: Vec<&TrialResult> = results.iter().filter(|r| !r.faulted() && r.mae_all.is_some()).collect();
    if ok.is_empty() {
        return Err(Error::AllTrialsFaulted(results.len()));
    }
    let stat = |f: fn(&TrialResult) -> Option<Mae>| {
        let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).map(|m| m.value).collect();
        Stat::of(&vals).ok_or(Error::EmptyTrace)
    };
    Ok(Summary {
        condition: condition.to_string(),
        n: ok.len(),
        n_faulted: results.len() - ok.len(),
        mae_all: stat(|r| r.mae_all)?,
        mae_last10k: stat(|r| r.mae_last10k)?,
        mae_last5k: stat(|r| r.mae_last5k)?,
    })
}

pub const SUMMARY_HEADER: [&str; 8] =
    ["condition", "n", "mae_all_mean", "mae_all_std", "mae_10k_mean", "mae_10k_std", "mae_5k_mean", "mae_5k_std"];

pub fn write_summary_csv<W: Write>(summaries: &[Summary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        w.write_record([
            s.condition.clone(),
            s.n.to_string(),
            s.mae_all.mean.to_string(),
            s.mae_all.std.to_string(),
            s.mae_last10k.mean.to_string(),
            s.mae_last10k.std.to_string(),
            s.mae_last5k.mean.to_string(),
            s.mae_last5k.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// All four reward conditions over the configured seeds.
pub fn compare(cfg: &ExperimentConfig) -> Result<Vec<(Summary, Vec<TrialResult>)>> {
    RewardMode::ALL
        .iter()
        .map(|&mode| {
            let results = run_experiment(&cfg.with_mode(mode))?;
            Ok((aggregate(mode.as_str(), &results)?, results))
        })
        .collect()
}
