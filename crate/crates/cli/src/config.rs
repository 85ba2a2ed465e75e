//! Turns command-line flags into an experiment config. A config file, when
//! given, is the base; flags override it.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use cotrain_core::acrl::UpdateAction;
use cotrain_core::harness::{EmgSourceConfig, ExperimentConfig, FeedbackConfig, Pacing};
use cotrain_core::reward::{OracleConfig, RewardMode};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fixed,
    Relative,
    HumanOnly,
    FixedPlusHuman,
}

impl From<ModeArg> for RewardMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fixed => RewardMode::Fixed,
            ModeArg::Relative => RewardMode::Relative,
            ModeArg::HumanOnly => RewardMode::HumanOnly,
            ModeArg::FixedPlusHuman => RewardMode::FixedPlusHuman,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UpdateActionArg {
    Raw,
    Executed,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ExperimentArgs {
    /// TOML or JSON experiment config (`.json` is read as JSON)
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Seed list: `7`, `1,4,9` or a half-open range `0..10`
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<SeedList>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Directory for per-trial JSON-lines logs and the summary CSV
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
    /// Pace trials at ~33 Hz instead of running flat out
    #[arg(long)]
    pub realtime: bool,
    #[arg(long)]
    pub initial_theta: Option<f64>,
    #[arg(long)]
    pub human_decay: Option<f64>,
    #[arg(long)]
    pub emg_tau: Option<f64>,
    #[arg(long)]
    pub actuation_noise: Option<f64>,
    /// Probability that the scripted oracle flips its judgement
    #[arg(long)]
    pub oracle_noise: Option<f64>,
    /// Mean steps between oracle presses
    #[arg(long)]
    pub oracle_period: Option<f64>,
    /// Action fed to the actor update: the sampled one or the clipped one
    #[arg(long, value_enum)]
    pub update_action: Option<UpdateActionArg>,
    /// Override any config field by dotted path, e.g. `learner.alpha_v=0.001`.
    /// Values are parsed as JSON when possible, otherwise taken as strings.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> Result<SeedList, String> {
    parse_seed_list(s).map(SeedList)
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("range end: {e}"))?;
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|p| p.trim().parse::<u64>().map_err(|e| format!("seed {p:?}: {e}"))).collect()
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = node.as_object_mut().with_context(|| format!("`{path}`: `{key}` is not inside an object"))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*key) {
                bail!("unknown config field `{path}`");
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*key).with_context(|| format!("unknown config field `{path}`"))?;
    }
    unreachable!("split yields at least one part")
}

/// Applies `path=value` overrides through the config's JSON form.
pub fn apply_overrides(cfg: ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg)?;
    for o in overrides {
        let (path, raw) = o.split_once('=').with_context(|| format!("`--set {o}`: expected PATH=VALUE"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut tree, path.trim(), value)?;
    }
    serde_json::from_value(tree).context("override produced an invalid config")
}

impl ExperimentArgs {
    pub fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.0.clone();
        }
        if let Some(n) = self.max_steps {
            cfg.max_steps = n;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = Some(d.clone());
        }
        if self.realtime {
            cfg.pacing = Pacing::Realtime;
        }
        if self.initial_theta.is_some() {
            cfg.initial_theta = self.initial_theta;
        }
        if let Some(v) = self.human_decay {
            cfg.human_decay = v;
        }
        if let Some(v) = self.emg_tau {
            cfg.emg_tau = v;
        }
        if let Some(v) = self.actuation_noise {
            cfg.joint.actuation_noise_std = v;
        }
        if self.oracle_noise.is_some() || self.oracle_period.is_some() {
            let mut oracle = match &cfg.feedback {
                FeedbackConfig::Oracle(o) => o.clone(),
                _ => OracleConfig::default(),
            };
            if let Some(p) = self.oracle_noise {
                oracle.noise_p = p;
            }
            if let Some(p) = self.oracle_period {
                oracle.period = p;
            }
            cfg.feedback = FeedbackConfig::Oracle(oracle);
        }
        if let Some(u) = self.update_action {
            cfg.learner.update_action = match u {
                UpdateActionArg::Raw => UpdateAction::Raw,
                UpdateActionArg::Executed => UpdateAction::Executed,
            };
        }
        let cfg = apply_overrides(cfg, &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Points the config at recorded traces.
pub fn with_replay(mut cfg: ExperimentConfig, emg: Option<PathBuf>, feedback: Option<PathBuf>) -> ExperimentConfig {
    if let Some(path) = emg {
        cfg.emg = EmgSourceConfig::Replay { path };
    }
    if let Some(path) = feedback {
        cfg.feedback = FeedbackConfig::Replay { path };
    }
    cfg
}
