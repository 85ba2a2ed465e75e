//! Continuous-action actor-critic learner.
//!
//! Gaussian policy over a single continuous action with mean `w_μᵀx` and
//! deviation `exp(w_σᵀx)`, a TD(λ) critic with replacing traces, and an actor
//! with accumulating traces. The task is continuing: there are no terminal
//! states and the discount applies on every step.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcapprox::SparseFeatures;

/// Which action value enters the `(a - μ)` terms of the actor update when
/// clipping binds.
///
/// With `Executed`, `(a - μ)² - σ²` is close to `-σ²` whenever σ exceeds the
/// action limit, so the deviation weights receive a biased push whose sign
/// follows δ alone; under the default task this drives σ to infinity within
/// about a thousand steps. `Raw` keeps the score function unbiased.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateAction {
    /// The clipped action that was actually executed.
    Executed,
    /// The raw draw from N(μ, σ²).
    #[default]
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerParams {
    pub alpha_v: f64,
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub gamma: f64,
    pub lambda_w: f64,
    pub lambda_v: f64,
    pub sigma_min: f64,
    /// Symmetric bound on the executed action.
    pub action_limit: f64,
    pub update_action: UpdateAction,
}

impl LearnerParams {
    /// Step sizes scaled by the number of active features `m`.
    pub fn with_active_features(m: usize) -> Self {
        let m = m as f64;
        LearnerParams {
            alpha_v: 0.01 / m,
            alpha_mu: 0.005 / m,
            alpha_sigma: 0.005 / m,
            gamma: 0.9,
            lambda_w: 0.3,
            lambda_v: 0.7,
            sigma_min: 0.01,
            action_limit: 0.05,
            update_action: UpdateAction::Raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha_v,
            self.alpha_mu,
            self.alpha_sigma,
            self.gamma,
            self.lambda_w,
            self.lambda_v,
            self.sigma_min,
            self.action_limit,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("learner parameters must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda_w) || !(0.0..=1.0).contains(&self.lambda_v) {
            return Err(Error::Config("trace decay rates must lie in [0,1]".into()));
        }
        if self.alpha_v < 0.0 || self.alpha_mu < 0.0 || self.alpha_sigma < 0.0 {
            return Err(Error::Config("step sizes must be non-negative".into()));
        }
        if self.sigma_min <= 0.0 || self.action_limit <= 0.0 {
            return Err(Error::Config("sigma_min and action_limit must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams::with_active_features(16)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub mu: f64,
    pub sigma: f64,
    pub a_raw: f64,
    pub a_exec: f64,
}

/// All learner weights and traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    params: LearnerParams,
    w_mu: Vec<f64>,
    w_sigma: Vec<f64>,
    v: Vec<f64>,
    e_mu: Vec<f64>,
    e_sigma: Vec<f64>,
    e_v: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    learner: Learner,
}

impl Learner {
    pub fn new(params: LearnerParams, dim: usize) -> Result<Self> {
        params.validate()?;
        if dim == 0 {
            return Err(Error::Config("learner dimensionality must be >= 1".into()));
        }
        Ok(Learner {
            params,
            w_mu: vec![0.0; dim],
            w_sigma: vec![0.0; dim],
            v: vec![0.0; dim],
            e_mu: vec![0.0; dim],
            e_sigma: vec![0.0; dim],
            e_v: vec![0.0; dim],
        })
    }

    pub fn params(&self) -> &LearnerParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn w_mu(&self) -> &[f64] {
        &self.w_mu
    }

    pub fn w_sigma(&self) -> &[f64] {
        &self.w_sigma
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn e_mu(&self) -> &[f64] {
        &self.e_mu
    }

    pub fn e_sigma(&self) -> &[f64] {
        &self.e_sigma
    }

    pub fn e_v(&self) -> &[f64] {
        &self.e_v
    }

    /// Direct weight access, for tests and warm starts.
    pub fn weights_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.w_mu, &mut self.w_sigma, &mut self.v)
    }

    /// Zeroes all weights and traces, keeping hyperparameters.
    pub fn reset(&mut self) {
        for vec in [&mut self.w_mu, &mut self.w_sigma, &mut self.v, &mut self.e_mu, &mut self.e_sigma, &mut self.e_v] {
            vec.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    fn check_dim(&self, x: &SparseFeatures) -> Result<()> {
        if x.total_dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.total_dim() });
        }
        Ok(())
    }

    fn dot(weights: &[f64], x: &SparseFeatures) -> f64 {
        x.active_indices().iter().map(|&i| weights[i]).sum()
    }

    /// Value estimate vᵀx.
    pub fn value(&self, x: &SparseFeatures) -> Result<f64> {
        self.check_dim(x)?;
        Ok(Self::dot(&self.v, x))
    }

    /// Policy mean and floored deviation at `x`.
    pub fn policy_params(&self, x: &SparseFeatures) -> Result<(f64, f64)> {
        self.check_dim(x)?;
        let mu = Self::dot(&self.w_mu, x);
        let sigma = Self::dot(&self.w_sigma, x).exp().max(self.params.sigma_min);
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NumericFault {
                step: 0,
                what: format!("non-finite policy parameters mu={mu} sigma={sigma}"),
            });
        }
        Ok((mu, sigma))
    }

    /// Draws an action from N(μ, σ²) and clips it to the action limit.
    pub fn sample_action<R: Rng + ?Sized>(&self, x: &SparseFeatures, rng: &mut R) -> Result<ActionSample> {
        let (mu, sigma) = self.policy_params(x)?;
        let normal = Normal::new(mu, sigma)
            .map_err(|e| Error::NumericFault { step: 0, what: format!("normal({mu}, {sigma}): {e}") })?;
        let a_raw = normal.sample(rng);
        Ok(ActionSample { mu, sigma, a_raw, a_exec: self.clip(a_raw) })
    }

    pub fn clip(&self, a: f64) -> f64 {
        a.clamp(-self.params.action_limit, self.params.action_limit)
    }

    /// One learning step on the transition `x -> x_next` with reward `r`.
    /// Returns the TD error.
    pub fn step_update(
        &mut self,
        x: &SparseFeatures,
        sample: &ActionSample,
        r: f64,
        x_next: &SparseFeatures,
    ) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(x_next)?;
        if !r.is_finite() {
            return Err(Error::NumericFault { step: 0, what: format!("non-finite reward {r}") });
        }
        let p = &self.params;

        let delta = r + p.gamma * Self::dot(&self.v, x_next) - Self::dot(&self.v, x);
        if !delta.is_finite() {
            return Err(Error::NumericFault { step: 0, what: format!("non-finite TD error {delta}") });
        }

        // Critic: replacing traces, capped componentwise at 1.
        let decay_v = p.lambda_v * p.gamma;
        self.e_v.iter_mut().for_each(|e| *e *= decay_v);
        for &i in x.active_indices() {
            self.e_v[i] = (self.e_v[i] + 1.0).min(1.0);
        }
        let step_v = p.alpha_v * delta;
        for (w, e) in self.v.iter_mut().zip(&self.e_v) {
            *w += step_v * e;
        }

        // Actor: accumulating traces.
        let a = match p.update_action {
            UpdateAction::Executed => sample.a_exec,
            UpdateAction::Raw => sample.a_raw,
        };
        let dev = a - sample.mu;
        let grad_sigma = dev * dev - sample.sigma * sample.sigma;

        self.e_mu.iter_mut().for_each(|e| *e *= p.lambda_w);
        for &i in x.active_indices() {
            self.e_mu[i] += dev;
        }
        let step_mu = p.alpha_mu * delta;
        for (w, e) in self.w_mu.iter_mut().zip(&self.e_mu) {
            *w += step_mu * e;
        }

        self.e_sigma.iter_mut().for_each(|e| *e *= p.lambda_w);
        for &i in x.active_indices() {
            self.e_sigma[i] += grad_sigma;
        }
        let step_sigma = p.alpha_sigma * delta;
        for (w, e) in self.w_sigma.iter_mut().zip(&self.e_sigma) {
            *w += step_sigma * e;
        }

        if let Some(which) = self.first_non_finite() {
            return Err(Error::NumericFault { step: 0, what: format!("non-finite entry in {which}") });
        }
        Ok(delta)
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("v", &self.v),
            ("w_mu", &self.w_mu),
            ("w_sigma", &self.w_sigma),
            ("e_mu", &self.e_mu),
            ("e_sigma", &self.e_sigma),
        ]
        .into_iter()
        .find(|(_, vec)| vec.iter().any(|w| !w.is_finite()))
        .map(|(name, _)| name)
    }

    /// Versioned JSON checkpoint. Floats round-trip exactly.
    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint { version: CHECKPOINT_VERSION, learner: self.clone() })?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", cp.version)));
        }
        let l = cp.learner;
        let dim = l.v.len();
        if [&l.w_mu, &l.w_sigma, &l.e_mu, &l.e_sigma, &l.e_v].iter().any(|v| v.len() != dim) {
            return Err(Error::Config("checkpoint vectors disagree in length".into()));
        }
        l.params.validate()?;
        Ok(l)
    }
}
