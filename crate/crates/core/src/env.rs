//! Simulated single joint, periodic target trajectory and state normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub theta_min: f64,
    pub theta_max: f64,
    pub action_limit: f64,
    pub deviation_threshold: f64,
    /// Std of additive actuation noise per step. Zero disables it.
    pub actuation_noise_std: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            theta_min: 0.0349,
            theta_max: 1.5446,
            action_limit: 0.05,
            deviation_threshold: 0.1,
            actuation_noise_std: 0.0,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_min < self.theta_max) {
            return Err(Error::Config("theta_min must be below theta_max".into()));
        }
        if !(self.action_limit > 0.0) || !(self.deviation_threshold > 0.0) {
            return Err(Error::Config("action_limit and deviation_threshold must be positive".into()));
        }
        if !(self.actuation_noise_std >= 0.0) {
            return Err(Error::Config("actuation noise std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.theta_max - self.theta_min
    }
}

/// Trapezoidal two-phase target: hold low, ramp up, hold high, ramp down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub dwell_steps: u64,
    pub ramp_steps: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { theta_lo: 0.35, theta_hi: 1.20, dwell_steps: 1000, ramp_steps: 200 }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self, joint: &JointConfig) -> Result<()> {
        if !(joint.theta_min < self.theta_lo && self.theta_lo < self.theta_hi && self.theta_hi < joint.theta_max) {
            return Err(Error::Config(format!(
                "trajectory [{}, {}] must lie strictly inside the joint range [{}, {}]",
                self.theta_lo, self.theta_hi, joint.theta_min, joint.theta_max
            )));
        }
        if self.dwell_steps == 0 {
            return Err(Error::Config("dwell_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn period(&self) -> u64 {
        2 * (self.dwell_steps + self.ramp_steps)
    }

    /// Target position mapped onto `[0,1]` between the two plateaus.
    pub fn phase_level(&self, t: u64) -> f64 {
        ((target_angle(t, self) - self.theta_lo) / (self.theta_hi - self.theta_lo)).clamp(0.0, 1.0)
    }
}

pub fn target_angle(t: u64, cfg: &TrajectoryConfig) -> f64 {
    let d = cfg.dwell_steps;
    let r = cfg.ramp_steps;
    let span = cfg.theta_hi - cfg.theta_lo;
    let p = t % cfg.period();
    if p < d {
        cfg.theta_lo
    } else if p < d + r {
        cfg.theta_lo + span * (p - d) as f64 / r as f64
    } else if p < 2 * d + r {
        cfg.theta_hi
    } else {
        cfg.theta_hi - span * (p - 2 * d - r) as f64 / r as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub theta: f64,
    pub t: u64,
}

impl PlantState {
    pub fn new(theta: f64, joint: &JointConfig) -> Self {
        PlantState { theta: theta.clamp(joint.theta_min, joint.theta_max), t: 0 }
    }
}

/// Kinematic integration of an angular displacement, clamped to the joint limits.
pub fn apply_action(state: PlantState, a_exec: f64, cfg: &JointConfig) -> PlantState {
    PlantState { theta: (state.theta + a_exec).clamp(cfg.theta_min, cfg.theta_max), t: state.t + 1 }
}

/// Normalized state: joint angle over the joint range, EMG level clamped to `[0,1]`.
pub fn normalize_state(theta: f64, s_emg: f64, cfg: &JointConfig) -> [f64; 2] {
    let angle = ((theta - cfg.theta_min) / cfg.range()).clamp(0.0, 1.0);
    let emg = if s_emg.is_nan() { 0.0 } else { s_emg.clamp(0.0, 1.0) };
    [angle, emg]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trajectory_landmarks() {
        let cfg = TrajectoryConfig::default();
        assert_eq!(target_angle(0, &cfg), 0.35);
        assert_eq!(target_angle(999, &cfg), 0.35);
        assert_eq!(target_angle(1100, &cfg), 0.35 + 0.85 * 0.5);
        assert_eq!(target_angle(1200, &cfg), 1.20);
        assert_eq!(target_angle(2199, &cfg), 1.20);
        assert_eq!(target_angle(2300, &cfg), 1.20 - 0.85 * 0.5);
        assert_eq!(target_angle(2400, &cfg), 0.35);
        assert_eq!(cfg.period(), 2400);
    }

    #[test]
    fn square_wave_without_ramp() {
        let cfg = TrajectoryConfig { ramp_steps: 0, dwell_steps: 3, ..Default::default() };
        let seq: Vec<f64> = (0..7).map(|t| target_angle(t, &cfg)).collect();
        assert_eq!(seq, vec![0.35, 0.35, 0.35, 1.2, 1.2, 1.2, 0.35]);
    }

    #[test]
    fn actions_and_limits() {
        let joint = JointConfig::default();
        let s = PlantState { theta: 0.5, t: 4 };
        let n = apply_action(s, 0.03, &joint);
        assert!((n.theta - 0.53).abs() < 1e-15);
        assert_eq!(n.t, 5);
        assert_eq!(apply_action(PlantState { theta: 1.52, t: 0 }, 0.05, &joint).theta, 1.5446);
        assert_eq!(apply_action(PlantState { theta: 0.0349, t: 0 }, -0.05, &joint).theta, 0.0349);
    }

    #[test]
    fn normalization_endpoints() {
        let joint = JointConfig::default();
        assert_eq!(normalize_state(0.0349, 0.0, &joint)[0], 0.0);
        assert_eq!(normalize_state(1.5446, 0.0, &joint)[0], 1.0);
        assert!((normalize_state(0.78975, 0.0, &joint)[0] - 0.5).abs() < 1e-12);
        assert_eq!(normalize_state(0.5, 1.7, &joint)[1], 1.0);
    }

    #[test]
    fn config_validation() {
        let joint = JointConfig::default();
        assert!(TrajectoryConfig::default().validate(&joint).is_ok());
        let bad = TrajectoryConfig { theta_hi: 1.6, ..Default::default() };
        assert!(bad.validate(&joint).is_err());
        let bad = TrajectoryConfig { dwell_steps: 0, ..Default::default() };
        assert!(bad.validate(&joint).is_err());
        let bad = JointConfig { theta_min: 2.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn joint_stays_in_limits(actions in proptest::collection::vec(-0.05f64..=0.05, 0..500), start in 0.0f64..2.0) {
            let joint = JointConfig::default();
            let mut s = PlantState::new(start, &joint);
            for a in actions {
                s = apply_action(s, a, &joint);
                prop_assert!(s.theta >= joint.theta_min && s.theta <= joint.theta_max);
            }
        }

        #[test]
        fn target_contained_and_periodic(t in 0u64..1_000_000, dwell in 1u64..50, ramp in 0u64..50) {
            let cfg = TrajectoryConfig { dwell_steps: dwell, ramp_steps: ramp, ..Default::default() };
            let v = target_angle(t, &cfg);
            prop_assert!(v >= cfg.theta_lo && v <= cfg.theta_hi);
            prop_assert_eq!(v, target_angle(t + cfg.period(), &cfg));
            prop_assert_eq!(target_angle(dwell + ramp, &cfg), cfg.theta_hi);
        }

        #[test]
        fn angle_normalization_inverts(theta in 0.0349f64..=1.5446) {
            let joint = JointConfig::default();
            let u = normalize_state(theta, 0.0, &joint)[0];
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert!((joint.theta_min + u * joint.range() - theta).abs() < 1e-12);
        }
    }
}
