//! JSON wire messages exchanged with session clients.
//!
//! Every message is a single JSON object carrying a protocol version `v` and
//! a `type` discriminator. Field names are documented in
//! `docs/wire_protocol.md`.

use std::fmt;
use std::path::PathBuf;

use cotrain_core::harness::{ExperimentConfig, StepRecord};
use cotrain_core::reward::is_legal_feedback;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    /// Server to client: one learner step.
    Telemetry(TelemetryFrame),
    /// Client to server: a trainer keypress.
    Feedback(FeedbackMsg),
    /// Client to server: session control.
    Control(ControlMsg),
    /// Client to server: one raw EMG reading.
    EmgSample(EmgSampleMsg),
    /// Server to client: session status, sent on connect and on every phase change.
    State(SessionState),
    /// Server to client: a rejected or failed request.
    Error(ErrorMsg),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    /// Environment reward, absent in human-only training.
    pub env: Option<f64>,
    /// Human reward trace, absent in environment-only training.
    pub human: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedFeedback {
    pub step: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub t: u64,
    pub theta: f64,
    pub theta_t: f64,
    pub mu: f64,
    pub sigma: f64,
    pub a_exec: f64,
    pub r: f64,
    pub r_components: RewardParts,
    pub cumulative_reward: f64,
    pub s_emg: f64,
    /// Feedback applied since the previous frame, with the step that consumed it.
    #[serde(default)]
    pub feedback: Vec<AppliedFeedback>,
}

impl TelemetryFrame {
    pub fn from_record(rec: &StepRecord, feedback: Vec<AppliedFeedback>) -> Self {
        TelemetryFrame {
            t: rec.t,
            theta: rec.theta,
            theta_t: rec.theta_t,
            mu: rec.mu,
            sigma: rec.sigma,
            a_exec: rec.a_exec,
            r: rec.r,
            r_components: RewardParts { env: rec.r_env, human: rec.r_human },
            cumulative_reward: rec.cumulative_reward,
            s_emg: rec.s_emg,
            feedback,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMsg {
    /// Either `1.0` or `-0.5`.
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Pause,
    Resume,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlMsg {
    pub action: ControlAction,
    /// Only read by `start`; the server's default config is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
    /// Only read by `start`; defaults to the config's first seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ControlMsg {
    pub fn new(action: ControlAction) -> Self {
        ControlMsg { action, config: None, seed: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmgSampleMsg {
    pub s_raw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Running,
    Paused,
    Finished,
    Faulted,
}

impl Phase {
    /// Whether a new trial may be started from this phase.
    pub fn can_start(self) -> bool {
        matches!(self, Phase::Idle | Phase::Finished | Phase::Faulted)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: Uuid,
    pub phase: Phase,
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Learner steps completed in this session.
    pub step: u64,
    pub clients: usize,
    /// JSON-lines trace of the session, when logging is enabled.
    pub log_path: Option<PathBuf>,
    /// Reason the trial stopped early, if it did.
    pub fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    UnexpectedType,
    IllegalFeedback,
    NotRunning,
    IgnoredByMode,
    InvalidTransition,
    InvalidConfig,
    EmgNotLive,
    QueueOverflow,
    Lagged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    pub text: String,
}

impl ErrorMsg {
    pub fn new(code: ErrorCode, text: impl Into<String>) -> Self {
        ErrorMsg { code, text: text.into() }
    }
}

impl fmt::Display for ErrorMsg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.text)
    }
}

#[derive(Serialize)]
struct Outgoing<'a> {
    v: u32,
    #[serde(flatten)]
    msg: &'a WireMessage,
}

/// Serializes a message with the current protocol version.
pub fn encode(msg: &WireMessage) -> String {
    serde_json::to_string(&Outgoing { v: PROTOCOL_VERSION, msg }).expect("wire messages always serialize")
}

/// Parses and validates one inbound text message.
pub fn decode(text: &str) -> Result<WireMessage, ErrorMsg> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| ErrorMsg::new(ErrorCode::Malformed, format!("invalid JSON: {e}")))?;
    let obj =
        value.as_object_mut().ok_or_else(|| ErrorMsg::new(ErrorCode::Malformed, "message must be a JSON object"))?;
    match obj.remove("v").map(|v| v.as_u64()) {
        None => return Err(ErrorMsg::new(ErrorCode::Malformed, "missing protocol version `v`")),
        Some(Some(v)) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => {
            return Err(ErrorMsg::new(
                ErrorCode::UnsupportedVersion,
                format!("unsupported protocol version {v:?}; this server speaks {PROTOCOL_VERSION}"),
            ))
        }
    }
    let msg: WireMessage =
        serde_json::from_value(value).map_err(|e| ErrorMsg::new(ErrorCode::Malformed, e.to_string()))?;
    match &msg {
        WireMessage::Feedback(f) if !is_legal_feedback(f.value) => Err(ErrorMsg::new(
            ErrorCode::IllegalFeedback,
            format!("feedback value {} rejected; allowed values are 1 and -0.5", f.value),
        )),
        WireMessage::EmgSample(s) if !s.s_raw.is_finite() => {
            Err(ErrorMsg::new(ErrorCode::Malformed, "s_raw must be a finite number"))
        }
        _ => Ok(msg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_values() {
        assert_eq!(
            decode(r#"{"v":1,"type":"feedback","value":1}"#).unwrap(),
            WireMessage::Feedback(FeedbackMsg { value: 1.0 })
        );
        assert_eq!(
            decode(r#"{"v":1,"type":"feedback","value":-0.5}"#).unwrap(),
            WireMessage::Feedback(FeedbackMsg { value: -0.5 })
        );
        for bad in ["0.7", "-1", "0", "0.5"] {
            let err = decode(&format!(r#"{{"v":1,"type":"feedback","value":{bad}}}"#)).unwrap_err();
            assert_eq!(err.code, ErrorCode::IllegalFeedback, "{bad}");
        }
    }

    #[test]
    fn envelope_errors() {
        let cases = [
            ("not json", ErrorCode::Malformed),
            ("[1,2]", ErrorCode::Malformed),
            (r#"{"type":"feedback","value":1}"#, ErrorCode::Malformed),
            (r#"{"v":2,"type":"feedback","value":1}"#, ErrorCode::UnsupportedVersion),
            (r#"{"v":"1","type":"feedback","value":1}"#, ErrorCode::UnsupportedVersion),
            (r#"{"v":1,"type":"warp"}"#, ErrorCode::Malformed),
            (r#"{"v":1,"type":"control","action":"rewind"}"#, ErrorCode::Malformed),
            (r#"{"v":1,"type":"feedback"}"#, ErrorCode::Malformed),
        ];
        for (text, code) in cases {
            assert_eq!(decode(text).unwrap_err().code, code, "{text}");
        }
    }

    #[test]
    fn encode_carries_version_and_tag() {
        let text = encode(&WireMessage::Control(ControlMsg::new(ControlAction::Pause)));
        assert_eq!(text, r#"{"v":1,"type":"control","action":"pause"}"#);
        let err = encode(&WireMessage::Error(ErrorMsg::new(ErrorCode::NotRunning, "not running")));
        assert_eq!(err, r#"{"v":1,"type":"error","code":"not_running","text":"not running"}"#);
    }

    #[test]
    fn frames_round_trip_exactly() {
        let frame = TelemetryFrame {
            t: 12,
            theta: 0.1 + 0.2,
            theta_t: 1.0 / 3.0,
            mu: -1e-17,
            sigma: 0.01,
            a_exec: -0.05,
            r: -0.5,
            r_components: RewardParts { env: Some(-0.5), human: None },
            cumulative_reward: 3.25,
            s_emg: 0.123456789012345,
            feedback: vec![AppliedFeedback { step: 12, value: 1.0 }],
        };
        let msg = WireMessage::Telemetry(frame);
        assert_eq!(decode(&encode(&msg)).unwrap(), msg);
    }

    #[test]
    fn start_with_config() {
        let text = r#"{"v":1,"type":"control","action":"start","seed":3,
            "config":{"mode":"human_only","max_steps":500,"feedback":{"kind":"live"}}}"#;
        let WireMessage::Control(c) = decode(text).unwrap() else { panic!() };
        assert_eq!(c.action, ControlAction::Start);
        assert_eq!(c.seed, Some(3));
        let cfg = c.config.unwrap();
        assert_eq!(cfg.max_steps, 500);
        assert_eq!(cfg.trajectory, ExperimentConfig::default().trajectory);
    }
}
