//! Live session service for interactive training.
//!
//! A single trial loop thread steps the learner at a fixed period while
//! websocket clients watch telemetry and deliver feedback keypresses. See
//! `docs/wire_protocol.md` for the message schema.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{
    decode, encode, ControlAction, ControlMsg, ErrorCode, ErrorMsg, FeedbackMsg, Phase, SessionState, TelemetryFrame,
    WireMessage, PROTOCOL_VERSION,
};
pub use server::{serve, BridgeError, BridgeHandle};
pub use session::BridgeConfig;
