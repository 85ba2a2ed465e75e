//! Human-in-the-loop actor-critic training of a simulated joint.
//!
//! A continuous-action actor-critic learner drives one joint to track a
//! periodic target. Its state is the joint angle plus a smoothed EMG control
//! signal, encoded by multi-resolution tile coding, and its reward comes from
//! the environment, from a trainer's keypresses, or both.

// Validation uses negated comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acrl;
pub mod env;
pub mod error;
pub mod funcapprox;
pub mod harness;
pub mod reward;
pub mod signals;

pub use error::{Error, Result};
