//! Passive-state-preparation BB84: a Monte-Carlo link simulator, the
//! post-processing protocol and closed-form key-rate analysis.
//!
//! Qubits come from the random phase difference between consecutive laser
//! pulses, classified by a local tomography tap and kept only when they
//! fall inside one of four narrow windows.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod config;
pub mod error;
pub mod protocol;
pub mod receiver;
pub mod rng;
pub mod security;
pub mod stats;
pub mod transmitter;
pub mod types;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{AnalysisError, ConfigError, ParamError, ProtocolError, SecurityError};
pub use types::{Basis, KeyRateReport, LinkParams, PostselectionWindow, Regime, StateLabel};
