use thiserror::Error;

/// Errors raised by the closed-form security and statistics formulas.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SecurityError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    /// Every detection can be explained by multiphoton pulses, so no
    /// single-photon yield is certified.
    #[error("multiphoton probability {p_multi} exceeds the gain {gain}")]
    MultiphotonDominated { p_multi: f64, gain: f64 },
}

/// A configuration value failed validation. `key` names the offending field
/// using the dotted config-file spelling.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid `{key}`: {reason}")]
pub struct ParamError {
    pub key: String,
    pub reason: String,
}

impl ParamError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("record streams are not aligned: {0}")]
    IndexMismatch(String),
    #[error("no records were disclosed, QBER cannot be estimated")]
    DegenerateEstimate,
    #[error("session aborted: {0}")]
    Aborted(String),
    #[error("wire protocol violation: {0}")]
    Wire(String),
    #[error("peer disagrees on {0}")]
    PeerMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("objective is zero everywhere within the bounds")]
    NoPositiveRate,
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Param(#[from] ParamError),
}
