//! Run configuration files.
//!
//! A config is TOML: top-level run settings followed by `[link]`,
//! `[link.window]`, `[stabilizer]`, `[protocol]` and one section per
//! subcommand. Every key is optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! mode = "simulate"
//! emissions = 1000000
//!
//! [link]
//! mu = 0.15
//! channel_loss_db = 6.7
//!
//! [link.window]
//! delta_phi = 0.0785398
//!
//! [sweep]
//! variable = "channel_loss_db"
//! grid = "0:14:0.5"
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{parse_grid, Bound, FreeVariable, MonteCarlo, QberSource, SweepSpec, SweepVariable};
use crate::error::{ConfigError, ParamError};
use crate::protocol::{ProtocolOptions, SessionParams};
use crate::receiver::StabilizerConfig;
use crate::types::LinkParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Simulate,
    Analyze,
    Sweep,
    Optimize,
    Tradeoff,
    ServeAlice,
    ServeBob,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Simulate => "simulate",
            RunMode::Analyze => "analyze",
            RunMode::Sweep => "sweep",
            RunMode::Optimize => "optimize",
            RunMode::Tradeoff => "tradeoff",
            RunMode::ServeAlice => "serve-alice",
            RunMode::ServeBob => "serve-bob",
        }
    }

    /// Modes whose output depends on the seed.
    pub fn is_randomized(self, cfg: &RunConfig) -> bool {
        match self {
            RunMode::Simulate | RunMode::ServeAlice => true,
            RunMode::Sweep => cfg.sweep.monte_carlo,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// QBER fed to the rate formula; the link model's QBER when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub variable: SweepVariable,
    /// `start:stop:step`, inclusive.
    pub grid: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber: Option<f64>,
    /// Also run a simulated session of `mc_emissions` at every point.
    pub monte_carlo: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            variable: SweepVariable::ChannelLossDb,
            grid: "0:14:0.5".into(),
            qber: None,
            monte_carlo: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub free: Vec<FreeVariable>,
    pub mu_bounds: [f64; 2],
    pub delta_phi_bounds: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber: Option<f64>,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        Self {
            free: vec![FreeVariable::Mu],
            mu_bounds: [0.001, 1.0],
            delta_phi_bounds: [0.005, 0.7],
            qber: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffSection {
    /// High comparator levels in units of the tomography intensity.
    pub thresholds: String,
}

impl Default for TradeoffSection {
    fn default() -> Self {
        Self {
            thresholds: "1.75:1.995:0.005".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<RunMode>,
    pub output_dir: PathBuf,
    /// Emissions in a `simulate` or `serve-alice` session.
    pub emissions: u64,
    /// Emissions per point in a Monte-Carlo sweep.
    pub mc_emissions: u64,
    /// `host:port` for the two-process modes.
    pub wire_address: String,
    pub link: LinkParams,
    pub stabilizer: StabilizerConfig,
    pub protocol: ProtocolOptions,
    pub analyze: AnalyzeSection,
    pub sweep: SweepSection,
    pub optimize: OptimizeSection,
    pub tradeoff: TradeoffSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            mode: None,
            output_dir: PathBuf::from("results"),
            emissions: 1_000_000,
            mc_emissions: 100_000,
            wire_address: "127.0.0.1:7284".into(),
            link: LinkParams::default(),
            stabilizer: StabilizerConfig::default(),
            protocol: ProtocolOptions::default(),
            analyze: AnalyzeSection::default(),
            sweep: SweepSection::default(),
            optimize: OptimizeSection::default(),
            tradeoff: TradeoffSection::default(),
        }
    }
}

fn check_qber(key: &str, q: Option<f64>) -> Result<(), ParamError> {
    match q {
        Some(q) if !(0.0..=1.0).contains(&q) => Err(ParamError::new(key, format!("must lie in [0, 1], got {q}"))),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises to TOML")
    }

    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn session(&self) -> SessionParams {
        self.session_with(self.emissions)
    }

    fn session_with(&self, emissions: u64) -> SessionParams {
        SessionParams {
            seed: self.seed_or_default(),
            emissions,
            link: self.link.clone(),
            stabilizer: self.stabilizer.clone(),
            protocol: self.protocol.clone(),
        }
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec, ParamError> {
        let grid = parse_grid(&self.sweep.grid).map_err(|e| ParamError::new("sweep.grid", e.reason))?;
        Ok(SweepSpec {
            variable: self.sweep.variable,
            grid,
            fixed: self.link.clone(),
            qber: self.sweep.qber.map_or(QberSource::Model, QberSource::Fixed),
        })
    }

    pub fn monte_carlo(&self) -> Option<MonteCarlo> {
        self.sweep.monte_carlo.then(|| MonteCarlo {
            emissions: self.mc_emissions,
            seed: self.seed_or_default(),
            stabilizer: self.stabilizer.clone(),
            protocol: self.protocol.clone(),
        })
    }

    pub fn optimize_bounds(&self) -> Vec<Bound> {
        self.optimize
            .free
            .iter()
            .map(|&variable| {
                let [lo, hi] = match variable {
                    FreeVariable::Mu => self.optimize.mu_bounds,
                    FreeVariable::DeltaPhi => self.optimize.delta_phi_bounds,
                };
                Bound { variable, lo, hi }
            })
            .collect()
    }

    pub fn thresholds(&self) -> Result<Vec<f64>, ParamError> {
        parse_grid(&self.tradeoff.thresholds).map_err(|e| ParamError::new("tradeoff.thresholds", e.reason))
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        self.session().validate()?;
        self.session_with(self.mc_emissions)
            .validate()
            .map_err(|e| if e.key == "emissions" { ParamError::new("mc_emissions", e.reason) } else { e })?;
        self.wire_address
            .parse::<SocketAddr>()
            .map_err(|e| ParamError::new("wire_address", format!("`{}`: {e}", self.wire_address)))?;

        check_qber("analyze.qber", self.analyze.qber)?;
        check_qber("sweep.qber", self.sweep.qber)?;
        check_qber("optimize.qber", self.optimize.qber)?;
        let spec = self.sweep_spec()?;
        if self.sweep.variable == SweepVariable::Qber && self.sweep.qber.is_some() {
            return Err(ParamError::new("sweep.qber", "cannot be fixed while sweeping the QBER"));
        }
        if self.sweep.monte_carlo && self.sweep.variable == SweepVariable::Qber {
            return Err(ParamError::new("sweep.monte_carlo", "the simulated QBER cannot be swept"));
        }
        for &x in &spec.grid {
            spec.variable
                .apply(&self.link, x)
                .validate()
                .map_err(|e| ParamError::new("sweep.grid", format!("{x}: {e}")))?;
        }

        let free = &self.optimize.free;
        if free.is_empty() || free.len() > 2 || (free.len() == 2 && free[0] == free[1]) {
            return Err(ParamError::new("optimize.free", "choose one or two distinct variables"));
        }
        for (key, [lo, hi]) in [
            ("optimize.mu_bounds", self.optimize.mu_bounds),
            ("optimize.delta_phi_bounds", self.optimize.delta_phi_bounds),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(ParamError::new(key, format!("need 0 < lo ≤ hi, got [{lo}, {hi}]")));
            }
        }
        self.thresholds()?;
        Ok(())
    }
}

/// Read and validate a config file. Keys absent from the file keep their
/// defaults.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let cfg = RunConfig::from_toml(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}
