//! Domain types shared by the simulator and the analytic model.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ParamError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    X,
    Y,
}

impl Basis {
    pub fn as_byte(self) -> u8 {
        match self {
            Basis::X => 0,
            Basis::Y => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Basis::X),
            1 => Some(Basis::Y),
            _ => None,
        }
    }
}

/// One of the four equatorial BB84 states, named after the receiver output
/// that should fire for it.
///
/// | label | basis | bit | center phase |
/// |-------|-------|-----|--------------|
/// | X1    | X     | 1   | 0            |
/// | X0    | X     | 0   | π            |
/// | Y1    | Y     | 1   | π/2          |
/// | Y0    | Y     | 0   | 3π/2         |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateLabel {
    X1,
    X0,
    Y1,
    Y0,
}

impl StateLabel {
    pub const ALL: [StateLabel; 4] = [StateLabel::X1, StateLabel::X0, StateLabel::Y1, StateLabel::Y0];

    pub fn basis(self) -> Basis {
        match self {
            StateLabel::X1 | StateLabel::X0 => Basis::X,
            StateLabel::Y1 | StateLabel::Y0 => Basis::Y,
        }
    }

    pub fn bit(self) -> bool {
        matches!(self, StateLabel::X1 | StateLabel::Y1)
    }

    /// Pulse-pair phase difference this state is centred on, in `[0, 2π)`.
    pub fn center_phase(self) -> f64 {
        match self {
            StateLabel::X1 => 0.0,
            StateLabel::X0 => PI,
            StateLabel::Y1 => FRAC_PI_2,
            StateLabel::Y0 => 3.0 * FRAC_PI_2,
        }
    }

    pub fn from_parts(basis: Basis, bit: bool) -> Self {
        match (basis, bit) {
            (Basis::X, true) => StateLabel::X1,
            (Basis::X, false) => StateLabel::X0,
            (Basis::Y, true) => StateLabel::Y1,
            (Basis::Y, false) => StateLabel::Y0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            StateLabel::X1 => 0,
            StateLabel::X0 => 1,
            StateLabel::Y1 => 2,
            StateLabel::Y0 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StateLabel::X1 => "X1",
            StateLabel::X0 => "X0",
            StateLabel::Y1 => "Y1",
            StateLabel::Y0 => "Y0",
        }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StateLabel {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "X1" => Ok(StateLabel::X1),
            "X0" => Ok(StateLabel::X0),
            "Y1" => Ok(StateLabel::Y1),
            "Y0" => Ok(StateLabel::Y0),
            other => Err(ParamError::new("label", format!("unknown state label {other:?}"))),
        }
    }
}

/// Wrap an angle into `[0, 2π)`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_signed(phi: f64) -> f64 {
    let w = wrap_phase(phi);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Half-width of the accepted phase arc around each of the four centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostselectionWindow {
    pub delta_phi: f64,
    pub tomography_intensity: f64,
}

impl Default for PostselectionWindow {
    fn default() -> Self {
        Self {
            delta_phi: PI / 40.0,
            tomography_intensity: 1.0,
        }
    }
}

impl PostselectionWindow {
    pub fn new(delta_phi: f64, tomography_intensity: f64) -> Result<Self, ParamError> {
        let w = Self {
            delta_phi,
            tomography_intensity,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.delta_phi > 0.0 && self.delta_phi < FRAC_PI_4) {
            return Err(ParamError::new(
                "link.window.delta_phi",
                format!("must lie in (0, π/4), got {}", self.delta_phi),
            ));
        }
        if !(self.tomography_intensity > 0.0 && self.tomography_intensity.is_finite()) {
            return Err(ParamError::new(
                "link.window.tomography_intensity",
                format!("must be positive, got {}", self.tomography_intensity),
            ));
        }
        Ok(())
    }

    /// Probability that a uniformly random phase lands in one label's arc.
    pub fn acceptance_per_label(&self) -> f64 {
        self.delta_phi / PI
    }

    /// Probability that a pulse pair is kept at all (four arcs).
    pub fn acceptance_total(&self) -> f64 {
        4.0 * self.delta_phi / PI
    }
}

/// Physical and security parameters of one transmitter–receiver link.
///
/// Defaults describe the deployed-fibre operating point. `visibility` and
/// `detector_efficiency` are fitted constants, not measured ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    /// Mean photon number per pulse pair (one qubit).
    pub mu: f64,
    /// Pulse-pair repetition rate.
    pub clock_hz: f64,
    pub channel_loss_db: f64,
    /// Insertion loss inside the receiver, before the detectors.
    pub receiver_loss_db: f64,
    pub detector_efficiency: f64,
    /// Interference visibility of the receiver interferometer.
    pub visibility: f64,
    /// Dark-count rate of each of the four detectors.
    pub dark_rate_hz: f64,
    /// Reference-phase diffusion, radians per square-root second.
    pub drift_rate: f64,
    /// Error-correction inefficiency `f`; leakage is `f·h(QBER)` per bit.
    pub ec_efficiency: f64,
    /// Fraction of wall-clock time spent generating key.
    pub duty_cycle: f64,
    /// Refer the gain to the channel output, treating receiver losses as
    /// outside the adversary's control.
    pub trusted_receiver: bool,
    /// Relative Gaussian noise on the tomography photodiode readings.
    pub intensity_noise: f64,
    pub window: PostselectionWindow,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            mu: 0.15,
            clock_hz: 1.5e6,
            channel_loss_db: 6.7,
            receiver_loss_db: 0.0,
            detector_efficiency: 0.8,
            visibility: 0.885,
            dark_rate_hz: 0.0,
            drift_rate: 0.2,
            ec_efficiency: 1.16,
            duty_cycle: 0.5,
            trusted_receiver: true,
            intensity_noise: 0.0,
            window: PostselectionWindow::default(),
        }
    }
}

fn check(ok: bool, key: &str, msg: impl FnOnce() -> String) -> Result<(), ParamError> {
    if ok {
        Ok(())
    } else {
        Err(ParamError::new(key, msg()))
    }
}

fn probability(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        check(self.mu > 0.0 && self.mu.is_finite(), "link.mu", || {
            format!("must be positive, got {}", self.mu)
        })?;
        check(self.clock_hz > 0.0 && self.clock_hz.is_finite(), "link.clock_hz", || {
            format!("must be positive, got {}", self.clock_hz)
        })?;
        check(self.channel_loss_db >= 0.0, "link.channel_loss_db", || {
            format!("must be non-negative, got {}", self.channel_loss_db)
        })?;
        check(self.receiver_loss_db >= 0.0 && self.receiver_loss_db.is_finite(), "link.receiver_loss_db", || {
            format!("must be non-negative, got {}", self.receiver_loss_db)
        })?;
        check(
            probability(self.detector_efficiency) && self.detector_efficiency > 0.0,
            "link.detector_efficiency",
            || format!("must lie in (0, 1], got {}", self.detector_efficiency),
        )?;
        check(probability(self.visibility), "link.visibility", || {
            format!("must lie in [0, 1], got {}", self.visibility)
        })?;
        check(self.dark_rate_hz >= 0.0 && self.dark_rate_hz.is_finite(), "link.dark_rate_hz", || {
            format!("must be non-negative, got {}", self.dark_rate_hz)
        })?;
        check(
            self.dark_rate_hz / self.clock_hz <= 1.0,
            "link.dark_rate_hz",
            || "dark-count probability per gate exceeds 1".to_string(),
        )?;
        check(self.drift_rate >= 0.0 && self.drift_rate.is_finite(), "link.drift_rate", || {
            format!("must be non-negative, got {}", self.drift_rate)
        })?;
        check(self.ec_efficiency >= 1.0 && self.ec_efficiency.is_finite(), "link.ec_efficiency", || {
            format!("must be at least 1, got {}", self.ec_efficiency)
        })?;
        check(
            probability(self.duty_cycle) && self.duty_cycle > 0.0,
            "link.duty_cycle",
            || format!("must lie in (0, 1], got {}", self.duty_cycle),
        )?;
        check(self.intensity_noise >= 0.0 && self.intensity_noise.is_finite(), "link.intensity_noise", || {
            format!("must be non-negative, got {}", self.intensity_noise)
        })?;
        self.window.validate()
    }

    pub fn channel_transmittance(&self) -> f64 {
        db_to_transmittance(self.channel_loss_db)
    }

    /// Receiver insertion loss times detector efficiency.
    pub fn receiver_transmittance(&self) -> f64 {
        db_to_transmittance(self.receiver_loss_db) * self.detector_efficiency
    }

    /// Dark-click probability of a single detector in one pulse-pair slot.
    pub fn dark_probability(&self) -> f64 {
        self.dark_rate_hz / self.clock_hz
    }
}

pub fn db_to_transmittance(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// Why a key-rate evaluation produced no key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Secure,
    /// Multiphoton pulses account for every detection.
    NoSinglePhotonYield,
    /// The single-photon phase-error bound reached 1/2.
    PhaseErrorSaturated,
    /// Error-correction leakage consumes everything privacy amplification
    /// would leave.
    LeakageExceedsKey,
    /// The session stopped before producing a key.
    Aborted,
}

impl Regime {
    pub fn is_secure(self) -> bool {
        self == Regime::Secure
    }
}

/// Gains, error rates and secret-key rate of one link configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    /// Gain per postselected qubit at the plane used for the security bound.
    pub gain_q: f64,
    /// Gain per postselected qubit at the detectors.
    pub gain_detector: f64,
    pub qber: f64,
    pub p_multi: f64,
    pub y1: f64,
    pub e1_bound: f64,
    /// Error-correction leakage per sifted bit.
    pub leak_ec: f64,
    /// Secret bits per sifted bit, clamped at zero.
    pub secret_fraction: f64,
    pub secret_rate_hz: f64,
    /// Sifted bits per second of key-generation time.
    pub sifted_rate_keygen_hz: f64,
    /// Sifted bits per second of wall-clock time (after the duty cycle).
    pub sifted_rate_hz: f64,
    pub duty_cycle: f64,
    pub regime: Regime,
}
