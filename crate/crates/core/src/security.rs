//! Closed-form statistics and the GLLP-style secret-key bound for passively
//! prepared, phase-randomised weak coherent pulses.
//!
//! Everything here is a pure function of its arguments.

use std::f64::consts::PI;

use crate::error::SecurityError;
use crate::types::Regime;

fn domain(name: &'static str, value: f64, domain: &'static str) -> SecurityError {
    SecurityError::Domain { name, value, domain }
}

/// Binary Shannon entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy(p: f64) -> Result<f64, SecurityError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(domain("p", p, "[0, 1]"));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

/// Probability that a Poissonian pulse pair with mean `mu` carries two or
/// more photons: `1 − (1 + μ)e^(−μ)`.
pub fn p_multi(mu: f64) -> Result<f64, SecurityError> {
    if !(mu >= 0.0) {
        return Err(domain("mu", mu, "[0, ∞)"));
    }
    // 1 - (1+μ)e^-μ = -expm1(-μ) - μe^-μ, which stays accurate for small μ
    Ok((-(-mu).exp_m1() - mu * (-mu).exp()).max(0.0))
}

/// Lower bound on the fraction of detections that came from single-photon
/// pulses, `max(0, 1 − p_multi/Q)`.
///
/// `gain_q` must already be referred to the plane the adversary controls.
/// Fails with [`SecurityError::MultiphotonDominated`] when `p_multi > Q`.
pub fn y1_lower_bound(gain_q: f64, mu: f64) -> Result<f64, SecurityError> {
    if !(gain_q > 0.0 && gain_q <= 1.0) {
        return Err(domain("gain_q", gain_q, "(0, 1]"));
    }
    let pm = p_multi(mu)?;
    if pm > gain_q {
        return Err(SecurityError::MultiphotonDominated {
            p_multi: pm,
            gain: gain_q,
        });
    }
    Ok((1.0 - pm / gain_q).max(0.0))
}

fn check_window(delta_phi: f64) -> Result<(), SecurityError> {
    if !(delta_phi > 0.0 && delta_phi <= PI) {
        return Err(domain("delta_phi", delta_phi, "(0, π]"));
    }
    Ok(())
}

/// `sin(δφ)/δφ`: the coherence left in a state whose phase is uniformly
/// spread over `[x − δφ, x + δφ]`.
pub fn delta_factor(delta_phi: f64) -> Result<f64, SecurityError> {
    check_window(delta_phi)?;
    Ok(1.0 - one_minus_sinc(delta_phi))
}

/// Probability that a postselected single photon is found in the state
/// orthogonal to its label, `(1 − Δ)/2`. This is the bit-error floor of an
/// ideal receiver.
pub fn prep_error_rate(delta_phi: f64) -> Result<f64, SecurityError> {
    check_window(delta_phi)?;
    Ok(0.5 * one_minus_sinc(delta_phi))
}

/// `1 − sin(x)/x` without cancellation for small `x`.
fn one_minus_sinc(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0))
    } else {
        1.0 - x.sin() / x
    }
}

/// Decomposition of the secret fraction into its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyFraction {
    pub p_multi: f64,
    pub y1: f64,
    /// Single-photon phase-error bound, `min(QBER/Y₁, ½)`.
    pub e1_bound: f64,
    /// `f·h(QBER)` bits per sifted bit.
    pub leak_ec: f64,
    /// `Y₁[1 − h(e₁)] − leak`, not clamped.
    pub raw: f64,
    /// `max(0, raw)`, forced to zero outside the secure regime.
    pub value: f64,
    pub regime: Regime,
}

/// Secret bits per sifted bit: `Y₁[1 − h(QBER/Y₁)] − f·h(QBER)`.
///
/// Returns a zero `value` with a non-secure [`Regime`] instead of an error
/// when the bound is vacuous; errors are reserved for invalid inputs.
pub fn secret_fraction(gain_q: f64, qber: f64, mu: f64, f_ec: f64) -> Result<KeyFraction, SecurityError> {
    if !(gain_q > 0.0 && gain_q <= 1.0) {
        return Err(domain("gain_q", gain_q, "(0, 1]"));
    }
    if !(0.0..0.5).contains(&qber) {
        return Err(domain("qber", qber, "[0, 0.5)"));
    }
    if !(f_ec >= 1.0) {
        return Err(domain("f_ec", f_ec, "[1, ∞)"));
    }
    let pm = p_multi(mu)?;
    let leak_ec = f_ec * binary_entropy(qber)?;
    let y1 = match y1_lower_bound(gain_q, mu) {
        Ok(y) => y,
        Err(SecurityError::MultiphotonDominated { .. }) => 0.0,
        Err(e) => return Err(e),
    };
    if y1 == 0.0 {
        return Ok(KeyFraction {
            p_multi: pm,
            y1,
            e1_bound: 0.5,
            leak_ec,
            raw: -leak_ec,
            value: 0.0,
            regime: Regime::NoSinglePhotonYield,
        });
    }
    let e1_bound = (qber / y1).min(0.5);
    let raw = y1 * (1.0 - binary_entropy(e1_bound)?) - leak_ec;
    let regime = if e1_bound >= 0.5 {
        Regime::PhaseErrorSaturated
    } else if raw <= 0.0 {
        Regime::LeakageExceedsKey
    } else {
        Regime::Secure
    };
    Ok(KeyFraction {
        p_multi: pm,
        y1,
        e1_bound,
        leak_ec,
        raw,
        value: if regime.is_secure() { raw } else { 0.0 },
        regime,
    })
}

/// Exact CDF of the tomography reading `I(1 + cos Δφ)` for `Δφ` uniform on
/// `[0, 2π)`: `1 − arccos(v/I − 1)/π`. Its density is the arcsine law.
pub fn arcsine_cdf(v: f64, i0: f64) -> Result<f64, SecurityError> {
    if !(i0 > 0.0 && i0.is_finite()) {
        return Err(domain("i0", i0, "(0, ∞)"));
    }
    if !(v >= 0.0 && v <= 2.0 * i0) {
        return Err(domain("v", v, "[0, 2·i0]"));
    }
    let c = (v / i0 - 1.0).clamp(-1.0, 1.0);
    Ok(1.0 - c.acos() / PI)
}

/// Refer a detector-plane gain back through a trusted transmittance
/// `eta_trusted`, inverting Poissonian thinning: `1 − (1 − Q)^(1/η)`.
pub fn refer_gain(gain_detector: f64, eta_trusted: f64) -> f64 {
    if gain_detector >= 1.0 {
        return 1.0;
    }
    -((1.0 - gain_detector).ln() / eta_trusted).exp_m1()
}
