//! Closed-form key rates, parameter sweeps and optimisation.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, ParamError};
use crate::protocol::{self, ProtocolOptions, SessionParams};
use crate::receiver::StabilizerConfig;
use crate::security::{self, delta_factor, refer_gain};
use crate::types::{KeyRateReport, LinkParams, PostselectionWindow, Regime};

/// Per-gate probability that at least one of the four detectors dark-counts.
fn dark_click_probability(params: &LinkParams) -> f64 {
    1.0 - (1.0 - params.dark_probability()).powi(4)
}

/// Detection probability per postselected qubit, signal or dark.
pub fn detector_gain(params: &LinkParams) -> f64 {
    let signal = -(-params.mu * params.channel_transmittance() * params.receiver_transmittance()).exp_m1();
    1.0 - (1.0 - signal) * (1.0 - dark_click_probability(params))
}

/// Expected QBER of the sifted key.
///
/// Signal clicks err with probability `(1 − V·Δ(δφ))/2`; clicks with only
/// dark counts err half the time. The two are mixed in proportion to their
/// share of detections, so the result tends to ½ when darks dominate.
pub fn qber_model(params: &LinkParams) -> f64 {
    let delta = delta_factor(params.window.delta_phi).expect("window validated with the parameters");
    let optical = 0.5 * (1.0 - params.visibility * delta);
    let p = dark_click_probability(params);
    if p == 0.0 {
        return optical;
    }
    let q = -(-params.mu * params.channel_transmittance() * params.receiver_transmittance()).exp_m1();
    (optical * q + 0.5 * p) / (q + p)
}

/// Asymptotic key rate at the given QBER.
///
/// The rate is `clock · (4δφ/π) · Q_det · ½ · duty · secret fraction`. The
/// security bound sees the detector-plane gain referred back through the
/// receiver when `trusted_receiver` is set.
pub fn analytic_rate(params: &LinkParams, qber: f64) -> Result<KeyRateReport, AnalysisError> {
    params.validate()?;
    if !(0.0..=1.0).contains(&qber) {
        return Err(ParamError::new("qber", format!("must lie in [0, 1], got {qber}")).into());
    }
    let gain_detector = detector_gain(params);
    let gain_q = if params.trusted_receiver {
        refer_gain(gain_detector, params.receiver_transmittance())
    } else {
        gain_detector
    };
    let sifted_rate_keygen_hz = params.clock_hz * params.window.acceptance_total() * gain_detector * 0.5;
    let sifted_rate_hz = sifted_rate_keygen_hz * params.duty_cycle;
    let p_multi = security::p_multi(params.mu)?;
    let kf = if gain_q > 0.0 && qber < 0.5 {
        security::secret_fraction(gain_q, qber, params.mu, params.ec_efficiency)?
    } else {
        security::KeyFraction {
            p_multi,
            y1: 0.0,
            e1_bound: 0.5,
            leak_ec: params.ec_efficiency * security::binary_entropy(qber.min(0.5))?,
            raw: 0.0,
            value: 0.0,
            regime: if gain_q > 0.0 {
                Regime::PhaseErrorSaturated
            } else {
                Regime::NoSinglePhotonYield
            },
        }
    };
    Ok(KeyRateReport {
        gain_q,
        gain_detector,
        qber,
        p_multi,
        y1: kf.y1,
        e1_bound: kf.e1_bound,
        leak_ec: kf.leak_ec,
        secret_fraction: kf.value,
        secret_rate_hz: sifted_rate_hz * kf.value,
        sifted_rate_keygen_hz,
        sifted_rate_hz,
        duty_cycle: params.duty_cycle,
        regime: kf.regime,
    })
}

/// Where the QBER fed to the key-rate formula comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QberSource {
    Model,
    Fixed(f64),
}

impl QberSource {
    pub fn at(self, params: &LinkParams) -> f64 {
        match self {
            QberSource::Model => qber_model(params),
            QberSource::Fixed(q) => q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    ChannelLossDb,
    Mu,
    DeltaPhi,
    Qber,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::ChannelLossDb => "channel_loss_db",
            SweepVariable::Mu => "mu",
            SweepVariable::DeltaPhi => "delta_phi",
            SweepVariable::Qber => "qber",
        }
    }

    /// `fixed` with this variable set to `x`.
    pub fn apply(self, fixed: &LinkParams, x: f64) -> LinkParams {
        let mut p = fixed.clone();
        match self {
            SweepVariable::ChannelLossDb => p.channel_loss_db = x,
            SweepVariable::Mu => p.mu = x,
            SweepVariable::DeltaPhi => p.window.delta_phi = x,
            SweepVariable::Qber => {}
        }
        p
    }
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepVariable {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, ParamError> {
        Ok(match s {
            "channel_loss_db" | "loss" => SweepVariable::ChannelLossDb,
            "mu" => SweepVariable::Mu,
            "delta_phi" => SweepVariable::DeltaPhi,
            "qber" => SweepVariable::Qber,
            _ => {
                return Err(ParamError::new(
                    "variable",
                    format!("unknown sweep variable `{s}` (channel_loss_db, mu, delta_phi, qber)"),
                ))
            }
        })
    }
}

/// Parse `start:stop:step` into an inclusive grid. The end point is kept
/// when it lies within a millionth of a step of the last value.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, ParamError> {
    let err = |why: &str| ParamError::new("grid", format!("`{spec}`: {why}"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>().map_err(|_| err("expected start:stop:step")))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(err("expected start:stop:step"));
    };
    if !(step > 0.0 && start.is_finite() && stop.is_finite() && stop >= start) {
        return Err(err("need a positive step and stop ≥ start"));
    }
    let n = ((stop - start) / step + 1e-6).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    pub fixed: LinkParams,
    pub qber: QberSource,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.grid.is_empty() {
            return Err(AnalysisError::InvalidSweep("grid is empty".into()));
        }
        if self.grid.iter().any(|x| !x.is_finite()) {
            return Err(AnalysisError::InvalidSweep("grid values must be finite".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AnalysisError::InvalidSweep("grid must be strictly increasing".into()));
        }
        if self.variable == SweepVariable::Qber && matches!(self.qber, QberSource::Fixed(_)) {
            return Err(AnalysisError::InvalidSweep("a QBER sweep cannot also fix the QBER".into()));
        }
        for &x in &self.grid {
            self.variable.apply(&self.fixed, x).validate()?;
        }
        self.fixed.validate()?;
        Ok(())
    }

    fn qber_at(&self, params: &LinkParams, x: f64) -> f64 {
        match self.variable {
            SweepVariable::Qber => x,
            _ => self.qber.at(params),
        }
    }
}

/// Monte-Carlo settings for a sweep. Every point uses the same seed, so
/// neighbouring points share their random numbers and differ only through
/// the swept parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub emissions: u64,
    pub seed: u64,
    pub stabilizer: StabilizerConfig,
    pub protocol: ProtocolOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPoint {
    pub rate_hz: f64,
    /// One standard error of `rate_hz`.
    pub rate_se_hz: f64,
    pub qber: f64,
    pub sifted_rate_keygen_hz: f64,
    pub duty_cycle: f64,
    pub final_key_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurvePoint {
    pub x: f64,
    pub analytic_rate_hz: f64,
    /// QBER fed to the analytic formula.
    pub qber_model: f64,
    pub regime: Regime,
    pub mc: Option<McPoint>,
}

impl RateCurvePoint {
    pub fn mc_rate_hz(&self) -> Option<f64> {
        self.mc.as_ref().map(|m| m.rate_hz)
    }
}

fn sweep_point(spec: &SweepSpec, mc: Option<&MonteCarlo>, x: f64) -> Result<RateCurvePoint, AnalysisError> {
    let params = spec.variable.apply(&spec.fixed, x);
    let qber = spec.qber_at(&params, x);
    let report = analytic_rate(&params, qber)?;
    let mc = match mc {
        None => None,
        Some(m) => {
            let session = protocol::run_session(&SessionParams {
                seed: m.seed,
                emissions: m.emissions,
                link: params,
                stabilizer: m.stabilizer.clone(),
                protocol: m.protocol.clone(),
            })?;
            Some(McPoint {
                rate_hz: session.report.secret_rate_hz,
                rate_se_hz: session.uncertainty.secret_rate_hz,
                qber: session.report.qber,
                sifted_rate_keygen_hz: session.report.sifted_rate_keygen_hz,
                duty_cycle: session.report.duty_cycle,
                final_key_bits: session.tally.final_key_bits,
            })
        }
    };
    Ok(RateCurvePoint {
        x,
        analytic_rate_hz: report.secret_rate_hz,
        qber_model: qber,
        regime: report.regime,
        mc,
    })
}

/// Evaluate the analytic rate, and optionally a simulated session, at every
/// grid point. Output order follows the grid.
pub fn sweep(spec: &SweepSpec, mc: Option<&MonteCarlo>) -> Result<Vec<RateCurvePoint>, AnalysisError> {
    spec.validate()?;
    if mc.is_some() && spec.variable == SweepVariable::Qber {
        return Err(AnalysisError::InvalidSweep(
            "the simulated QBER is an outcome and cannot be swept".into(),
        ));
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        spec.grid.par_iter().map(|&x| sweep_point(spec, mc, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        spec.grid.iter().map(|&x| sweep_point(spec, mc, x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeVariable {
    Mu,
    DeltaPhi,
}

impl FreeVariable {
    fn set(self, p: &mut LinkParams, v: f64) {
        match self {
            FreeVariable::Mu => p.mu = v,
            FreeVariable::DeltaPhi => p.window.delta_phi = v,
        }
    }

    fn get(self, p: &LinkParams) -> f64 {
        match self {
            FreeVariable::Mu => p.mu,
            FreeVariable::DeltaPhi => p.window.delta_phi,
        }
    }
}

impl FromStr for FreeVariable {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, ParamError> {
        match s {
            "mu" => Ok(FreeVariable::Mu),
            "delta_phi" => Ok(FreeVariable::DeltaPhi),
            _ => Err(ParamError::new("free", format!("`{s}` cannot be optimised (mu, delta_phi)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub variable: FreeVariable,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub params: LinkParams,
    pub report: KeyRateReport,
}

const SCAN_POINTS: usize = 200;
const MAX_ROUNDS: usize = 60;

struct Objective<'a> {
    base: &'a LinkParams,
    qber: QberSource,
}

impl Objective<'_> {
    fn eval(&self, assign: &[(FreeVariable, f64)]) -> f64 {
        let mut p = self.base.clone();
        for &(v, x) in assign {
            v.set(&mut p, x);
        }
        analytic_rate(&p, self.qber.at(&p)).map_or(0.0, |r| r.secret_rate_hz)
    }
}

/// Maximise `f` on `[lo, hi]`: uniform scan, then golden-section search in
/// the bracket around the best scan point. Ties go to the smaller argument.
fn maximise_1d<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, f(lo));
    }
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let at = |i: usize| if i == SCAN_POINTS - 1 { hi } else { lo + i as f64 * step };
    let (mut best_i, mut best) = (0, f(lo));
    for i in 1..SCAN_POINTS {
        let v = f(at(i));
        if v > best {
            best_i = i;
            best = v;
        }
    }
    if best <= 0.0 {
        return (lo, best);
    }
    let (mut a, mut b) = (at(best_i.saturating_sub(1)), at((best_i + 1).min(SCAN_POINTS - 1)));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-12 * (hi - lo) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let (x, v) = if fc >= fd { (c, fc) } else { (d, fd) };
    if v > best {
        (x, v)
    } else {
        (at(best_i), best)
    }
}

/// Maximise the analytic rate over one or two of `μ` and `δφ`.
///
/// One variable: scan plus golden section. Two variables: coordinate
/// descent from the best point of a coarse two-dimensional scan, each step
/// a one-dimensional maximisation over the full bound, until the rate
/// stops improving by more than 1e−12 relative.
pub fn optimize(params: &LinkParams, bounds: &[Bound], qber: QberSource) -> Result<Optimum, AnalysisError> {
    params.validate()?;
    if bounds.is_empty() || bounds.len() > 2 {
        return Err(ParamError::new("free", "optimise over one or two of mu, delta_phi").into());
    }
    if bounds.len() == 2 && bounds[0].variable == bounds[1].variable {
        return Err(ParamError::new("free", "variables must differ").into());
    }
    for b in bounds {
        if !(b.lo.is_finite() && b.hi.is_finite() && b.lo <= b.hi) {
            return Err(ParamError::new("bounds", format!("need finite lo ≤ hi, got [{}, {}]", b.lo, b.hi)).into());
        }
        let mut p = params.clone();
        for x in [b.lo, b.hi] {
            b.variable.set(&mut p, x);
            p.validate()?;
        }
    }
    // sort so ties resolve on μ before δφ
    let mut bounds = bounds.to_vec();
    bounds.sort_by_key(|b| b.variable as u8);
    let obj = Objective { base: params, qber };

    let mut point: Vec<(FreeVariable, f64)> = bounds.iter().map(|b| (b.variable, b.lo)).collect();
    let mut value;
    if bounds.len() == 1 {
        let b = bounds[0];
        let (x, v) = maximise_1d(|x| obj.eval(&[(b.variable, x)]), b.lo, b.hi);
        point[0].1 = x;
        value = v;
    } else {
        let n = 40;
        let grid = |b: &Bound, i: usize| {
            if i == n - 1 {
                b.hi
            } else {
                b.lo + (b.hi - b.lo) * i as f64 / (n - 1) as f64
            }
        };
        value = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let cand = [(bounds[0].variable, grid(&bounds[0], i)), (bounds[1].variable, grid(&bounds[1], j))];
                let v = obj.eval(&cand);
                if v > value {
                    value = v;
                    point = cand.to_vec();
                }
            }
        }
        if value > 0.0 {
            for _ in 0..MAX_ROUNDS {
                let before = value;
                for k in 0..2 {
                    let b = bounds[k];
                    let (x, v) = maximise_1d(
                        |x| {
                            let mut c = point.clone();
                            c[k].1 = x;
                            obj.eval(&c)
                        },
                        b.lo,
                        b.hi,
                    );
                    if v > value {
                        point[k].1 = x;
                        value = v;
                    }
                }
                if value - before <= 1e-12 * value {
                    break;
                }
            }
        }
    }
    if !(value > 0.0) {
        return Err(AnalysisError::NoPositiveRate);
    }
    let mut best = params.clone();
    for &(v, x) in &point {
        v.set(&mut best, x);
    }
    let report = analytic_rate(&best, qber.at(&best))?;
    debug_assert_eq!(FreeVariable::Mu.get(&best), best.mu);
    Ok(Optimum { params: best, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    /// High comparator level in units of the mean tomography intensity.
    pub threshold: f64,
    pub delta_phi: f64,
    pub accept_rate_per_label_hz: f64,
    pub accept_rate_per_basis_hz: f64,
    pub qber_model: f64,
}

/// Acceptance rate and model QBER as the high comparator level moves.
///
/// Thresholds are in units of `tomography_intensity`; the valid range is
/// `(I(1 + cos π/4), 2I)`, where the four acceptance arcs stay disjoint.
pub fn postselection_tradeoff(params: &LinkParams, thresholds: &[f64]) -> Result<Vec<TradeoffRow>, AnalysisError> {
    params.validate()?;
    let i = params.window.tomography_intensity;
    thresholds
        .iter()
        .map(|&t| {
            let delta_phi = (t / i - 1.0).clamp(-1.0, 1.0).acos();
            let window = PostselectionWindow::new(delta_phi, i)
                .ok()
                .filter(|_| t > i && t < 2.0 * i)
                .ok_or_else(|| {
                    ParamError::new(
                        "threshold",
                        format!("{t} lies outside ({}, {})", i * (1.0 + std::f64::consts::FRAC_1_SQRT_2), 2.0 * i),
                    )
                })?;
            let p = LinkParams {
                window,
                ..params.clone()
            };
            let per_label = p.clock_hz * window.acceptance_per_label();
            Ok(TradeoffRow {
                threshold: t,
                delta_phi,
                accept_rate_per_label_hz: per_label,
                accept_rate_per_basis_hz: 2.0 * per_label,
                qber_model: qber_model(&p),
            })
        })
        .collect()
}

/// Comma-separated curve table with a header row.
pub fn write_curve_csv<W: Write>(w: &mut W, variable: SweepVariable, points: &[RateCurvePoint]) -> io::Result<()> {
    writeln!(
        w,
        "{variable},analytic_rate_hz,qber_model,regime,mc_rate_hz,mc_rate_se_hz,mc_qber,mc_duty_cycle"
    )?;
    for p in points {
        write!(w, "{},{},{},{:?}", p.x, p.analytic_rate_hz, p.qber_model, p.regime)?;
        match &p.mc {
            Some(m) => writeln!(w, ",{},{},{},{}", m.rate_hz, m.rate_se_hz, m.qber, m.duty_cycle)?,
            None => writeln!(w, ",,,,")?,
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct NdjsonRecord<'a> {
    variable: SweepVariable,
    point: &'a RateCurvePoint,
    params: LinkParams,
    qber_source: QberSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    monte_carlo: Option<&'a MonteCarlo>,
}

/// One JSON object per point, each carrying the full parameter set it was
/// evaluated at.
pub fn write_curve_ndjson<W: Write>(
    w: &mut W,
    spec: &SweepSpec,
    mc: Option<&MonteCarlo>,
    points: &[RateCurvePoint],
) -> io::Result<()> {
    for p in points {
        let rec = NdjsonRecord {
            variable: spec.variable,
            point: p,
            params: spec.variable.apply(&spec.fixed, p.x),
            qber_source: spec.qber,
            monte_carlo: mc,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}
