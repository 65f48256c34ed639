//! Classical post-processing and the end-to-end session.
//!
//! Sifting matches postselection records and detections by emission index.
//! A random sample of sifted bits is disclosed to estimate the QBER, the
//! rest is corrected by an oracle (both ends are simulated) with the leak
//! charged analytically, and a Toeplitz hash compresses the corrected key.

pub mod link;
pub mod toeplitz;
pub mod wire;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ParamError, ProtocolError};
use crate::receiver::{DetectionEvent, Mode, StabilizerConfig};
use crate::rng::{self, RngProvenance, Stream, StreamUsage};
use crate::security::{self, binary_entropy, refer_gain};
use crate::types::{Basis, KeyRateReport, LinkParams, Regime, StateLabel};

pub use link::{simulate_link, LinkDiagnostics, LinkRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolOptions {
    /// Fraction of sifted bits disclosed for QBER estimation.
    pub disclosure_fraction: f64,
    /// Abort when the disclosed-sample QBER reaches this value.
    pub qber_abort: f64,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            disclosure_fraction: 0.1,
            qber_abort: 0.12,
        }
    }
}

impl ProtocolOptions {
    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.disclosure_fraction > 0.0 && self.disclosure_fraction <= 1.0) {
            return Err(ParamError::new(
                "protocol.disclosure_fraction",
                format!("must lie in (0, 1], got {}", self.disclosure_fraction),
            ));
        }
        if !(self.qber_abort > 0.0 && self.qber_abort <= 0.5) {
            return Err(ParamError::new(
                "protocol.qber_abort",
                format!("must lie in (0, 0.5], got {}", self.qber_abort),
            ));
        }
        Ok(())
    }
}

/// Everything that determines a session bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionParams {
    pub seed: u64,
    pub emissions: u64,
    pub link: LinkParams,
    pub stabilizer: StabilizerConfig,
    pub protocol: ProtocolOptions,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            seed: 0,
            emissions: 1_000_000,
            link: LinkParams::default(),
            stabilizer: StabilizerConfig::default(),
            protocol: ProtocolOptions::default(),
        }
    }
}

impl SessionParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        self.link.validate()?;
        self.stabilizer.validate()?;
        self.protocol.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(ParamError::new("seed", "must be below 2^63"));
        }
        if self.emissions == 0 || self.emissions > i64::MAX as u64 {
            return Err(ParamError::new("emissions", "must be positive and below 2^63"));
        }
        Ok(())
    }

    /// Canonical TOML text; the same parameters always give the same bytes.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("session parameters serialise to TOML")
    }

    pub fn from_canonical(text: &str) -> Result<Self, ProtocolError> {
        let p: SessionParams = toml::from_str(text).map_err(|e| ProtocolError::Wire(format!("session config: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// One postselected emission as the transmitter recorded it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliceRecord {
    pub emission_index: u64,
    pub label: StateLabel,
}

/// Public basis announcement; the bit is withheld.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Announcement {
    pub index: u64,
    pub basis: Basis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiftedRecord {
    pub emission_index: u64,
    pub basis: Basis,
    pub alice_bit: bool,
    pub bob_bit: bool,
    pub disclosed: bool,
}

fn check_increasing(who: &str, indices: impl Iterator<Item = u64>) -> Result<(), ProtocolError> {
    let mut last: Option<u64> = None;
    for i in indices {
        if last.is_some_and(|l| i <= l) {
            return Err(ProtocolError::IndexMismatch(format!(
                "{who} indices not strictly increasing at {i}"
            )));
        }
        last = Some(i);
    }
    Ok(())
}

/// Emission indices announced by both sides in the same basis.
///
/// Both lists must be strictly increasing, and every detection must belong
/// to a postselected emission.
pub fn sift_indices(alice: &[Announcement], bob: &[Announcement]) -> Result<Vec<u64>, ProtocolError> {
    check_increasing("transmitter", alice.iter().map(|a| a.index))?;
    check_increasing("receiver", bob.iter().map(|b| b.index))?;
    let mut out = Vec::new();
    let mut a = alice.iter().peekable();
    for b in bob {
        while a.next_if(|x| x.index < b.index).is_some() {}
        match a.peek() {
            Some(x) if x.index == b.index => {
                if x.basis == b.basis {
                    out.push(b.index);
                }
            }
            _ => {
                return Err(ProtocolError::IndexMismatch(format!(
                    "detection at {} has no postselection record",
                    b.index
                )))
            }
        }
    }
    Ok(out)
}

pub fn alice_announcements(alice: &[AliceRecord]) -> Vec<Announcement> {
    alice
        .iter()
        .map(|r| Announcement {
            index: r.emission_index,
            basis: r.label.basis(),
        })
        .collect()
}

/// Key-generation detections as announcements. Detections made while
/// stabilising are public and never sifted.
pub fn keygen_announcements(bob: &[DetectionEvent]) -> Vec<Announcement> {
    bob.iter()
        .filter(|e| e.mode_at_detection == Mode::KeyGen)
        .map(|e| Announcement {
            index: e.emission_index,
            basis: e.detector.basis(),
        })
        .collect()
}

/// Pair postselection records with key-generation detections in the same
/// basis.
pub fn sift(alice: &[AliceRecord], bob: &[DetectionEvent]) -> Result<Vec<SiftedRecord>, ProtocolError> {
    let bob_kg: Vec<&DetectionEvent> = bob.iter().filter(|e| e.mode_at_detection == Mode::KeyGen).collect();
    let kept = sift_indices(&alice_announcements(alice), &keygen_announcements(bob))?;
    let mut ai = alice.iter();
    let mut bi = bob_kg.into_iter();
    let mut out = Vec::with_capacity(kept.len());
    for idx in kept {
        let a = ai.find(|r| r.emission_index == idx).expect("sifted index is postselected");
        let b = bi.find(|e| e.emission_index == idx).expect("sifted index is detected");
        out.push(SiftedRecord {
            emission_index: idx,
            basis: a.label.basis(),
            alice_bit: a.label.bit(),
            bob_bit: b.detector.bit(),
            disclosed: false,
        });
    }
    Ok(out)
}

/// Sorted positions of a uniform random subset of `round(fraction·n)` of
/// `n` records.
pub fn choose_disclosure<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberEstimate {
    pub disclosed: u64,
    pub errors: u64,
    pub qber: f64,
}

impl QberEstimate {
    pub fn from_counts(disclosed: u64, errors: u64) -> Result<Self, ProtocolError> {
        if disclosed == 0 {
            return Err(ProtocolError::DegenerateEstimate);
        }
        Ok(Self {
            disclosed,
            errors,
            qber: errors as f64 / disclosed as f64,
        })
    }
}

/// Disclose a random sample, mark it, and return the error fraction in it.
pub fn estimate_qber<R: Rng + ?Sized>(
    records: &mut [SiftedRecord],
    sample_fraction: f64,
    rng: &mut R,
) -> Result<QberEstimate, ProtocolError> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(ParamError::new("protocol.disclosure_fraction", format!("must lie in (0, 1], got {sample_fraction}")).into());
    }
    let picked = choose_disclosure(records.len(), sample_fraction, rng);
    let mut errors = 0;
    for &i in &picked {
        records[i].disclosed = true;
        errors += (records[i].alice_bit != records[i].bob_bit) as u64;
    }
    QberEstimate::from_counts(picked.len() as u64, errors)
}

/// `ceil(f·h(q)·n)`; errors when `f·h(q) ≥ 1` since nothing can be left.
pub fn leak_bits(n: usize, qber: f64, f_ec: f64) -> Result<u64, ProtocolError> {
    if !(0.0..0.5).contains(&qber) {
        return Err(ProtocolError::Aborted(format!("QBER {qber} leaves no key")));
    }
    let per_bit = f_ec * binary_entropy(qber).expect("qber checked");
    if per_bit >= 1.0 {
        return Err(ProtocolError::Aborted(format!(
            "error correction would disclose {per_bit:.3} bits per sifted bit"
        )));
    }
    Ok((per_bit * n as f64).ceil() as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconciliation {
    pub alice_key: Vec<bool>,
    /// Receiver key after correction; equal to `alice_key`.
    pub bob_key: Vec<bool>,
    pub corrected_errors: u64,
    pub leak_bits: u64,
}

/// Oracle error correction over the undisclosed records, charging
/// `ceil(f·h(qber)·n)` bits of leakage.
pub fn reconcile_and_account(records: &[SiftedRecord], qber: f64, f_ec: f64) -> Result<Reconciliation, ProtocolError> {
    let key: Vec<&SiftedRecord> = records.iter().filter(|r| !r.disclosed).collect();
    let leak = leak_bits(key.len(), qber, f_ec)?;
    let alice_key: Vec<bool> = key.iter().map(|r| r.alice_bit).collect();
    let corrected_errors = key.iter().filter(|r| r.alice_bit != r.bob_bit).count() as u64;
    Ok(Reconciliation {
        bob_key: alice_key.clone(),
        alice_key,
        corrected_errors,
        leak_bits: leak,
    })
}

/// `floor(n·secret_fraction)`.
pub fn final_key_length(n: usize, secret_fraction: f64) -> usize {
    (n as f64 * secret_fraction.clamp(0.0, 1.0)).floor() as usize
}

/// Compress `key` to `floor(n·secret_fraction)` bits with a Toeplitz hash
/// drawn from `seed`.
pub fn privacy_amplification(key: &[bool], secret_fraction: f64, seed: u64) -> Result<Vec<bool>, ParamError> {
    if !(0.0..=1.0).contains(&secret_fraction) {
        return Err(ParamError::new(
            "secret_fraction",
            format!("must lie in [0, 1], got {secret_fraction}"),
        ));
    }
    let m = final_key_length(key.len(), secret_fraction);
    Ok(toeplitz::hash(key, m, seed))
}

/// SHA-256 of the key length followed by the bits packed MSB-first.
pub fn key_digest(key: &[bool]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((key.len() as u64).to_be_bytes());
    for chunk in key.chunks(8) {
        let byte = chunk.iter().enumerate().fold(0u8, |b, (i, &bit)| b | ((bit as u8) << (7 - i)));
        h.update([byte]);
    }
    h.finalize().into()
}

/// Counts a finished session leaves behind. Identical on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTally {
    pub emitted: u64,
    pub postselected: u64,
    /// Detections in either mode.
    pub detected: u64,
    pub detected_keygen: u64,
    pub sifted: u64,
    pub disclosed: u64,
    pub errors_in_disclosed: u64,
    pub qber_estimate: Option<f64>,
    /// Errors fixed by error correction in the undisclosed part.
    pub corrected_errors: u64,
    pub leak_ec_bits: u64,
    pub final_key_bits: u64,
    pub aborted: Option<String>,
}

/// One-standard-error uncertainties of the Monte-Carlo report.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateUncertainty {
    pub qber: f64,
    pub gain_q: f64,
    pub secret_rate_hz: f64,
    pub sifted_rate_keygen_hz: f64,
}

/// Measured quantities the key-rate report is computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportInputs {
    pub emitted: u64,
    pub postselected: u64,
    pub detected: u64,
    pub detected_keygen: u64,
    pub sifted: u64,
    pub diagnostics: LinkDiagnostics,
}

fn key_fraction_raw(link: &LinkParams, gain_q: f64, qber: f64) -> (security::KeyFraction, bool) {
    if gain_q <= 0.0 || !(0.0..0.5).contains(&qber) {
        let regime = if gain_q <= 0.0 {
            Regime::NoSinglePhotonYield
        } else {
            Regime::PhaseErrorSaturated
        };
        let kf = security::KeyFraction {
            p_multi: security::p_multi(link.mu).unwrap_or(0.0),
            y1: 0.0,
            e1_bound: 0.5,
            leak_ec: link.ec_efficiency,
            raw: -link.ec_efficiency,
            value: 0.0,
            regime,
        };
        return (kf, false);
    }
    let kf = security::secret_fraction(gain_q.min(1.0), qber, link.mu, link.ec_efficiency)
        .expect("inputs checked against their domains");
    (kf, true)
}

/// Evaluate the asymptotic key rate on measured link statistics.
///
/// The rate is `clock · (postselected/emitted) · (detected/postselected) ·
/// (sifted/keygen detections) · duty · secret fraction`. The QBER is the
/// conditional-expectation estimate carried in the diagnostics, which has
/// much lower variance than an error count over the same detections.
pub fn assemble_report(link: &LinkParams, m: &ReportInputs) -> (KeyRateReport, RateUncertainty) {
    let n = m.emitted.max(1) as f64;
    let ps = m.postselected as f64;
    let gain_detector = if m.postselected > 0 { m.detected as f64 / ps } else { 0.0 };
    let eta_rx = link.receiver_transmittance();
    let refer = |q: f64| if link.trusted_receiver { refer_gain(q, eta_rx) } else { q };
    let gain_q = refer(gain_detector);
    let sift_factor = if m.detected_keygen > 0 {
        m.sifted as f64 / m.detected_keygen as f64
    } else {
        0.0
    };
    let s = m.sifted.max(1) as f64;
    let qber = if m.sifted > 0 { m.diagnostics.expected_errors / s } else { 0.0 };
    let duty = m.diagnostics.duty_cycle();
    let (kf, evaluable) = key_fraction_raw(link, gain_q, qber);
    let sifted_rate_keygen_hz = link.clock_hz * (ps / n) * gain_detector * sift_factor;
    let pre = sifted_rate_keygen_hz * duty;
    let secret_rate_hz = pre * kf.value;

    // delta method on the unclamped fraction
    let var_q = (m.diagnostics.expected_errors_sq / s - qber * qber).max(0.0) / s;
    let var_gd = gain_detector * (1.0 - gain_detector) / ps.max(1.0);
    let dq_ref = if link.trusted_receiver && gain_detector < 1.0 {
        (1.0 - gain_q) / (eta_rx * (1.0 - gain_detector))
    } else {
        1.0
    };
    let var_gain_q = dq_ref * dq_ref * var_gd;
    let (d_qber, d_gain) = if evaluable {
        let raw = |g: f64, q: f64| key_fraction_raw(link, g, q).0.raw;
        let hq = 1e-6;
        let hg = 1e-6 * gain_q.max(1e-9);
        let dq = (raw(gain_q, (qber + hq).min(0.499_999)) - raw(gain_q, (qber - hq).max(0.0))) / (2.0 * hq);
        let dg = (raw((gain_q + hg).min(1.0), qber) - raw((gain_q - hg).max(1e-12), qber)) / (2.0 * hg);
        (dq, dg)
    } else {
        (0.0, 0.0)
    };
    let rel_count = 1.0 / s;
    let var_rate = pre * pre * (kf.value * kf.value * rel_count + d_qber * d_qber * var_q + d_gain * d_gain * var_gain_q);

    let report = KeyRateReport {
        gain_q,
        gain_detector,
        qber,
        p_multi: kf.p_multi,
        y1: kf.y1,
        e1_bound: kf.e1_bound,
        leak_ec: kf.leak_ec,
        secret_fraction: kf.value,
        secret_rate_hz,
        sifted_rate_keygen_hz,
        sifted_rate_hz: pre,
        duty_cycle: duty,
        regime: kf.regime,
    };
    let unc = RateUncertainty {
        qber: var_q.sqrt(),
        gain_q: var_gain_q.sqrt(),
        secret_rate_hz: var_rate.sqrt(),
        sifted_rate_keygen_hz: sifted_rate_keygen_hz * rel_count.sqrt(),
    };
    (report, unc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub tally: SessionTally,
    /// Asymptotic key rate evaluated on this run's link statistics.
    pub report: KeyRateReport,
    pub uncertainty: RateUncertainty,
    /// Transmitter's final key, when this process holds it.
    pub alice_key: Option<Vec<bool>>,
    /// Receiver's final key, when this process holds it.
    pub bob_key: Option<Vec<bool>>,
    pub disclosed_indices: Vec<u64>,
    /// Emission indices of the bits fed to privacy amplification.
    pub key_indices: Vec<u64>,
    pub channel_output_hits: u64,
    pub diagnostics: LinkDiagnostics,
    pub rng: RngProvenance,
}

/// Outcome of disclosure: either a usable estimate or the reason to stop.
pub(crate) fn disclosure_verdict(
    estimate: Result<QberEstimate, ProtocolError>,
    opts: &ProtocolOptions,
) -> (Option<QberEstimate>, Option<String>) {
    match estimate {
        Err(e) => (None, Some(e.to_string())),
        Ok(est) if est.qber >= opts.qber_abort => (
            Some(est),
            Some(format!("estimated QBER {:.4} reached the abort threshold {}", est.qber, opts.qber_abort)),
        ),
        Ok(est) => (Some(est), None),
    }
}

/// Run transmitter, channel, receiver and post-processing in this process.
pub fn run_session(params: &SessionParams) -> Result<SessionResult, ProtocolError> {
    let link = simulate_link(params)?;
    let detected_keygen = link.bob.iter().filter(|e| e.mode_at_detection == Mode::KeyGen).count() as u64;
    let mut records = sift(&link.alice, &link.bob)?;
    let mut drng = rng::stream(params.seed, Stream::Disclosure);
    let estimate = estimate_qber(&mut records, params.protocol.disclosure_fraction, &mut drng);
    let (estimate, mut aborted) = disclosure_verdict(estimate, &params.protocol);
    let amp_seed: u64 = drng.random();

    let inputs = ReportInputs {
        emitted: link.emitted,
        postselected: link.alice.len() as u64,
        detected: link.bob.len() as u64,
        detected_keygen,
        sifted: records.len() as u64,
        diagnostics: link.diagnostics,
    };
    let (report, uncertainty) = assemble_report(&params.link, &inputs);

    let mut recon = None;
    if aborted.is_none() {
        let q = estimate.expect("estimate present when not aborted").qber;
        match reconcile_and_account(&records, q, params.link.ec_efficiency) {
            Ok(r) => recon = Some(r),
            Err(ProtocolError::Aborted(why)) => aborted = Some(why),
            Err(e) => return Err(e),
        }
    }
    let corrected_errors = recon.as_ref().map_or(0, |r| r.corrected_errors);
    let leak = recon.as_ref().map_or(0, |r| r.leak_bits);
    let (alice_key, bob_key) = match &recon {
        Some(r) => (
            privacy_amplification(&r.alice_key, report.secret_fraction, amp_seed)?,
            privacy_amplification(&r.bob_key, report.secret_fraction, amp_seed)?,
        ),
        None => (Vec::new(), Vec::new()),
    };

    let tally = SessionTally {
        emitted: link.emitted,
        postselected: inputs.postselected,
        detected: inputs.detected,
        detected_keygen,
        sifted: inputs.sifted,
        disclosed: estimate.map_or(0, |e| e.disclosed),
        errors_in_disclosed: estimate.map_or(0, |e| e.errors),
        qber_estimate: estimate.map(|e| e.qber),
        corrected_errors,
        leak_ec_bits: leak,
        final_key_bits: alice_key.len() as u64,
        aborted,
    };
    let mut rng_info = link.rng.clone();
    rng_info.streams.push(StreamUsage::of(Stream::Disclosure, &drng));
    Ok(SessionResult {
        tally,
        report,
        uncertainty,
        alice_key: Some(alice_key),
        bob_key: Some(bob_key),
        disclosed_indices: records.iter().filter(|r| r.disclosed).map(|r| r.emission_index).collect(),
        key_indices: if recon.is_some() {
            records.iter().filter(|r| !r.disclosed).map(|r| r.emission_index).collect()
        } else {
            Vec::new()
        },
        channel_output_hits: link.channel_output_hits,
        diagnostics: link.diagnostics,
        rng: rng_info,
    })
}

#[cfg(test)]
mod tests;
