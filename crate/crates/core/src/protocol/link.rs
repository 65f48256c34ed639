//! Physical-layer run: transmitter, fibre and receiver driven by one seed.

use crate::channel::{transmit, ChannelState};
use crate::error::ParamError;
use crate::receiver::{advance_phase, detect, sifted_error_probability, DetectionEvent, Mode, ReceiverState, Stabilizer};
use crate::rng::{self, RngProvenance, SlotRng, Stream, StreamUsage};
use crate::transmitter::Transmitter;

use super::{AliceRecord, SessionParams};

/// Everything the physical layer produced in one run. Both parties can
/// regenerate it from the session seed; each keeps only its own half.
#[derive(Debug, Clone)]
pub struct LinkRun {
    pub emitted: u64,
    /// Postselected emissions, in index order.
    pub alice: Vec<AliceRecord>,
    /// Every detection, in index order, in either mode.
    pub bob: Vec<DetectionEvent>,
    /// Postselected emissions with at least one photon left at the channel
    /// output.
    pub channel_output_hits: u64,
    pub diagnostics: LinkDiagnostics,
    pub rng: RngProvenance,
}

/// Receiver-side statistics that are not visible in the detection list.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinkDiagnostics {
    pub duration_s: f64,
    pub keygen_time_s: f64,
    pub stabilizer_entries: u64,
    /// Sum over key-generation sifted detections of the conditional error
    /// probability given photon number, phase offset and reference phase.
    /// With dark counts enabled each detection contributes its observed
    /// error indicator instead.
    pub expected_errors: f64,
    pub expected_errors_sq: f64,
}

impl LinkDiagnostics {
    pub fn duty_cycle(&self) -> f64 {
        if self.duration_s > 0.0 {
            self.keygen_time_s / self.duration_s
        } else {
            0.0
        }
    }
}

pub fn simulate_link(params: &SessionParams) -> Result<LinkRun, ParamError> {
    params.validate()?;
    let link = &params.link;
    let mut tx = Transmitter::new(link, params.seed)?;
    let mut slots = SlotRng::new(params.seed);
    let mut drift = rng::stream(params.seed, Stream::Drift);
    let channel = ChannelState::from_params(link);
    let mut state = ReceiverState::new(link.visibility, link.dark_rate_hz);
    let mut stab = Stabilizer::new(params.stabilizer.clone());

    let mut alice = Vec::new();
    let mut bob = Vec::new();
    let mut hits = 0u64;
    let mut diag = LinkDiagnostics::default();
    let mut last_t = 0.0;

    for _ in 0..params.emissions {
        let e = tx.emit();
        let Some(label) = e.label else { continue };
        alice.push(AliceRecord {
            emission_index: e.index,
            label,
        });
        state = advance_phase(state, e.timestamp - last_t, link.drift_rate, &mut drift);
        last_t = e.timestamp;
        stab.tick(&mut state, e.timestamp);

        let r = slots.at(e.index);
        let t = transmit(e.photon_count, &channel, r);
        hits += (t.at_channel_output > 0) as u64;
        let Some(ev) = detect(t.at_detector, e.delta_phi, &state, link.clock_hz, e.index, r) else {
            continue;
        };
        bob.push(ev);
        if ev.detector.basis() != label.basis() {
            continue;
        }
        let error = ev.detector != label;
        if ev.mode_at_detection == Mode::KeyGen {
            let w = if link.dark_rate_hz == 0.0 {
                sifted_error_probability(t.at_detector, e.delta_phi, state.theta, state.visibility, label)
            } else {
                error as u8 as f64
            };
            diag.expected_errors += w;
            diag.expected_errors_sq += w * w;
        }
        stab.observe(&mut state, error, e.timestamp);
    }

    diag.duration_s = params.emissions as f64 / link.clock_hz;
    stab.tick(&mut state, diag.duration_s);
    diag.keygen_time_s = stab.keygen_time();
    diag.stabilizer_entries = stab.entries();

    let rng = RngProvenance {
        algorithm: rng::ALGORITHM.to_string(),
        seed: params.seed,
        streams: vec![
            tx.usage(),
            StreamUsage::slots(params.emissions),
            StreamUsage::of(Stream::Drift, &drift),
        ],
    };
    Ok(LinkRun {
        emitted: params.emissions,
        alice,
        bob,
        channel_output_hits: hits,
        diagnostics: diag,
        rng,
    })
}
