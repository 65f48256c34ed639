use super::*;
use crate::receiver::DetectionEvent;
use crate::security::refer_gain;
use crate::stats::binomial_se;
use StateLabel::*;

// h(0.058) to 20 digits
const H_0058: f64 = 0.319_453_965_809_446_1;

fn ev(index: u64, detector: StateLabel, mode: Mode) -> DetectionEvent {
    DetectionEvent {
        emission_index: index,
        detector,
        from_dark: false,
        mode_at_detection: mode,
    }
}

fn rec(index: u64, label: StateLabel) -> AliceRecord {
    AliceRecord {
        emission_index: index,
        label,
    }
}

fn records(n: usize, error_every: Option<usize>) -> Vec<SiftedRecord> {
    (0..n)
        .map(|i| {
            let a = i % 3 == 0;
            let flip = error_every.is_some_and(|k| i % k == 0);
            SiftedRecord {
                emission_index: i as u64,
                basis: Basis::X,
                alice_bit: a,
                bob_bit: a ^ flip,
                disclosed: false,
            }
        })
        .collect()
}

#[test]
fn sifting_examples() {
    let alice = [rec(4, X1), rec(7, Y1), rec(9, Y0)];
    let bob = [ev(4, X0, Mode::KeyGen), ev(7, X1, Mode::KeyGen), ev(9, Y0, Mode::Stabilizing)];
    let s = sift(&alice, &bob).unwrap();
    assert_eq!(
        s,
        vec![SiftedRecord {
            emission_index: 4,
            basis: Basis::X,
            alice_bit: true,
            bob_bit: false,
            disclosed: false,
        }]
    );
}

#[test]
fn misaligned_streams_are_rejected() {
    let alice = [rec(4, X1), rec(7, Y1)];
    assert!(matches!(
        sift(&alice, &[ev(5, X1, Mode::KeyGen)]),
        Err(ProtocolError::IndexMismatch(_))
    ));
    assert!(matches!(
        sift(&alice, &[ev(7, Y1, Mode::KeyGen), ev(4, X1, Mode::KeyGen)]),
        Err(ProtocolError::IndexMismatch(_))
    ));
    assert!(matches!(
        sift(&[rec(7, Y1), rec(4, X1)], &[]),
        Err(ProtocolError::IndexMismatch(_))
    ));
}

#[test]
fn lossless_sifting_keeps_half() {
    let params = SessionParams {
        seed: 3,
        emissions: 1_000_000,
        link: LinkParams {
            channel_loss_db: 0.0,
            detector_efficiency: 1.0,
            visibility: 1.0,
            drift_rate: 0.0,
            ..LinkParams::default()
        },
        ..SessionParams::default()
    };
    let link = simulate_link(&params).unwrap();
    let kg = link.bob.iter().filter(|e| e.mode_at_detection == Mode::KeyGen).count() as u64;
    let sifted = sift(&link.alice, &link.bob).unwrap().len() as f64;
    let ratio = sifted / kg as f64;
    assert!((ratio - 0.5).abs() < 3.0 * binomial_se(0.5, kg), "{ratio}");
}

#[test]
fn qber_estimate_examples() {
    let mut rng = rng::stream(1, Stream::Disclosure);
    let mut clean = records(1000, None);
    assert_eq!(estimate_qber(&mut clean, 0.1, &mut rng).unwrap().qber, 0.0);
    assert_eq!(clean.iter().filter(|r| r.disclosed).count(), 100);

    let mut flipped = records(1000, Some(1));
    assert_eq!(estimate_qber(&mut flipped, 0.5, &mut rng).unwrap().qber, 1.0);

    assert!(matches!(
        estimate_qber(&mut [], 0.1, &mut rng),
        Err(ProtocolError::DegenerateEstimate)
    ));
    assert!(matches!(
        estimate_qber(&mut records(4, None), 0.1, &mut rng),
        Err(ProtocolError::DegenerateEstimate)
    ));
    assert!(estimate_qber(&mut records(4, None), 0.0, &mut rng).is_err());
}

#[test]
fn qber_estimate_on_planted_errors() {
    let n = 1_000_000;
    let mut rng = rng::stream(2, Stream::Link);
    let mut rs = records(n, None);
    for r in rs.iter_mut() {
        r.bob_bit = r.alice_bit ^ (rng.random::<f64>() < 0.058);
    }
    let mut drng = rng::stream(2, Stream::Disclosure);
    let est = estimate_qber(&mut rs, 0.1, &mut drng).unwrap();
    assert_eq!(est.disclosed, 100_000);
    assert!((est.qber - 0.058).abs() < 3.0 * binomial_se(0.058, est.disclosed), "{}", est.qber);
}

#[test]
fn reconciliation_accounting() {
    let clean = records(500, None);
    let r = reconcile_and_account(&clean, 0.0, 1.16).unwrap();
    assert_eq!(r.leak_bits, 0);
    assert_eq!(r.corrected_errors, 0);
    assert_eq!(r.alice_key, clean.iter().map(|x| x.alice_bit).collect::<Vec<_>>());

    let noisy = records(10_000, Some(17));
    let r = reconcile_and_account(&noisy, 0.058, 1.16).unwrap();
    assert_eq!(r.leak_bits, (1.16 * H_0058 * 1e4).ceil() as u64);
    assert_eq!(r.leak_bits, 3706);
    assert_eq!(r.corrected_errors, 10_000u64.div_ceil(17));
    assert_eq!(r.alice_key, r.bob_key);

    let mut half = records(10, None);
    half[0].disclosed = true;
    assert_eq!(reconcile_and_account(&half, 0.0, 1.0).unwrap().alice_key.len(), 9);

    assert!(matches!(
        reconcile_and_account(&noisy, 0.5, 1.0),
        Err(ProtocolError::Aborted(_))
    ));
    // f·h(q) ≥ 1 leaves nothing
    assert!(matches!(
        reconcile_and_account(&noisy, 0.3, 1.2),
        Err(ProtocolError::Aborted(_))
    ));
}

#[test]
fn amplification_lengths() {
    let key: Vec<bool> = (0..1024).map(|i| i % 5 < 2).collect();
    assert!(privacy_amplification(&key, 0.0, 9).unwrap().is_empty());
    let out = privacy_amplification(&key, 0.25, 9).unwrap();
    assert_eq!(out.len(), 256);
    assert_eq!(out, privacy_amplification(&key, 0.25, 9).unwrap());
    assert_eq!(privacy_amplification(&key, 0.1, 9).unwrap().len(), 102);
    assert!(privacy_amplification(&key, 1.5, 9).is_err());
}

#[test]
fn digest_covers_length() {
    assert_ne!(key_digest(&[false]), key_digest(&[false, false]));
    assert_ne!(key_digest(&[true, false]), key_digest(&[false, true]));
}

#[test]
fn session_params_roundtrip_canonically() {
    let p = SessionParams {
        seed: 77,
        emissions: 1234,
        ..SessionParams::default()
    };
    let text = p.to_canonical();
    let q = SessionParams::from_canonical(&text).unwrap();
    assert_eq!(p, q);
    assert_eq!(text, q.to_canonical());
    assert!(SessionParams::from_canonical("bogus = 1").is_err());
    assert!(SessionParams::from_canonical("emissions = 0").is_err());
}

fn short_session(seed: u64, loss: f64) -> SessionParams {
    SessionParams {
        seed,
        emissions: 300_000,
        link: LinkParams {
            channel_loss_db: loss,
            ..LinkParams::default()
        },
        ..SessionParams::default()
    }
}

#[test]
fn session_invariants() {
    let r = run_session(&short_session(5, 0.0)).unwrap();
    let t = &r.tally;
    assert!(t.aborted.is_none(), "{:?}", t.aborted);
    assert!(t.emitted >= t.postselected && t.postselected >= t.detected);
    assert!(t.detected >= t.detected_keygen && t.detected_keygen >= t.sifted);
    assert_eq!(t.sifted, t.disclosed + r.key_indices.len() as u64);
    assert!(t.final_key_bits > 0 && t.final_key_bits <= r.key_indices.len() as u64);
    assert_eq!(r.alice_key, r.bob_key);
    let disclosed: std::collections::HashSet<_> = r.disclosed_indices.iter().collect();
    assert!(r.key_indices.iter().all(|i| !disclosed.contains(i)));
    assert_eq!(
        t.qber_estimate.unwrap(),
        t.errors_in_disclosed as f64 / t.disclosed as f64
    );
    assert_eq!(r, run_session(&short_session(5, 0.0)).unwrap());
    assert_ne!(r.alice_key, run_session(&short_session(6, 0.0)).unwrap().alice_key);
}

#[test]
fn trusted_plane_gain_is_consistent() {
    for (seed, loss) in [(1, 0.0), (2, 3.3), (3, 6.7)] {
        let r = run_session(&short_session(seed, loss)).unwrap();
        let n = r.tally.postselected;
        let q_out = r.channel_output_hits as f64 / n as f64;
        let eta = LinkParams::default().receiver_transmittance();
        let referred = refer_gain(r.report.gain_detector, eta);
        assert_eq!(referred, r.report.gain_q);
        // referred gain inherits the detector-plane sampling error
        let se = binomial_se(r.report.gain_detector, n) / eta + binomial_se(q_out, n);
        assert!((referred - q_out).abs() < 3.0 * se, "{loss} dB: {referred} vs {q_out}");
    }
}

#[test]
fn untrusted_receiver_uses_detector_gain() {
    let mut p = short_session(4, 3.0);
    p.link.trusted_receiver = false;
    let r = run_session(&p).unwrap();
    assert_eq!(r.report.gain_q, r.report.gain_detector);
}

#[test]
fn high_loss_gives_no_key() {
    let r = run_session(&short_session(8, 14.0)).unwrap();
    assert_eq!(r.report.secret_rate_hz, 0.0);
    assert!(!r.report.regime.is_secure());
    assert_eq!(r.tally.final_key_bits, 0);
}

#[test]
fn poor_visibility_aborts() {
    let mut p = short_session(9, 0.0);
    p.link.visibility = 0.6;
    // keep the loop generating key so the disclosed sample is large
    p.stabilizer.q_enter = 0.45;
    p.stabilizer.q_exit = 0.4;
    let r = run_session(&p).unwrap();
    assert!(r.tally.aborted.is_some());
    assert_eq!(r.tally.final_key_bits, 0);
    assert_eq!(r.tally.leak_ec_bits, 0);
    assert!(r.key_indices.is_empty());
}

#[test]
fn conditional_qber_tracks_counted_errors() {
    let r = run_session(&SessionParams {
        emissions: 2_000_000,
        ..short_session(10, 0.0)
    })
    .unwrap();
    let t = &r.tally;
    let counted = (t.errors_in_disclosed + t.corrected_errors) as f64 / t.sifted as f64;
    let se = binomial_se(counted, t.sifted);
    assert!((counted - r.report.qber).abs() < 4.0 * se, "{counted} vs {}", r.report.qber);
    assert!(r.uncertainty.qber < se);
}

#[test]
fn report_rate_decomposes() {
    let r = run_session(&short_session(11, 0.0)).unwrap();
    let rep = &r.report;
    assert!((rep.secret_rate_hz - rep.sifted_rate_hz * rep.secret_fraction).abs() < 1e-9);
    assert!((rep.sifted_rate_hz - rep.sifted_rate_keygen_hz * rep.duty_cycle).abs() < 1e-9);
    assert!(rep.duty_cycle > 0.3 && rep.duty_cycle < 0.7, "{}", rep.duty_cycle);
}
