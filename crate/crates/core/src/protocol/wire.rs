//! Two-process session over a reliable byte stream.
//!
//! Every frame is `[u32 payload length][u8 type][payload]`, integers
//! big-endian. Payloads:
//!
//! | type | name                  | payload                                            |
//! |------|-----------------------|----------------------------------------------------|
//! | 0x01 | SessionConfig         | UTF-8 canonical TOML of the session parameters     |
//! | 0x02 | PostselectionAnnounce | repeated `[u64 index][u8 basis]` (0 = X, 1 = Y)    |
//! | 0x03 | DetectionAnnounce     | repeated `[u64 index][u8 basis]`                   |
//! | 0x04 | Disclosure            | repeated `[u64 index][u8 bit]`                     |
//! | 0x05 | LeakReport            | `[u64 leak bits][u64 corrected errors]`            |
//! | 0x06 | AmplificationSeed     | `[u64 seed][u64 output bits]`                      |
//! | 0x07 | SessionSummary        | repeated `[u8 tag][u64 value]`; tag 0xFF carries a 32-byte key digest instead |
//!
//! Announcements are streamed in batches; an empty frame of the same type
//! ends the stream. The exchange is:
//!
//! 1. transmitter → SessionConfig, PostselectionAnnounce…
//! 2. receiver → DetectionAnnounce… (key-generation detections only), then
//!    a SessionSummary with its counters
//! 3. transmitter → Disclosure (its bits); receiver → Disclosure (its bits)
//! 4. receiver → LeakReport; transmitter → AmplificationSeed
//! 5. transmitter → final SessionSummary with digest; receiver replies with
//!    its own, and each side checks they agree.
//!
//! Each process regenerates the physical layer from the session seed and
//! keeps only its own half. The receiver reads the transmitter's labels only
//! to play the error-correction oracle.

use std::io::{self, BufReader, BufWriter, Read, Write};

use rand::Rng;

use super::{
    alice_announcements, assemble_report, choose_disclosure, disclosure_verdict, final_key_length, key_digest,
    keygen_announcements, leak_bits, privacy_amplification, sift_indices, simulate_link, Announcement,
    LinkDiagnostics, QberEstimate, ReportInputs, SessionParams, SessionResult, SessionTally,
};
use crate::error::ProtocolError;
use crate::receiver::Mode;
use crate::rng::{self, Stream, StreamUsage};
use crate::types::{Basis, StateLabel};

pub const MAX_PAYLOAD: usize = 64 << 20;
const BATCH: usize = 4096;

pub mod kind {
    pub const SESSION_CONFIG: u8 = 0x01;
    pub const POSTSELECTION_ANNOUNCE: u8 = 0x02;
    pub const DETECTION_ANNOUNCE: u8 = 0x03;
    pub const DISCLOSURE: u8 = 0x04;
    pub const LEAK_REPORT: u8 = 0x05;
    pub const AMPLIFICATION_SEED: u8 = 0x06;
    pub const SESSION_SUMMARY: u8 = 0x07;
}

/// Summary tags. Floating-point values travel as their IEEE-754 bits.
pub mod tag {
    pub const EMITTED: u8 = 1;
    pub const POSTSELECTED: u8 = 2;
    pub const DETECTED: u8 = 3;
    pub const DETECTED_KEYGEN: u8 = 4;
    pub const SIFTED: u8 = 5;
    pub const DISCLOSED: u8 = 6;
    pub const ERRORS_IN_DISCLOSED: u8 = 7;
    pub const CORRECTED_ERRORS: u8 = 8;
    pub const LEAK_EC_BITS: u8 = 9;
    pub const FINAL_KEY_BITS: u8 = 10;
    pub const ABORTED: u8 = 11;
    pub const KEYGEN_TIME_S: u8 = 12;
    pub const EXPECTED_ERRORS: u8 = 13;
    pub const EXPECTED_ERRORS_SQ: u8 = 14;
    pub const STABILIZER_ENTRIES: u8 = 15;
    pub const CHANNEL_OUTPUT_HITS: u8 = 16;
    pub const DIGEST: u8 = 0xFF;
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Summary {
    pub fields: Vec<(u8, u64)>,
    pub digest: Option<[u8; 32]>,
}

impl Summary {
    pub fn get(&self, t: u8) -> Result<u64, ProtocolError> {
        self.fields
            .iter()
            .find(|(k, _)| *k == t)
            .map(|&(_, v)| v)
            .ok_or_else(|| ProtocolError::Wire(format!("summary lacks tag {t}")))
    }

    fn get_f64(&self, t: u8) -> Result<f64, ProtocolError> {
        self.get(t).map(f64::from_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    SessionConfig(String),
    PostselectionAnnounce(Vec<Announcement>),
    DetectionAnnounce(Vec<Announcement>),
    Disclosure(Vec<(u64, bool)>),
    LeakReport { leak_bits: u64, corrected_errors: u64 },
    AmplificationSeed { seed: u64, output_bits: u64 },
    SessionSummary(Summary),
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Frame::SessionConfig(_) => kind::SESSION_CONFIG,
            Frame::PostselectionAnnounce(_) => kind::POSTSELECTION_ANNOUNCE,
            Frame::DetectionAnnounce(_) => kind::DETECTION_ANNOUNCE,
            Frame::Disclosure(_) => kind::DISCLOSURE,
            Frame::LeakReport { .. } => kind::LEAK_REPORT,
            Frame::AmplificationSeed { .. } => kind::AMPLIFICATION_SEED,
            Frame::SessionSummary(_) => kind::SESSION_SUMMARY,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        let records = |p: &mut Vec<u8>, xs: &[Announcement]| {
            for a in xs {
                p.extend_from_slice(&a.index.to_be_bytes());
                p.push(a.basis.as_byte());
            }
        };
        match self {
            Frame::SessionConfig(s) => p.extend_from_slice(s.as_bytes()),
            Frame::PostselectionAnnounce(xs) | Frame::DetectionAnnounce(xs) => records(&mut p, xs),
            Frame::Disclosure(xs) => {
                for &(i, b) in xs {
                    p.extend_from_slice(&i.to_be_bytes());
                    p.push(b as u8);
                }
            }
            Frame::LeakReport {
                leak_bits,
                corrected_errors,
            } => {
                p.extend_from_slice(&leak_bits.to_be_bytes());
                p.extend_from_slice(&corrected_errors.to_be_bytes());
            }
            Frame::AmplificationSeed { seed, output_bits } => {
                p.extend_from_slice(&seed.to_be_bytes());
                p.extend_from_slice(&output_bits.to_be_bytes());
            }
            Frame::SessionSummary(s) => {
                for &(t, v) in &s.fields {
                    p.push(t);
                    p.extend_from_slice(&v.to_be_bytes());
                }
                if let Some(d) = s.digest {
                    p.push(tag::DIGEST);
                    p.extend_from_slice(&d);
                }
            }
        }
        p
    }

    fn parse(kind: u8, p: &[u8]) -> Result<Self, ProtocolError> {
        let bad = |what: &str| ProtocolError::Wire(format!("malformed {what} payload of {} bytes", p.len()));
        let u64_at = |i: usize| u64::from_be_bytes(p[i..i + 8].try_into().expect("8 bytes"));
        let nine = |what: &str| -> Result<Vec<(u64, u8)>, ProtocolError> {
            if !p.len().is_multiple_of(9) {
                return Err(bad(what));
            }
            Ok(p.chunks_exact(9)
                .map(|c| (u64::from_be_bytes(c[..8].try_into().expect("8 bytes")), c[8]))
                .collect())
        };
        let announcements = |what: &str| -> Result<Vec<Announcement>, ProtocolError> {
            nine(what)?
                .into_iter()
                .map(|(index, b)| {
                    Basis::from_byte(b)
                        .map(|basis| Announcement { index, basis })
                        .ok_or_else(|| bad(what))
                })
                .collect()
        };
        Ok(match kind {
            kind::SESSION_CONFIG => {
                Frame::SessionConfig(String::from_utf8(p.to_vec()).map_err(|_| bad("session config"))?)
            }
            kind::POSTSELECTION_ANNOUNCE => Frame::PostselectionAnnounce(announcements("postselection")?),
            kind::DETECTION_ANNOUNCE => Frame::DetectionAnnounce(announcements("detection")?),
            kind::DISCLOSURE => Frame::Disclosure(
                nine("disclosure")?
                    .into_iter()
                    .map(|(i, b)| if b <= 1 { Ok((i, b == 1)) } else { Err(bad("disclosure")) })
                    .collect::<Result<_, _>>()?,
            ),
            kind::LEAK_REPORT if p.len() == 16 => Frame::LeakReport {
                leak_bits: u64_at(0),
                corrected_errors: u64_at(8),
            },
            kind::AMPLIFICATION_SEED if p.len() == 16 => Frame::AmplificationSeed {
                seed: u64_at(0),
                output_bits: u64_at(8),
            },
            kind::SESSION_SUMMARY => {
                let mut s = Summary::default();
                let mut i = 0;
                while i < p.len() {
                    if p[i] == tag::DIGEST {
                        if p.len() < i + 33 {
                            return Err(bad("summary"));
                        }
                        s.digest = Some(p[i + 1..i + 33].try_into().expect("32 bytes"));
                        i += 33;
                    } else {
                        if p.len() < i + 9 {
                            return Err(bad("summary"));
                        }
                        s.fields.push((p[i], u64_at(i + 1)));
                        i += 9;
                    }
                }
                Frame::SessionSummary(s)
            }
            kind::LEAK_REPORT => return Err(bad("leak report")),
            kind::AMPLIFICATION_SEED => return Err(bad("amplification seed")),
            k => return Err(ProtocolError::Wire(format!("unknown frame type {k:#04x}"))),
        })
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), ProtocolError> {
    let payload = frame.payload();
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Wire(format!("payload of {} bytes exceeds the limit", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(&[frame.kind()])?;
    w.write_all(&payload)?;
    Ok(())
}

/// Next frame, or `None` if the peer closed the stream cleanly between
/// frames.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Wire("stream closed inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(head[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Wire(format!("declared payload of {len} bytes exceeds the limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Wire("stream closed inside a frame".into()),
        _ => e.into(),
    })?;
    Frame::parse(head[4], &payload).map(Some)
}

struct Conn<R: Read, W: Write> {
    r: BufReader<R>,
    w: BufWriter<W>,
}

impl<R: Read, W: Write> Conn<R, W> {
    fn new(r: R, w: W) -> Self {
        Self {
            r: BufReader::new(r),
            w: BufWriter::new(w),
        }
    }

    fn send(&mut self, f: &Frame) -> Result<(), ProtocolError> {
        write_frame(&mut self.w, f)
    }

    fn flush(&mut self) -> Result<(), ProtocolError> {
        self.w.flush().map_err(Into::into)
    }

    fn recv(&mut self, expected: u8) -> Result<Frame, ProtocolError> {
        self.flush()?;
        match read_frame(&mut self.r)? {
            Some(f) if f.kind() == expected => Ok(f),
            Some(f) => Err(ProtocolError::Wire(format!(
                "expected frame {expected:#04x}, got {:#04x}",
                f.kind()
            ))),
            None => Err(ProtocolError::Wire("peer closed the connection".into())),
        }
    }

    fn send_announcements(&mut self, kind: u8, list: &[Announcement]) -> Result<(), ProtocolError> {
        let wrap = |v: Vec<Announcement>| match kind {
            kind::POSTSELECTION_ANNOUNCE => Frame::PostselectionAnnounce(v),
            _ => Frame::DetectionAnnounce(v),
        };
        for chunk in list.chunks(BATCH) {
            self.send(&wrap(chunk.to_vec()))?;
        }
        self.send(&wrap(Vec::new()))
    }

    fn recv_announcements(&mut self, kind: u8) -> Result<Vec<Announcement>, ProtocolError> {
        let mut out = Vec::new();
        loop {
            let batch = match self.recv(kind)? {
                Frame::PostselectionAnnounce(v) | Frame::DetectionAnnounce(v) => v,
                _ => unreachable!("recv checked the frame type"),
            };
            if batch.is_empty() {
                return Ok(out);
            }
            out.extend(batch);
        }
    }

    fn recv_summary(&mut self) -> Result<Summary, ProtocolError> {
        match self.recv(kind::SESSION_SUMMARY)? {
            Frame::SessionSummary(s) => Ok(s),
            _ => unreachable!("recv checked the frame type"),
        }
    }

    fn recv_disclosure(&mut self) -> Result<Vec<(u64, bool)>, ProtocolError> {
        match self.recv(kind::DISCLOSURE)? {
            Frame::Disclosure(v) => Ok(v),
            _ => unreachable!("recv checked the frame type"),
        }
    }
}

fn label_at(records: &[super::AliceRecord], index: u64) -> Result<StateLabel, ProtocolError> {
    records
        .binary_search_by_key(&index, |r| r.emission_index)
        .map(|i| records[i].label)
        .map_err(|_| ProtocolError::IndexMismatch(format!("no postselection record at {index}")))
}

fn receiver_counters(bob: &[crate::receiver::DetectionEvent], hits: u64, d: &LinkDiagnostics) -> Summary {
    let keygen = bob.iter().filter(|e| e.mode_at_detection == Mode::KeyGen).count() as u64;
    Summary {
        fields: vec![
            (tag::DETECTED, bob.len() as u64),
            (tag::DETECTED_KEYGEN, keygen),
            (tag::KEYGEN_TIME_S, d.keygen_time_s.to_bits()),
            (tag::EXPECTED_ERRORS, d.expected_errors.to_bits()),
            (tag::EXPECTED_ERRORS_SQ, d.expected_errors_sq.to_bits()),
            (tag::STABILIZER_ENTRIES, d.stabilizer_entries),
            (tag::CHANNEL_OUTPUT_HITS, hits),
        ],
        digest: None,
    }
}

fn tally_summary(t: &SessionTally, digest: [u8; 32]) -> Summary {
    Summary {
        fields: vec![
            (tag::EMITTED, t.emitted),
            (tag::POSTSELECTED, t.postselected),
            (tag::DETECTED, t.detected),
            (tag::DETECTED_KEYGEN, t.detected_keygen),
            (tag::SIFTED, t.sifted),
            (tag::DISCLOSED, t.disclosed),
            (tag::ERRORS_IN_DISCLOSED, t.errors_in_disclosed),
            (tag::CORRECTED_ERRORS, t.corrected_errors),
            (tag::LEAK_EC_BITS, t.leak_ec_bits),
            (tag::FINAL_KEY_BITS, t.final_key_bits),
            (tag::ABORTED, t.aborted.is_some() as u64),
        ],
        digest: Some(digest),
    }
}

fn compare_summaries(mine: &Summary, theirs: &Summary) -> Result<(), ProtocolError> {
    for &(t, v) in &mine.fields {
        let other = theirs.get(t)?;
        if other != v {
            return Err(ProtocolError::PeerMismatch(format!("summary tag {t}: {v} here, {other} there")));
        }
    }
    if mine.digest != theirs.digest {
        return Err(ProtocolError::PeerMismatch("final key digest".into()));
    }
    Ok(())
}

/// State both sides derive identically after sifting and disclosure.
struct Agreed {
    estimate: Option<QberEstimate>,
    aborted: Option<String>,
    disclosed: Vec<u64>,
    key_indices: Vec<u64>,
}

fn agree(
    params: &SessionParams,
    kept: &[u64],
    disclosure: &[(u64, bool)],
    peer: &[(u64, bool)],
) -> Result<Agreed, ProtocolError> {
    if disclosure.len() != peer.len() || disclosure.iter().zip(peer).any(|(a, b)| a.0 != b.0) {
        return Err(ProtocolError::PeerMismatch("disclosed indices".into()));
    }
    let errors = disclosure.iter().zip(peer).filter(|(a, b)| a.1 != b.1).count() as u64;
    let (estimate, mut aborted) =
        disclosure_verdict(QberEstimate::from_counts(disclosure.len() as u64, errors), &params.protocol);
    let disclosed: Vec<u64> = disclosure.iter().map(|d| d.0).collect();
    let mut key_indices = Vec::new();
    if aborted.is_none() {
        let mut d = disclosed.iter().peekable();
        for &i in kept {
            if d.next_if_eq(&&i).is_none() {
                key_indices.push(i);
            }
        }
        let q = estimate.expect("estimate present when not aborted").qber;
        if let Err(e) = leak_bits(key_indices.len(), q, params.link.ec_efficiency) {
            aborted = Some(match e {
                ProtocolError::Aborted(why) => why,
                other => other.to_string(),
            });
            key_indices.clear();
        }
    }
    Ok(Agreed {
        estimate,
        aborted,
        disclosed,
        key_indices,
    })
}

/// Transmitter side of a two-process session.
pub fn alice_session<R: Read, W: Write>(
    reader: R,
    writer: W,
    params: &SessionParams,
) -> Result<SessionResult, ProtocolError> {
    params.validate()?;
    let mut c = Conn::new(reader, writer);
    let link = simulate_link(params)?;
    let alice = link.alice;
    let alice_ann = alice_announcements(&alice);

    c.send(&Frame::SessionConfig(params.to_canonical()))?;
    c.send_announcements(kind::POSTSELECTION_ANNOUNCE, &alice_ann)?;
    let bob_ann = c.recv_announcements(kind::DETECTION_ANNOUNCE)?;
    let counters = c.recv_summary()?;
    let kept = sift_indices(&alice_ann, &bob_ann)?;

    let mut drng = rng::stream(params.seed, Stream::Disclosure);
    let picked = choose_disclosure(kept.len(), params.protocol.disclosure_fraction, &mut drng);
    let mine = picked
        .iter()
        .map(|&p| Ok((kept[p], label_at(&alice, kept[p])?.bit())))
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    c.send(&Frame::Disclosure(mine.clone()))?;
    let theirs = c.recv_disclosure()?;
    let agreed = agree(params, &kept, &mine, &theirs)?;
    let amp_seed: u64 = drng.random();

    let diagnostics = LinkDiagnostics {
        duration_s: link.diagnostics.duration_s,
        keygen_time_s: counters.get_f64(tag::KEYGEN_TIME_S)?,
        stabilizer_entries: counters.get(tag::STABILIZER_ENTRIES)?,
        expected_errors: counters.get_f64(tag::EXPECTED_ERRORS)?,
        expected_errors_sq: counters.get_f64(tag::EXPECTED_ERRORS_SQ)?,
    };
    let inputs = ReportInputs {
        emitted: params.emissions,
        postselected: alice.len() as u64,
        detected: counters.get(tag::DETECTED)?,
        detected_keygen: counters.get(tag::DETECTED_KEYGEN)?,
        sifted: kept.len() as u64,
        diagnostics,
    };
    let (report, uncertainty) = assemble_report(&params.link, &inputs);

    let (leak, corrected_errors) = match c.recv(kind::LEAK_REPORT)? {
        Frame::LeakReport {
            leak_bits,
            corrected_errors,
        } => (leak_bits, corrected_errors),
        _ => unreachable!("recv checked the frame type"),
    };
    let key: Vec<bool> = agreed
        .key_indices
        .iter()
        .map(|&i| label_at(&alice, i).map(|l| l.bit()))
        .collect::<Result<_, _>>()?;
    if let Some(est) = agreed.estimate.filter(|_| agreed.aborted.is_none()) {
        let expect = leak_bits(key.len(), est.qber, params.link.ec_efficiency)?;
        if expect != leak {
            return Err(ProtocolError::PeerMismatch(format!("leak: {expect} here, {leak} there")));
        }
    }
    let fraction = if agreed.aborted.is_some() { 0.0 } else { report.secret_fraction };
    let out_len = final_key_length(key.len(), fraction);
    c.send(&Frame::AmplificationSeed {
        seed: amp_seed,
        output_bits: out_len as u64,
    })?;
    let final_key = privacy_amplification(&key, fraction, amp_seed)?;

    let tally = SessionTally {
        emitted: params.emissions,
        postselected: inputs.postselected,
        detected: inputs.detected,
        detected_keygen: inputs.detected_keygen,
        sifted: inputs.sifted,
        disclosed: agreed.estimate.map_or(0, |e| e.disclosed),
        errors_in_disclosed: agreed.estimate.map_or(0, |e| e.errors),
        qber_estimate: agreed.estimate.map(|e| e.qber),
        corrected_errors,
        leak_ec_bits: leak,
        final_key_bits: final_key.len() as u64,
        aborted: agreed.aborted,
    };
    let summary = tally_summary(&tally, key_digest(&final_key));
    c.send(&Frame::SessionSummary(summary.clone()))?;
    let peer = c.recv_summary()?;
    compare_summaries(&summary, &peer)?;

    let mut rng_info = link.rng;
    rng_info.streams.push(StreamUsage::of(Stream::Disclosure, &drng));
    Ok(SessionResult {
        tally,
        report,
        uncertainty,
        alice_key: Some(final_key),
        bob_key: None,
        disclosed_indices: agreed.disclosed,
        key_indices: agreed.key_indices,
        channel_output_hits: counters.get(tag::CHANNEL_OUTPUT_HITS)?,
        diagnostics,
        rng: rng_info,
    })
}

/// Receiver side of a two-process session. The session parameters arrive
/// in the first frame.
pub fn bob_session<R: Read, W: Write>(reader: R, writer: W) -> Result<SessionResult, ProtocolError> {
    bob_session_with_params(reader, writer).map(|(r, _)| r)
}

/// [`bob_session`], also returning the parameters the transmitter sent.
pub fn bob_session_with_params<R: Read, W: Write>(
    reader: R,
    writer: W,
) -> Result<(SessionResult, SessionParams), ProtocolError> {
    let mut c = Conn::new(reader, writer);
    let params = match c.recv(kind::SESSION_CONFIG)? {
        Frame::SessionConfig(text) => SessionParams::from_canonical(&text)?,
        _ => unreachable!("recv checked the frame type"),
    };
    let link = simulate_link(&params)?;
    // transmitter labels: error-correction oracle only
    let oracle = link.alice;
    let bob = link.bob;

    let alice_ann = c.recv_announcements(kind::POSTSELECTION_ANNOUNCE)?;
    let bob_ann = keygen_announcements(&bob);
    c.send_announcements(kind::DETECTION_ANNOUNCE, &bob_ann)?;
    let counters = receiver_counters(&bob, link.channel_output_hits, &link.diagnostics);
    c.send(&Frame::SessionSummary(counters.clone()))?;
    let kept = sift_indices(&alice_ann, &bob_ann)?;

    let theirs = c.recv_disclosure()?;
    let bob_kg: Vec<_> = bob.iter().filter(|e| e.mode_at_detection == Mode::KeyGen).collect();
    let bit_at = |i: u64| -> Result<bool, ProtocolError> {
        bob_kg
            .binary_search_by_key(&i, |e| e.emission_index)
            .map(|k| bob_kg[k].detector.bit())
            .map_err(|_| ProtocolError::IndexMismatch(format!("no key-generation detection at {i}")))
    };
    let mut last = None;
    for &(i, _) in &theirs {
        if kept.binary_search(&i).is_err() || last.is_some_and(|l| i <= l) {
            return Err(ProtocolError::IndexMismatch(format!("disclosure of unsifted index {i}")));
        }
        last = Some(i);
    }
    let mine = theirs
        .iter()
        .map(|&(i, _)| Ok((i, bit_at(i)?)))
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    c.send(&Frame::Disclosure(mine.clone()))?;
    let agreed = agree(&params, &kept, &theirs, &mine)?;

    let inputs = ReportInputs {
        emitted: params.emissions,
        postselected: alice_ann.len() as u64,
        detected: bob.len() as u64,
        detected_keygen: bob_ann.len() as u64,
        sifted: kept.len() as u64,
        diagnostics: link.diagnostics,
    };
    let (report, uncertainty) = assemble_report(&params.link, &inputs);

    let mut corrected = Vec::with_capacity(agreed.key_indices.len());
    let mut corrected_errors = 0u64;
    for &i in &agreed.key_indices {
        let truth = label_at(&oracle, i)?.bit();
        corrected_errors += (bit_at(i)? != truth) as u64;
        corrected.push(truth);
    }
    let leak = match (agreed.estimate, &agreed.aborted) {
        (Some(est), None) => leak_bits(corrected.len(), est.qber, params.link.ec_efficiency)?,
        _ => 0,
    };
    c.send(&Frame::LeakReport {
        leak_bits: leak,
        corrected_errors,
    })?;
    let (amp_seed, out_len) = match c.recv(kind::AMPLIFICATION_SEED)? {
        Frame::AmplificationSeed { seed, output_bits } => (seed, output_bits),
        _ => unreachable!("recv checked the frame type"),
    };
    let fraction = if agreed.aborted.is_some() { 0.0 } else { report.secret_fraction };
    if final_key_length(corrected.len(), fraction) as u64 != out_len {
        return Err(ProtocolError::PeerMismatch(format!("final key length {out_len}")));
    }
    let final_key = privacy_amplification(&corrected, fraction, amp_seed)?;

    let tally = SessionTally {
        emitted: params.emissions,
        postselected: inputs.postselected,
        detected: inputs.detected,
        detected_keygen: inputs.detected_keygen,
        sifted: inputs.sifted,
        disclosed: agreed.estimate.map_or(0, |e| e.disclosed),
        errors_in_disclosed: agreed.estimate.map_or(0, |e| e.errors),
        qber_estimate: agreed.estimate.map(|e| e.qber),
        corrected_errors,
        leak_ec_bits: leak,
        final_key_bits: final_key.len() as u64,
        aborted: agreed.aborted,
    };
    let summary = tally_summary(&tally, key_digest(&final_key));
    let peer = c.recv_summary()?;
    c.send(&Frame::SessionSummary(summary.clone()))?;
    c.flush()?;
    compare_summaries(&summary, &peer)?;

    // the receiver draws nothing from the disclosure stream; replay the
    // transmitter's draws so both provenance records agree
    let mut drng = rng::stream(params.seed, Stream::Disclosure);
    let _ = choose_disclosure(kept.len(), params.protocol.disclosure_fraction, &mut drng);
    let _: u64 = drng.random();
    let mut rng_info = link.rng;
    rng_info.streams.push(StreamUsage::of(Stream::Disclosure, &drng));
    let result = SessionResult {
        tally,
        report,
        uncertainty,
        alice_key: None,
        bob_key: Some(final_key),
        disclosed_indices: agreed.disclosed,
        key_indices: agreed.key_indices,
        channel_output_hits: link.channel_output_hits,
        diagnostics: link.diagnostics,
        rng: rng_info,
    };
    Ok((result, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use std::net::{TcpListener, TcpStream};

    fn roundtrip(f: Frame) {
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(len + 5, buf.len());
        assert_eq!(buf[4], f.kind());
        assert_eq!(read_frame(&mut Cursor::new(buf)).unwrap(), Some(f));
    }

    #[test]
    fn frames_roundtrip() {
        roundtrip(Frame::SessionConfig("seed = 1\n".into()));
        roundtrip(Frame::PostselectionAnnounce(vec![
            Announcement { index: 3, basis: Basis::X },
            Announcement { index: u64::MAX, basis: Basis::Y },
        ]));
        roundtrip(Frame::DetectionAnnounce(vec![]));
        roundtrip(Frame::Disclosure(vec![(1, true), (9, false)]));
        roundtrip(Frame::LeakReport { leak_bits: 7, corrected_errors: 2 });
        roundtrip(Frame::AmplificationSeed { seed: 5, output_bits: 256 });
        roundtrip(Frame::SessionSummary(Summary {
            fields: vec![(tag::EMITTED, 10), (tag::KEYGEN_TIME_S, 0.5f64.to_bits())],
            digest: Some([0xAB; 32]),
        }));
    }

    #[test]
    fn byte_layout_is_big_endian() {
        let mut buf = Vec::new();
        write_frame(
            &mut buf,
            &Frame::DetectionAnnounce(vec![Announcement { index: 0x0102, basis: Basis::Y }]),
        )
        .unwrap();
        assert_eq!(buf, [0, 0, 0, 9, 0x03, 0, 0, 0, 0, 0, 0, 1, 2, 1]);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(read_frame(&mut Cursor::new(Vec::<u8>::new())).unwrap().is_none());
        assert!(read_frame(&mut Cursor::new(vec![0, 0, 0])).is_err());
        assert!(read_frame(&mut Cursor::new(vec![0, 0, 0, 4, 0x03, 1, 2, 3, 4])).is_err());
        assert!(read_frame(&mut Cursor::new(vec![0, 0, 0, 0, 0x42])).is_err());
        assert!(read_frame(&mut Cursor::new(vec![0, 0, 0, 9, 0x04, 0, 0, 0, 0, 0, 0, 0, 1, 7])).is_err());
        assert!(read_frame(&mut Cursor::new(vec![0xFF, 0xFF, 0xFF, 0xFF, 0x01])).is_err());
        assert!(read_frame(&mut Cursor::new(vec![0, 0, 0, 8, 0x01, b'a'])).is_err());
    }

    #[test]
    fn tcp_session_matches_in_process() {
        let params = SessionParams {
            seed: 42,
            emissions: 400_000,
            link: crate::types::LinkParams {
                channel_loss_db: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let local = super::super::run_session(&params).unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let p = params.clone();
        let alice = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            alice_session(s.try_clone().unwrap(), s, &p).unwrap()
        });
        let s = TcpStream::connect(addr).unwrap();
        let bob = bob_session(s.try_clone().unwrap(), s).unwrap();
        let alice = alice.join().unwrap();

        assert_eq!(alice.tally, local.tally);
        assert_eq!(bob.tally, local.tally);
        assert_eq!(alice.report, local.report);
        assert_eq!(bob.report, local.report);
        assert!(local.tally.final_key_bits > 0);
        assert_eq!(alice.alice_key, local.alice_key);
        assert_eq!(bob.bob_key, local.bob_key);
        assert_eq!(alice.alice_key, bob.bob_key);
        assert_eq!(alice.disclosed_indices, local.disclosed_indices);
        assert_eq!(bob.key_indices, local.key_indices);
        assert_eq!(bob.rng, local.rng);
    }
}
