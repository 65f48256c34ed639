//! Imbalanced-interferometer receiver.
//!
//! Each photon picks a basis at a passive beamsplitter, then interferes with
//! a reference phase `θ` that drifts as a random walk. In basis `b` the
//! detector centred on phase `x′` fires with probability
//! `(1 + V·cos(Δφ − θ − x′))/2`. A liquid-crystal servo pulls `θ` back
//! towards zero while the link is in the stabilising mode.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::ParamError;
use crate::types::{wrap_signed, Basis, StateLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    KeyGen,
    Stabilizing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverState {
    /// Relative phase between the transmitter loop and the receiver
    /// interferometer, in `(−π, π]`.
    pub theta: f64,
    pub mode: Mode,
    pub visibility: f64,
    /// Per detector.
    pub dark_rate_hz: f64,
}

impl ReceiverState {
    pub fn new(visibility: f64, dark_rate_hz: f64) -> Self {
        Self {
            theta: 0.0,
            mode: Mode::KeyGen,
            visibility,
            dark_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    pub emission_index: u64,
    pub detector: StateLabel,
    /// The reported click came from a dark count, not a photon.
    pub from_dark: bool,
    pub mode_at_detection: Mode,
}

/// Probability that a photon already routed to `detector`'s basis lands on
/// `detector`.
pub fn click_probability(delta_phi: f64, theta: f64, visibility: f64, detector: StateLabel) -> f64 {
    0.5 * (1.0 + visibility * (delta_phi - theta - detector.center_phase()).cos())
}

/// Measure `photons` photons of a pair with phase difference `delta_phi`.
///
/// Dark counts fire independently on each of the four detectors with
/// probability `dark_rate_hz / clock_hz`. When several detectors fire, one
/// is reported uniformly at random.
pub fn detect<R: Rng + ?Sized>(
    photons: u32,
    delta_phi: f64,
    state: &ReceiverState,
    clock_hz: f64,
    emission_index: u64,
    rng: &mut R,
) -> Option<DetectionEvent> {
    measure(photons, delta_phi, state, clock_hz, emission_index, None, rng)
}

/// As [`detect`] with every photon routed to `basis`.
pub fn detect_in_basis<R: Rng + ?Sized>(
    photons: u32,
    delta_phi: f64,
    state: &ReceiverState,
    clock_hz: f64,
    emission_index: u64,
    basis: Basis,
    rng: &mut R,
) -> Option<DetectionEvent> {
    measure(photons, delta_phi, state, clock_hz, emission_index, Some(basis), rng)
}

fn measure<R: Rng + ?Sized>(
    photons: u32,
    delta_phi: f64,
    state: &ReceiverState,
    clock_hz: f64,
    emission_index: u64,
    forced: Option<Basis>,
    rng: &mut R,
) -> Option<DetectionEvent> {
    // dark counts first: the photon draws then line up across runs that
    // differ only in how many photons arrive
    let mut dark = [false; 4];
    let p_dark = state.dark_rate_hz / clock_hz;
    if p_dark > 0.0 {
        for d in dark.iter_mut() {
            *d = rng.random::<f64>() < p_dark;
        }
    }
    let mut signal = [false; 4];
    for _ in 0..photons {
        let u_basis: f64 = rng.random();
        let u_bit: f64 = rng.random();
        let basis = forced.unwrap_or(if u_basis < 0.5 { Basis::X } else { Basis::Y });
        let one = StateLabel::from_parts(basis, true);
        let bit = u_bit < click_probability(delta_phi, state.theta, state.visibility, one);
        signal[StateLabel::from_parts(basis, bit).index()] = true;
    }
    let mut fired = [StateLabel::X1; 4];
    let mut n = 0;
    for label in StateLabel::ALL {
        if signal[label.index()] || dark[label.index()] {
            fired[n] = label;
            n += 1;
        }
    }
    let detector = match n {
        0 => return None,
        1 => fired[0],
        _ => fired[rng.random_range(0..n)],
    };
    Some(DetectionEvent {
        emission_index,
        detector,
        from_dark: !signal[detector.index()],
        mode_at_detection: state.mode,
    })
}

/// Random-walk step of the reference phase: `θ ← θ + N(0, σ²·dt)`.
pub fn advance_phase<R: Rng + ?Sized>(state: ReceiverState, dt: f64, drift_rate: f64, rng: &mut R) -> ReceiverState {
    if drift_rate == 0.0 || dt <= 0.0 {
        return state;
    }
    let z: f64 = StandardNormal.sample(rng);
    ReceiverState {
        theta: wrap_signed(state.theta + drift_rate * dt.sqrt() * z),
        ..state
    }
}

/// Mode transition rule: leave key generation when the QBER estimate
/// exceeds `q_enter`, return once the announced-state comparison is below
/// `q_exit`.
pub fn stabilization_controller(state: ReceiverState, recent_qber: f64, (q_enter, q_exit): (f64, f64)) -> ReceiverState {
    let mode = match state.mode {
        Mode::KeyGen if recent_qber > q_enter => Mode::Stabilizing,
        Mode::Stabilizing if recent_qber < q_exit => Mode::KeyGen,
        m => m,
    };
    ReceiverState { mode, ..state }
}

/// Move `θ` towards zero by at most `slew_rate·dt`.
pub fn servo(state: ReceiverState, dt: f64, slew_rate: f64) -> ReceiverState {
    let step = (slew_rate * dt).min(state.theta.abs());
    ReceiverState {
        theta: state.theta - step.copysign(state.theta),
        ..state
    }
}

/// Knobs of the phase-stabilisation loop.
///
/// Key generation is interrupted on a schedule (`keygen_period_s`) or early
/// when the sliding-window QBER passes `q_enter`. A tuning phase lasts at
/// least `min_stabilize_s` and ends once the announced-state QBER,
/// accumulated over at least `min_confirm` sifted detections, is below
/// `q_exit`. The key-generation window persists across scheduled pauses
/// and is cleared only after a QBER-triggered pause. Defaults put the
/// steady-state duty cycle near one half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilizerConfig {
    pub q_enter: f64,
    pub q_exit: f64,
    /// Sifted detections in the key-generation QBER window.
    pub window: usize,
    pub keygen_period_s: f64,
    pub min_stabilize_s: f64,
    pub min_confirm: usize,
    /// Servo correction speed, rad/s.
    pub slew_rate: f64,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self {
            q_enter: 0.11,
            q_exit: 0.09,
            window: 200,
            keygen_period_s: 0.005,
            min_stabilize_s: 0.005,
            min_confirm: 10,
            slew_rate: 20.0,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), ParamError> {
        if !(0.0 < self.q_exit && self.q_exit < self.q_enter && self.q_enter < 0.5) {
            return Err(ParamError::new(
                "stabilizer.q_enter",
                format!("need 0 < q_exit < q_enter < 0.5, got q_exit={}, q_enter={}", self.q_exit, self.q_enter),
            ));
        }
        if self.window == 0 {
            return Err(ParamError::new("stabilizer.window", "must be positive"));
        }
        if !(self.keygen_period_s > 0.0) {
            return Err(ParamError::new("stabilizer.keygen_period_s", "must be positive"));
        }
        if !(self.min_stabilize_s >= 0.0) {
            return Err(ParamError::new("stabilizer.min_stabilize_s", "must be non-negative"));
        }
        if !(self.slew_rate >= 0.0) {
            return Err(ParamError::new("stabilizer.slew_rate", "must be non-negative"));
        }
        Ok(())
    }
}

/// Time-series driver of the stabilisation loop for one run.
#[derive(Debug, Clone)]
pub struct Stabilizer {
    cfg: StabilizerConfig,
    mode_since: f64,
    last_update: f64,
    keygen_time: f64,
    window: VecDeque<bool>,
    window_errors: usize,
    confirm_n: usize,
    confirm_errors: usize,
    entries: u64,
}

impl Stabilizer {
    pub fn new(cfg: StabilizerConfig) -> Self {
        Self {
            cfg,
            mode_since: 0.0,
            last_update: 0.0,
            keygen_time: 0.0,
            window: VecDeque::new(),
            window_errors: 0,
            confirm_n: 0,
            confirm_errors: 0,
            entries: 0,
        }
    }

    fn switch(&mut self, state: &mut ReceiverState, mode: Mode, now: f64, clear_window: bool) {
        if state.mode == mode {
            return;
        }
        state.mode = mode;
        self.mode_since = now;
        if clear_window {
            self.window.clear();
            self.window_errors = 0;
        }
        self.confirm_n = 0;
        self.confirm_errors = 0;
        if mode == Mode::Stabilizing {
            self.entries += 1;
        }
    }

    /// Advance the controller clock to `now`: accounts key-generation time,
    /// runs the servo, and applies time-based transitions.
    pub fn tick(&mut self, state: &mut ReceiverState, now: f64) {
        let dt = now - self.last_update;
        if dt > 0.0 {
            match state.mode {
                Mode::KeyGen => self.keygen_time += dt,
                Mode::Stabilizing => *state = servo(*state, dt, self.cfg.slew_rate),
            }
            self.last_update = now;
        }
        let dwell = now - self.mode_since;
        match state.mode {
            Mode::KeyGen if dwell >= self.cfg.keygen_period_s => self.switch(state, Mode::Stabilizing, now, false),
            Mode::Stabilizing if dwell >= self.cfg.min_stabilize_s && self.confirm_n >= self.cfg.min_confirm => {
                let q = if self.confirm_n == 0 {
                    0.0
                } else {
                    self.confirm_errors as f64 / self.confirm_n as f64
                };
                let next = stabilization_controller(*state, q, (self.cfg.q_enter, self.cfg.q_exit));
                self.switch(state, next.mode, now, false);
            }
            _ => {}
        }
    }

    /// Feed one sifted detection and whether it was a bit error.
    pub fn observe(&mut self, state: &mut ReceiverState, error: bool, now: f64) {
        match state.mode {
            Mode::KeyGen => {
                self.window.push_back(error);
                self.window_errors += error as usize;
                if self.window.len() > self.cfg.window {
                    let old = self.window.pop_front().unwrap_or(false);
                    self.window_errors -= old as usize;
                }
                if self.window.len() == self.cfg.window {
                    let q = self.window_errors as f64 / self.window.len() as f64;
                    let next = stabilization_controller(*state, q, (self.cfg.q_enter, self.cfg.q_exit));
                    self.switch(state, next.mode, now, true);
                }
            }
            Mode::Stabilizing => {
                self.confirm_n += 1;
                self.confirm_errors += error as usize;
            }
        }
    }

    /// Time spent generating key up to the last tick.
    pub fn keygen_time(&self) -> f64 {
        self.keygen_time
    }

    /// Number of times the loop entered the stabilising mode.
    pub fn entries(&self) -> u64 {
        self.entries
    }
}

/// Probability that a detection of `photons` photons is an error, given that
/// the reported detector lies in `label`'s basis. No dark counts.
///
/// Each photon lands on detector `d` with probability `p_d` (half the click
/// probability in its basis). The set of fired detectors is exactly `S` with
/// probability `Σ_{T⊆S} (−1)^{|S|−|T|} p_T^n`, and one member of `S` is
/// reported uniformly.
pub fn sifted_error_probability(photons: u32, delta_phi: f64, theta: f64, visibility: f64, label: StateLabel) -> f64 {
    let p = StateLabel::ALL.map(|d| 0.5 * click_probability(delta_phi, theta, visibility, d));
    if photons == 1 {
        let wrong = p[StateLabel::from_parts(label.basis(), !label.bit()).index()];
        return wrong / (wrong + p[label.index()]);
    }
    let mass = |mask: u32| -> f64 { (0..4).filter(|d| mask & (1 << d) != 0).map(|d| p[d]).sum() };
    let mut report = [0.0; 4];
    for set in 1u32..16 {
        let mut exact = 0.0;
        // iterate over the subsets of `set`, including the empty one
        let mut sub = set;
        loop {
            let sign = if (set.count_ones() - sub.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
            exact += sign * mass(sub).powi(photons as i32);
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & set;
        }
        let share = exact.max(0.0) / set.count_ones() as f64;
        for (d, r) in report.iter_mut().enumerate() {
            if set & (1 << d) != 0 {
                *r += share;
            }
        }
    }
    let right = report[label.index()];
    let wrong = report[StateLabel::from_parts(label.basis(), !label.bit()).index()];
    wrong / (right + wrong)
}

/// Average of `(1 − V·cos(ε − θ))/2` over `ε` uniform on `[−δφ, δφ]`,
/// i.e. `(1 − V·Δ·cos θ)/2` in closed form.
pub fn window_error_probability(delta_phi: f64, theta: f64, visibility: f64) -> f64 {
    let delta = if delta_phi == 0.0 { 1.0 } else { delta_phi.sin() / delta_phi };
    0.5 * (1.0 - visibility * delta * theta.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::stats::binomial_se;
    use proptest::prelude::{prop_assert, proptest};
    use std::f64::consts::{FRAC_PI_2, PI};

    const CLOCK: f64 = 1.5e6;

    fn ideal() -> ReceiverState {
        ReceiverState::new(1.0, 0.0)
    }

    #[test]
    fn perfect_interference_is_deterministic() {
        let mut rng = stream(1, Stream::Link);
        for _ in 0..1000 {
            let ev = detect_in_basis(1, 0.0, &ideal(), CLOCK, 0, Basis::X, &mut rng).unwrap();
            assert_eq!(ev.detector, StateLabel::X1);
            assert!(!ev.from_dark);
        }
    }

    #[test]
    fn each_state_hits_its_namesake_detector() {
        let mut rng = stream(2, Stream::Link);
        for label in StateLabel::ALL {
            for _ in 0..200 {
                let ev = detect_in_basis(1, label.center_phase(), &ideal(), CLOCK, 0, label.basis(), &mut rng).unwrap();
                assert_eq!(ev.detector, label);
            }
        }
    }

    #[test]
    fn conjugate_basis_is_a_coin_flip() {
        let mut rng = stream(3, Stream::Link);
        let n = 200_000u64;
        let ones = (0..n)
            .filter(|_| {
                detect_in_basis(1, FRAC_PI_2, &ideal(), CLOCK, 0, Basis::X, &mut rng).unwrap().detector
                    == StateLabel::X1
            })
            .count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 3.0 * binomial_se(0.5, n));
    }

    #[test]
    fn finite_visibility_error_rate() {
        let st = ReceiverState::new(0.9, 0.0);
        let mut rng = stream(4, Stream::Link);
        let n = 1_000_000u64;
        let wrong = (0..n)
            .filter(|_| detect_in_basis(1, 0.0, &st, CLOCK, 0, Basis::X, &mut rng).unwrap().detector == StateLabel::X0)
            .count();
        let p = wrong as f64 / n as f64;
        assert!((p - 0.05).abs() < 3.0 * binomial_se(0.05, n), "{p}");
    }

    #[test]
    fn sifted_error_probability_matches_simulation() {
        let label = StateLabel::Y0;
        let (dphi, theta) = (label.center_phase() + 0.3, 0.1);
        let st = ReceiverState {
            theta,
            ..ReceiverState::new(0.8, 0.0)
        };
        assert!(
            (sifted_error_probability(1, dphi, theta, 0.8, label) - (1.0 - click_probability(dphi, theta, 0.8, label))).abs()
                < 1e-15
        );
        let mut rng = stream(11, Stream::Link);
        for n in [2u32, 3, 5] {
            let (mut sifted, mut wrong) = (0u64, 0u64);
            for _ in 0..400_000 {
                let ev = detect(n, dphi, &st, CLOCK, 0, &mut rng).unwrap();
                if ev.detector.basis() == label.basis() {
                    sifted += 1;
                    wrong += (ev.detector != label) as u64;
                }
            }
            let p = sifted_error_probability(n, dphi, theta, 0.8, label);
            let f = wrong as f64 / sifted as f64;
            assert!((f - p).abs() < 4.0 * binomial_se(p, sifted), "n = {n}: {f} vs {p}");
        }
    }

    #[test]
    fn vacuum_without_dark_counts_is_silent() {
        let mut rng = stream(5, Stream::Link);
        assert!(detect(0, 0.0, &ideal(), CLOCK, 0, &mut rng).is_none());
    }

    #[test]
    fn dark_counts_fire_and_are_flagged() {
        let st = ReceiverState::new(1.0, 0.5 * CLOCK);
        let mut rng = stream(6, Stream::Link);
        let n = 100_000u64;
        let mut hits = 0u64;
        for _ in 0..n {
            if let Some(ev) = detect(0, 0.0, &st, CLOCK, 0, &mut rng) {
                assert!(ev.from_dark);
                hits += 1;
            }
        }
        // at least one of four detectors fires
        let p = 1.0 - 0.5f64.powi(4);
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * binomial_se(p, n));
    }

    #[test]
    fn passive_basis_choice_is_balanced() {
        let mut rng = stream(7, Stream::Link);
        let n = 200_000u64;
        let x = (0..n)
            .filter(|_| detect(1, 0.3, &ideal(), CLOCK, 0, &mut rng).unwrap().detector.basis() == Basis::X)
            .count();
        assert!((x as f64 / n as f64 - 0.5).abs() < 3.0 * binomial_se(0.5, n));
    }

    #[test]
    fn mode_is_stamped_on_events() {
        let mut st = ideal();
        st.mode = Mode::Stabilizing;
        let mut rng = stream(8, Stream::Link);
        let ev = detect(1, 0.0, &st, CLOCK, 17, &mut rng).unwrap();
        assert_eq!(ev.mode_at_detection, Mode::Stabilizing);
        assert_eq!(ev.emission_index, 17);
    }

    #[test]
    fn window_error_matches_monte_carlo_at_fixed_theta() {
        let dphi = PI / 40.0;
        let theta = 0.3;
        let st = ReceiverState {
            theta,
            ..ReceiverState::new(0.95, 0.0)
        };
        let mut rng = stream(9, Stream::Link);
        let n = 1_000_000u64;
        let mut errors = 0u64;
        for _ in 0..n {
            let label = StateLabel::ALL[rng.random_range(0..4)];
            let phi = label.center_phase() + (rng.random::<f64>() * 2.0 - 1.0) * dphi;
            let ev = detect_in_basis(1, phi, &st, CLOCK, 0, label.basis(), &mut rng).unwrap();
            errors += (ev.detector != label) as u64;
        }
        // independent oracle: Simpson quadrature of the per-phase error probability
        let m = 2000;
        let h = 2.0 * dphi / m as f64;
        let f = |e: f64| 0.5 * (1.0 - 0.95 * (e - theta).cos());
        let mut s = f(-dphi) + f(dphi);
        for k in 1..m {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(-dphi + k as f64 * h);
        }
        let oracle = s * h / 3.0 / (2.0 * dphi);
        assert!((window_error_probability(dphi, theta, 0.95) - oracle).abs() < 1e-12);
        let p = errors as f64 / n as f64;
        assert!((p - oracle).abs() < 3.0 * binomial_se(oracle, n), "{p} vs {oracle}");
    }

    #[test]
    fn phase_drift() {
        let mut rng = stream(10, Stream::Drift);
        let st = ReceiverState {
            theta: 0.4,
            ..ideal()
        };
        assert_eq!(advance_phase(st, 1.0, 0.0, &mut rng).theta, 0.4);

        let sigma = 0.1;
        let paths = 2000;
        let mut sum_sq = 0.0;
        for _ in 0..paths {
            let mut s = ideal();
            for _ in 0..10_000 {
                s = advance_phase(s, 1e-3, sigma, &mut rng);
            }
            sum_sq += s.theta * s.theta;
        }
        let var = sum_sq / paths as f64;
        let expected = sigma * sigma * 10.0;
        assert!((var / expected - 1.0).abs() < 0.2, "{var} vs {expected}");

        let edge = ReceiverState {
            theta: PI - 1e-6,
            ..ideal()
        };
        for _ in 0..100 {
            let t = advance_phase(edge, 1.0, 5.0, &mut rng).theta;
            assert!(t > -PI && t <= PI);
        }
    }

    #[test]
    fn controller_rules() {
        let st = ideal();
        assert_eq!(stabilization_controller(st, 0.12, (0.08, 0.04)).mode, Mode::Stabilizing);
        assert_eq!(stabilization_controller(st, 0.05, (0.08, 0.04)).mode, Mode::KeyGen);
        let stab = ReceiverState {
            mode: Mode::Stabilizing,
            ..st
        };
        assert_eq!(stabilization_controller(stab, 0.02, (0.08, 0.04)).mode, Mode::KeyGen);
        assert_eq!(stabilization_controller(stab, 0.05, (0.08, 0.04)).mode, Mode::Stabilizing);
    }

    #[test]
    fn servo_converges_without_overshoot() {
        let mut st = ReceiverState {
            theta: -0.5,
            ..ideal()
        };
        st = servo(st, 0.01, 20.0);
        assert!((st.theta + 0.3).abs() < 1e-12);
        st = servo(st, 1.0, 20.0);
        assert_eq!(st.theta, 0.0);
    }

    #[test]
    fn stabilizer_alternates_on_schedule() {
        let cfg = StabilizerConfig {
            min_confirm: 0,
            ..StabilizerConfig::default()
        };
        let mut stab = Stabilizer::new(cfg);
        let mut st = ideal();
        let dt = 1e-4;
        for k in 1..=20_000 {
            stab.tick(&mut st, k as f64 * dt);
        }
        let duty = stab.keygen_time() / 2.0;
        assert!((duty - 0.5).abs() < 0.01, "{duty}");
        assert!(stab.entries() >= 190);
    }

    #[test]
    fn stabilizer_reacts_to_bad_window() {
        let mut stab = Stabilizer::new(StabilizerConfig::default());
        let mut st = ideal();
        for k in 0..200 {
            stab.observe(&mut st, k % 4 == 0, 0.001);
        }
        assert_eq!(st.mode, Mode::Stabilizing);
        // announced-state comparison must come back clean before returning
        stab.tick(&mut st, 0.2);
        assert_eq!(st.mode, Mode::Stabilizing);
        for _ in 0..50 {
            stab.observe(&mut st, false, 0.2);
        }
        stab.tick(&mut st, 0.21);
        assert_eq!(st.mode, Mode::KeyGen);
        // the bad window was discarded, so one clean detection does not re-trigger
        stab.observe(&mut st, false, 0.211);
        assert_eq!(st.mode, Mode::KeyGen);
    }

    #[test]
    fn window_survives_scheduled_pauses() {
        let mut stab = Stabilizer::new(StabilizerConfig {
            min_confirm: 0,
            ..StabilizerConfig::default()
        });
        let mut st = ideal();
        for k in 0..150 {
            stab.observe(&mut st, k % 4 == 0, 0.001);
        }
        stab.tick(&mut st, 0.006);
        assert_eq!(st.mode, Mode::Stabilizing);
        stab.tick(&mut st, 0.012);
        assert_eq!(st.mode, Mode::KeyGen);
        for k in 0..50 {
            stab.observe(&mut st, k % 4 == 0, 0.0121);
        }
        assert_eq!(st.mode, Mode::Stabilizing);
    }

    proptest! {
        #[test]
        fn basis_probabilities_normalised(phi in 0.0f64..6.3, theta in -PI..PI, v in 0.0f64..=1.0) {
            for basis in [Basis::X, Basis::Y] {
                let p1 = click_probability(phi, theta, v, StateLabel::from_parts(basis, true));
                let p0 = click_probability(phi, theta, v, StateLabel::from_parts(basis, false));
                prop_assert!((p0 + p1 - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&p1));
            }
        }
    }
}
