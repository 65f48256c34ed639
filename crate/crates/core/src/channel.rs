//! Loss between the transmitter and the detectors.
//!
//! Photons are thinned twice: once by the fibre, whose loss is counted
//! against the adversary, and once inside the receiver (insertion loss and
//! detector efficiency). Both intermediate counts are kept so the gain can
//! be referred to either plane.

use rand::Rng;

use crate::types::LinkParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    pub transmittance_channel: f64,
    pub transmittance_receiver: f64,
}

impl ChannelState {
    pub fn from_params(params: &LinkParams) -> Self {
        Self {
            transmittance_channel: params.channel_transmittance(),
            transmittance_receiver: params.receiver_transmittance(),
        }
    }

    pub fn total(&self) -> f64 {
        self.transmittance_channel * self.transmittance_receiver
    }
}

/// Surviving photons at the channel output and at the detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transmission {
    pub at_channel_output: u32,
    pub at_detector: u32,
}

/// Thin `photon_count` photons through both loss stages.
///
/// Exactly two uniforms are drawn per photon whatever the outcome, so runs
/// that share a random stream and differ only in loss see nested survivor
/// sets.
pub fn transmit<R: Rng + ?Sized>(photon_count: u32, state: &ChannelState, rng: &mut R) -> Transmission {
    let mut t = Transmission::default();
    for _ in 0..photon_count {
        let u_channel: f64 = rng.random();
        let u_receiver: f64 = rng.random();
        if u_channel < state.transmittance_channel {
            t.at_channel_output += 1;
            if u_receiver < state.transmittance_receiver {
                t.at_detector += 1;
            }
        }
    }
    t
}

/// Total loss of `length_km` of fibre plus fixed connector/patch loss.
pub fn loss_for_fiber(length_km: f64, alpha_db_per_km: f64, extra_db: f64) -> f64 {
    length_km * alpha_db_per_km + extra_db
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::types::db_to_transmittance;
    use crate::stats::{chi_square, chi_square_critical_1pct};
    use rand_distr::{Distribution, Poisson};

    fn state(ch_db: f64, rx: f64) -> ChannelState {
        ChannelState {
            transmittance_channel: db_to_transmittance(ch_db),
            transmittance_receiver: rx,
        }
    }

    #[test]
    fn vacuum_and_identity() {
        let mut rng = stream(1, Stream::Link);
        assert_eq!(transmit(0, &state(3.0, 0.5), &mut rng), Transmission::default());
        let t = transmit(7, &state(0.0, 1.0), &mut rng);
        assert_eq!(t, Transmission { at_channel_output: 7, at_detector: 7 });
    }

    #[test]
    fn fiber_loss_arithmetic() {
        assert_eq!(loss_for_fiber(0.0, 0.33, 0.0), 0.0);
        assert!((loss_for_fiber(10.0, 0.33, 0.0) - 3.3).abs() < 1e-12);
        // deployed link: 11.58 km at 0.33 dB/km plus 2.8786 dB of splices and patching
        assert!((loss_for_fiber(11.58, 0.33, 2.8786) - 6.7).abs() < 1e-9);
    }

    #[test]
    fn state_from_params() {
        let p = LinkParams {
            channel_loss_db: 10.0,
            receiver_loss_db: 3.0,
            detector_efficiency: 0.5,
            ..LinkParams::default()
        };
        let s = ChannelState::from_params(&p);
        assert!((s.transmittance_channel - 0.1).abs() < 1e-15);
        assert!((s.transmittance_receiver - 0.5 * 10f64.powf(-0.3)).abs() < 1e-15);
        assert!((s.total() - s.transmittance_channel * s.transmittance_receiver).abs() < 1e-18);
    }

    #[test]
    fn thinned_poisson_mean_and_law() {
        let mu = 0.15;
        let eta = db_to_transmittance(6.7);
        let s = state(6.7, 0.8);
        let pois = Poisson::new(mu).unwrap();
        let mut rng = stream(2, Stream::Link);
        let n = 1_000_000;
        let mut sum = 0u64;
        let mut hist = [0u64; 3];
        for _ in 0..n {
            let k = pois.sample(&mut rng) as u32;
            let t = transmit(k, &s, &mut rng);
            sum += t.at_channel_output as u64;
            hist[(t.at_channel_output as usize).min(2)] += 1;
        }
        let m = mu * eta;
        let mean = sum as f64 / n as f64;
        assert!((mean - m).abs() < 3.0 * (m / n as f64).sqrt(), "{mean} vs {m}");
        let p0 = (-m).exp();
        let p1 = m * p0;
        let expected = [p0 * n as f64, p1 * n as f64, (1.0 - p0 - p1) * n as f64];
        assert!(chi_square(&hist, &expected) < chi_square_critical_1pct(2));
    }

    #[test]
    fn gain_decreases_with_loss() {
        let pois = Poisson::new(0.15).unwrap();
        let mut last = f64::INFINITY;
        for db in [0.0, 2.0, 4.0, 6.0, 8.0, 10.0] {
            let s = state(db, 0.8);
            let mut rng = stream(3, Stream::Link);
            let n = 200_000;
            let hits = (0..n)
                .filter(|_| transmit(pois.sample(&mut rng) as u32, &s, &mut rng).at_detector > 0)
                .count();
            let g = hits as f64 / n as f64;
            assert!(g < last, "{db} dB: {g} !< {last}");
            last = g;
        }
    }
}
