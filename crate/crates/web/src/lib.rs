//! Browser bindings for the key-rate model. Every export returns a flat
//! `Float64Array`; the page in `www/` plots it on a canvas.

use passive_bb84::analysis::{self, QberSource, SweepSpec, SweepVariable};
use passive_bb84::protocol::{run_session, SessionParams};
use passive_bb84::rng::{self, Stream};
use passive_bb84::security::arcsine_cdf;
use passive_bb84::transmitter::{tomography_intensities, Source};
use passive_bb84::{LinkParams, PostselectionWindow};
use wasm_bindgen::prelude::wasm_bindgen;

fn link(mu: f64, delta_phi: f64, visibility: f64, ec_efficiency: f64, trusted: bool) -> Result<LinkParams, String> {
    let p = LinkParams {
        mu,
        visibility,
        ec_efficiency,
        trusted_receiver: trusted,
        window: PostselectionWindow::new(delta_phi, 1.0).map_err(|e| e.to_string())?,
        ..LinkParams::default()
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

/// Analytic secret rate against channel loss, as `[loss, rate, qber, …]`.
#[wasm_bindgen]
pub fn rate_curve(
    mu: f64,
    delta_phi: f64,
    visibility: f64,
    ec_efficiency: f64,
    trusted: bool,
    max_loss_db: f64,
    step_db: f64,
) -> Result<Vec<f64>, String> {
    let spec = SweepSpec {
        variable: SweepVariable::ChannelLossDb,
        grid: analysis::parse_grid(&format!("0:{max_loss_db}:{step_db}")).map_err(|e| e.to_string())?,
        fixed: link(mu, delta_phi, visibility, ec_efficiency, trusted)?,
        qber: QberSource::Model,
    };
    let pts = analysis::sweep(&spec, None).map_err(|e| e.to_string())?;
    Ok(pts.iter().flat_map(|p| [p.x, p.analytic_rate_hz, p.qber_model]).collect())
}

/// One simulated session at `loss_db`: `[rate, rate_se, qber, duty_cycle, final_key_bits]`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate_point(
    seed: u32,
    emissions: u32,
    loss_db: f64,
    mu: f64,
    delta_phi: f64,
    visibility: f64,
    ec_efficiency: f64,
    trusted: bool,
) -> Result<Vec<f64>, String> {
    let mut l = link(mu, delta_phi, visibility, ec_efficiency, trusted)?;
    l.channel_loss_db = loss_db;
    let r = run_session(&SessionParams {
        seed: seed as u64,
        emissions: emissions as u64,
        link: l,
        ..SessionParams::default()
    })
    .map_err(|e| e.to_string())?;
    Ok(vec![
        r.report.secret_rate_hz,
        r.uncertainty.secret_rate_hz,
        r.report.qber,
        r.report.duty_cycle,
        r.tally.final_key_bits as f64,
    ])
}

/// Acceptance and model QBER against the comparator level, as
/// `[threshold, delta_phi, accept_rate_per_basis_hz, qber, …]`.
#[wasm_bindgen]
pub fn tradeoff(visibility: f64, lo: f64, hi: f64, points: u32) -> Result<Vec<f64>, String> {
    if points < 2 || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err("need lo < hi and at least two points".into());
    }
    let p = LinkParams {
        visibility,
        ..LinkParams::default()
    };
    let ts: Vec<f64> = (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect();
    let rows = analysis::postselection_tradeoff(&p, &ts).map_err(|e| e.to_string())?;
    Ok(rows
        .iter()
        .flat_map(|r| [r.threshold, r.delta_phi, r.accept_rate_per_basis_hz, r.qber_model])
        .collect())
}

/// Histogram of the tomography reading `I(1 + cos Δφ)` with `I = 1` over
/// `bins` equal bins of `[0, 2]`, alongside the expected arcsine counts:
/// `[observed_0, …, observed_{bins−1}, expected_0, …]`.
#[wasm_bindgen]
pub fn phase_histogram(seed: u32, samples: u32, bins: u32) -> Result<Vec<f64>, String> {
    if bins == 0 || samples == 0 {
        return Err("need at least one bin and one sample".into());
    }
    let source = Source::new(&LinkParams::default()).map_err(|e| e.to_string())?;
    let mut r = rng::stream(seed as u64, Stream::Transmitter);
    let b = bins as usize;
    let mut out = vec![0.0; 2 * b];
    for i in 0..samples as u64 {
        let (ix, _) = tomography_intensities(source.sample(&mut r, i).delta_phi, 1.0);
        out[((ix / 2.0 * b as f64) as usize).min(b - 1)] += 1.0;
    }
    for k in 0..b {
        let edge = |j: usize| arcsine_cdf(2.0 * j as f64 / b as f64, 1.0).unwrap_or(1.0);
        out[b + k] = samples as f64 * (edge(k + 1) - edge(k));
    }
    Ok(out)
}
