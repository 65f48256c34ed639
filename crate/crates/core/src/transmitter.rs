//! Passive source: random pulse-pair phase, local tomography, and
//! comparator postselection.
//!
//! A gain-switched laser emits pulse pairs whose phase difference `Δφ` is
//! uniformly random. A delay loop maps `Δφ` onto polarisation, and two
//! photodiodes read `I(1 + cos Δφ)` and `I(1 + sin Δφ)`. Comparator
//! thresholds keep only pairs near one of the four BB84 phases; the label of
//! a kept pair is known to the transmitter without any active modulation.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{self, BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::ParamError;
use crate::rng::{self, Stream, StreamUsage};
use crate::types::{LinkParams, PostselectionWindow, StateLabel};

/// One pulse pair leaving the transmitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitEmission {
    pub index: u64,
    /// Seconds since the start of the run.
    pub timestamp: f64,
    /// Phase difference between the two pulses, in `[0, 2π)`.
    pub delta_phi: f64,
    pub photon_count: u32,
    /// `None` when the comparators rejected the pair.
    pub label: Option<StateLabel>,
}

/// Comparator levels for the two tomography photodiodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparatorConfig {
    high_threshold: f64,
    low_threshold: f64,
    tomography_intensity: f64,
}

impl ComparatorConfig {
    /// Thresholds `I(1 ± cos δφ)` that accept `|Δφ − x| ≤ δφ` around each
    /// centre `x`.
    pub fn from_window(window: &PostselectionWindow) -> Result<Self, ParamError> {
        window.validate()?;
        let i = window.tomography_intensity;
        let c = window.delta_phi.cos();
        Self::new(i * (1.0 + c), i * (1.0 - c), i)
    }

    pub fn new(high_threshold: f64, low_threshold: f64, tomography_intensity: f64) -> Result<Self, ParamError> {
        let i = tomography_intensity;
        if !(i > 0.0 && i.is_finite()) {
            return Err(ParamError::new("comparator.tomography_intensity", "must be positive"));
        }
        if !(0.0 < low_threshold && low_threshold < i && i < high_threshold && high_threshold < 2.0 * i) {
            return Err(ParamError::new(
                "comparator",
                format!("need 0 < low < I < high < 2I, got low={low_threshold}, I={i}, high={high_threshold}"),
            ));
        }
        if ((high_threshold - i) - (i - low_threshold)).abs() > 1e-9 * i {
            return Err(ParamError::new("comparator", "high and low thresholds must be symmetric about I"));
        }
        // arcs of half-width δφ around 0, π/2, π, 3π/2 are disjoint iff δφ < π/4
        if high_threshold / i - 1.0 <= FRAC_1_SQRT_2 {
            return Err(ParamError::new(
                "comparator",
                "acceptance arcs overlap (window half-width must be below π/4)",
            ));
        }
        Ok(Self {
            high_threshold,
            low_threshold,
            tomography_intensity,
        })
    }

    pub fn high_threshold(&self) -> f64 {
        self.high_threshold
    }

    pub fn low_threshold(&self) -> f64 {
        self.low_threshold
    }

    pub fn tomography_intensity(&self) -> f64 {
        self.tomography_intensity
    }

    /// Half-width of the accepted phase arc implied by the thresholds.
    pub fn delta_phi(&self) -> f64 {
        (self.high_threshold / self.tomography_intensity - 1.0).clamp(-1.0, 1.0).acos()
    }

    pub fn acceptance_total(&self) -> f64 {
        4.0 * self.delta_phi() / PI
    }
}

/// Photodiode readings `(I(1 + cos Δφ), I(1 + sin Δφ))`; the quarter-wave
/// plate in the Y arm shifts the fringe by π/2.
pub fn tomography_intensities(delta_phi: f64, i: f64) -> (f64, f64) {
    let (s, c) = delta_phi.sin_cos();
    (i * (1.0 + c), i * (1.0 + s))
}

pub fn postselect(ix: f64, iy: f64, cfg: &ComparatorConfig) -> Option<StateLabel> {
    if ix >= cfg.high_threshold {
        Some(StateLabel::X1)
    } else if ix <= cfg.low_threshold {
        Some(StateLabel::X0)
    } else if iy >= cfg.high_threshold {
        Some(StateLabel::Y1)
    } else if iy <= cfg.low_threshold {
        Some(StateLabel::Y0)
    } else {
        None
    }
}

/// Comparator levels that keep `target_fraction` of all pulse pairs, split
/// evenly over the four labels.
pub fn threshold_for_rate(target_fraction: f64, i: f64) -> Result<ComparatorConfig, ParamError> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(ParamError::new(
            "target_fraction",
            format!("must lie in (0, 1), got {target_fraction}"),
        ));
    }
    let window = PostselectionWindow::new(PI * target_fraction / 4.0, i)?;
    ComparatorConfig::from_window(&window)
}

/// Precomputed emission model: comparator, photon-number law and noise.
#[derive(Debug, Clone)]
pub struct Source {
    comparator: ComparatorConfig,
    poisson: Poisson<f64>,
    clock_hz: f64,
    intensity_noise: f64,
}

impl Source {
    pub fn new(params: &LinkParams) -> Result<Self, ParamError> {
        params.validate()?;
        let poisson = Poisson::new(params.mu).map_err(|e| ParamError::new("link.mu", e.to_string()))?;
        Ok(Self {
            comparator: ComparatorConfig::from_window(&params.window)?,
            poisson,
            clock_hz: params.clock_hz,
            intensity_noise: params.intensity_noise,
        })
    }

    pub fn comparator(&self) -> &ComparatorConfig {
        &self.comparator
    }

    /// Draw the pair with sequence number `index`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, index: u64) -> QubitEmission {
        let delta_phi = rng.random::<f64>() * 2.0 * PI;
        let photon_count = self.poisson.sample(rng) as u32;
        let i = self.comparator.tomography_intensity;
        let (mut ix, mut iy) = tomography_intensities(delta_phi, i);
        if self.intensity_noise > 0.0 {
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            ix += self.intensity_noise * i * nx;
            iy += self.intensity_noise * i * ny;
        }
        QubitEmission {
            index,
            timestamp: index as f64 / self.clock_hz,
            delta_phi,
            photon_count,
            label: postselect(ix, iy, &self.comparator),
        }
    }
}

/// Draw one emission directly from link parameters.
pub fn sample_emission<R: Rng + ?Sized>(
    rng: &mut R,
    params: &LinkParams,
    index: u64,
) -> Result<QubitEmission, ParamError> {
    Ok(Source::new(params)?.sample(rng, index))
}

/// Sequential emission stream owned by one run.
#[derive(Debug, Clone)]
pub struct Transmitter {
    source: Source,
    rng: ChaCha8Rng,
    next_index: u64,
}

impl Transmitter {
    pub fn new(params: &LinkParams, seed: u64) -> Result<Self, ParamError> {
        Ok(Self {
            source: Source::new(params)?,
            rng: rng::stream(seed, Stream::Transmitter),
            next_index: 0,
        })
    }

    pub fn emit(&mut self) -> QubitEmission {
        let e = self.source.sample(&mut self.rng, self.next_index);
        self.next_index += 1;
        e
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn usage(&self) -> StreamUsage {
        StreamUsage::of(Stream::Transmitter, &self.rng)
    }
}

impl Iterator for Transmitter {
    type Item = QubitEmission;

    fn next(&mut self) -> Option<QubitEmission> {
        Some(self.emit())
    }
}

/// One line of the accepted-emission trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: u64,
    pub timestamp_ns: u64,
    pub label: StateLabel,
    pub photon_count: u32,
}

impl TraceRecord {
    pub fn from_emission(e: &QubitEmission) -> Option<Self> {
        Some(Self {
            index: e.index,
            timestamp_ns: (e.timestamp * 1e9).round() as u64,
            label: e.label?,
            photon_count: e.photon_count,
        })
    }
}

/// Write accepted emissions as newline-delimited JSON. Rejected pairs are
/// skipped. Returns the number of records written.
pub fn write_trace<'a, W: Write>(
    mut out: W,
    emissions: impl IntoIterator<Item = &'a QubitEmission>,
) -> io::Result<usize> {
    let mut n = 0;
    for rec in emissions.into_iter().filter_map(TraceRecord::from_emission) {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

pub fn read_trace<R: BufRead>(input: R) -> io::Result<Vec<TraceRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(io::Error::from))
        .collect()
}
