//! Closed-form flux estimators and median normalization.
//!
//! * counts: `N / (q·T)`
//! * passive free-running: `N / (q·(T − N·τ_d))`
//! * inter-photon: `(N − 1) / (q·(X_N − X_1 − (N − 1)·τ_d))`
//!
//! Denominators are evaluated in integer picoseconds so that the saturated
//! cases (denominator exactly zero) are detected exactly. A non-positive
//! denominator yields the saturation rate `1 / (q·τ_d)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aer::{pixel_traces, EventStream};
use crate::pixel_sim::{seconds_to_ps, PixelTrace, PS_PER_SECOND};
use crate::radiometry::SpadConfig;

pub const DEFAULT_CLIP_MULTIPLE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Counts,
    PassiveFreeRunning,
    InterPhoton,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Counts, Estimator::PassiveFreeRunning, Estimator::InterPhoton];

    /// Short name used on the command line and in directory names.
    pub fn short_name(self) -> &'static str {
        match self {
            Estimator::Counts => "counts",
            Estimator::PassiveFreeRunning => "pf",
            Estimator::InterPhoton => "ip",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Estimator {
    type Err = ReconstructError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "counts" | "c" => Ok(Estimator::Counts),
            "pf" | "passive_free_running" => Ok(Estimator::PassiveFreeRunning),
            "ip" | "inter_photon" => Ok(Estimator::InterPhoton),
            other => Err(ReconstructError::UnknownEstimator(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReconstructError {
    #[error("unknown estimator {0:?} (expected counts, pf or ip)")]
    UnknownEstimator(String),
    #[error("normalization undefined: no strictly positive pixel in the training estimates")]
    UndefinedNormalization,
}

fn saturation(q: f64, dead_time_ps: u64) -> f64 {
    PS_PER_SECOND / (q * dead_time_ps as f64)
}

pub fn estimate_counts(trace: &PixelTrace, q: f64, exposure_ps: u64) -> f64 {
    trace.count() as f64 / (q * exposure_ps as f64) * PS_PER_SECOND
}

pub fn estimate_pf(trace: &PixelTrace, q: f64, exposure_ps: u64, dead_time_ps: u64) -> f64 {
    let n = trace.count();
    if n == 0 {
        return 0.0;
    }
    let live = i128::from(exposure_ps) - n as i128 * i128::from(dead_time_ps);
    if live <= 0 {
        return saturation(q, dead_time_ps);
    }
    n as f64 / (q * live as f64) * PS_PER_SECOND
}

/// Zero for fewer than two detections.
pub fn estimate_ip(trace: &PixelTrace, q: f64, dead_time_ps: u64) -> f64 {
    let n = trace.count();
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        return 0.0;
    };
    if n < 2 {
        return 0.0;
    }
    let gaps = (n - 1) as i128;
    let free = i128::from(last) - i128::from(first) - gaps * i128::from(dead_time_ps);
    if free <= 0 {
        return saturation(q, dead_time_ps);
    }
    gaps as f64 / (q * free as f64) * PS_PER_SECOND
}

/// Median-normalization state fitted on training estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub median_nonzero: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub median_nonzero: f64,
    /// `None` when clipping is disabled.
    pub clip_multiple: Option<f64>,
}

/// Reconstructed flux image, row-major, photons/s (or normalized units).
#[derive(Debug, Clone, PartialEq)]
pub struct FluxEstimate {
    pub width: usize,
    pub height: usize,
    pub flux: Vec<f64>,
    pub estimator: Estimator,
    pub normalization: Option<Normalization>,
}

pub fn estimate_trace(estimator: Estimator, trace: &PixelTrace, q: f64, exposure_ps: u64, dead_time_ps: u64) -> f64 {
    match estimator {
        Estimator::Counts => estimate_counts(trace, q, exposure_ps),
        Estimator::PassiveFreeRunning => estimate_pf(trace, q, exposure_ps, dead_time_ps),
        Estimator::InterPhoton => estimate_ip(trace, q, dead_time_ps),
    }
}

/// Applies `estimator` to every pixel of the stream. Quantum efficiency and
/// dead time come from `config`; the exposure comes from the stream header.
pub fn reconstruct_image(stream: &EventStream, estimator: Estimator, config: &SpadConfig) -> FluxEstimate {
    let grid = pixel_traces(stream);
    let dead_time_ps = seconds_to_ps(config.dead_time);
    let q = config.quantum_efficiency;
    let flux = grid
        .traces
        .iter()
        .map(|t| estimate_trace(estimator, t, q, stream.exposure_ps, dead_time_ps))
        .collect();
    FluxEstimate {
        width: grid.width,
        height: grid.height,
        flux,
        estimator,
        normalization: None,
    }
}

/// Median of a non-empty slice; even lengths average the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let (lower, &mut upper, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        Some(upper)
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(0.5 * (below + upper))
    }
}

/// Median of all strictly positive pixels pooled over the collection.
pub fn fit_normalization<'a, I>(training: I) -> Result<NormalizationState, ReconstructError>
where
    I: IntoIterator<Item = &'a FluxEstimate>,
{
    let mut positive: Vec<f64> = training
        .into_iter()
        .flat_map(|e| e.flux.iter().copied().filter(|v| *v > 0.0))
        .collect();
    median(&mut positive)
        .map(|median_nonzero| NormalizationState { median_nonzero })
        .ok_or(ReconstructError::UndefinedNormalization)
}

/// Divides by the fitted median and, if `clip_multiple` is set, clips to
/// `[0, clip_multiple]`.
pub fn apply_normalization(estimate: &FluxEstimate, state: &NormalizationState, clip_multiple: Option<f64>) -> FluxEstimate {
    let upper = clip_multiple.unwrap_or(f64::INFINITY);
    let flux = estimate
        .flux
        .iter()
        .map(|v| (v / state.median_nonzero).clamp(0.0, upper))
        .collect();
    FluxEstimate {
        width: estimate.width,
        height: estimate.height,
        flux,
        estimator: estimate.estimator,
        normalization: Some(Normalization {
            median_nonzero: state.median_nonzero,
            clip_multiple,
        }),
    }
}

/// 8-bit preview: `value × 255 / clip_multiple`, rounded half to even.
pub fn preview_u8(values: &[f64], clip_multiple: f64) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v * 255.0 / clip_multiple).round_ties_even().clamp(0.0, 255.0) as u8)
        .collect()
}
