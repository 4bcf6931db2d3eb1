//! Per-pixel detection chain.
//!
//! Stages run in a fixed order: Poisson arrivals, quantum-efficiency
//! thinning, dark-count injection, afterpulsing, dead-time filtering and
//! finally timing jitter. Dark counts are injected after thinning, and
//! afterpulses can follow dark counts as well as photon detections.
//!
//! Times are integer picoseconds. Continuous quantities (uniform arrival
//! times, exponential afterpulse delays, Gaussian jitter) are sampled in
//! double precision and quantized to 1 ps.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;

use crate::aer::{Event, EventStream, StreamMetadata};
use crate::error::ConfigError;
use crate::radiometry::{FluxMap, SceneConfig, SpadConfig};
use crate::rng::{RngSeedPolicy, StageStreams};

pub const PS_PER_SECOND: f64 = 1e12;

pub fn seconds_to_ps(seconds: f64) -> u64 {
    (seconds * PS_PER_SECOND).round() as u64
}

pub fn ps_to_seconds(ps: u64) -> f64 {
    ps as f64 / PS_PER_SECOND
}

/// Detections of one pixel during one exposure.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PixelTrace {
    /// Sorted detection times, picoseconds.
    pub timestamps: Vec<u64>,
}

impl PixelTrace {
    pub fn new(mut timestamps: Vec<u64>) -> Self {
        timestamps.sort_unstable();
        Self { timestamps }
    }

    /// `N_T`, the number of detections.
    pub fn count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn first(&self) -> Option<u64> {
        self.timestamps.first().copied()
    }

    pub fn last(&self) -> Option<u64> {
        self.timestamps.last().copied()
    }
}

fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    // rejects only non-finite or astronomically large means
    let dist = Poisson::new(mean).expect("Poisson mean out of range");
    dist.sample(rng) as u64
}

fn uniform_ps<R: Rng + ?Sized>(exposure_ps: u64, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    ((u * exposure_ps as f64) as u64).min(exposure_ps - 1)
}

/// Homogeneous Poisson process with rate `flux` over `[0, exposure)`: a
/// Poisson count, then that many i.i.d. uniform times, sorted.
pub fn sample_arrivals<R: Rng + ?Sized>(flux: f64, exposure_ps: u64, rng: &mut R) -> Vec<u64> {
    let n = sample_poisson(flux * ps_to_seconds(exposure_ps), rng);
    let mut times: Vec<u64> = (0..n).map(|_| uniform_ps(exposure_ps, rng)).collect();
    times.sort_unstable();
    times
}

/// Keeps each arrival independently with probability `q`.
pub fn apply_quantum_efficiency<R: Rng + ?Sized>(mut arrivals: Vec<u64>, q: f64, rng: &mut R) -> Vec<u64> {
    if q >= 1.0 {
        return arrivals;
    }
    arrivals.retain(|_| rng.random::<f64>() < q);
    arrivals
}

/// Dark counts are a Poisson process at the dark count rate. They are not
/// thinned by the quantum efficiency.
pub fn sample_dark_counts<R: Rng + ?Sized>(dcr: f64, exposure_ps: u64, rng: &mut R) -> Vec<u64> {
    sample_arrivals(dcr, exposure_ps, rng)
}

/// Merges two ascending lists.
pub fn merge_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Each input event spawns, with probability `p_ap`, one afterpulse delayed
/// by an exponential with mean `dead_time / 2`. Afterpulses at or past the
/// end of the exposure are dropped, and afterpulses do not spawn further
/// afterpulses.
pub fn apply_afterpulsing<R: Rng + ?Sized>(
    detections: &[u64],
    p_ap: f64,
    dead_time_ps: u64,
    exposure_ps: u64,
    rng: &mut R,
) -> Vec<u64> {
    if p_ap <= 0.0 || detections.is_empty() {
        return detections.to_vec();
    }
    let mean_delay = 0.5 * dead_time_ps as f64;
    let delay = Exp::new(1.0 / mean_delay).expect("dead time must be positive");
    let mut afterpulses = Vec::new();
    for &t in detections {
        if rng.random::<f64>() < p_ap {
            let d = delay.sample(rng).round() as u64;
            let at = t.saturating_add(d);
            if at < exposure_ps {
                afterpulses.push(at);
            }
        }
    }
    if afterpulses.is_empty() {
        return detections.to_vec();
    }
    afterpulses.sort_unstable();
    merge_sorted(detections, &afterpulses)
}

/// Non-paralyzable dead time: keep the first event, then drop anything
/// closer than `dead_time_ps` to the last kept event.
pub fn apply_dead_time(events: &[u64], dead_time_ps: u64) -> Vec<u64> {
    let mut kept = Vec::with_capacity(events.len());
    let mut last: Option<u64> = None;
    for &t in events {
        match last {
            Some(prev) if t - prev < dead_time_ps => {}
            _ => {
                kept.push(t);
                last = Some(t);
            }
        }
    }
    kept
}

/// Adds independent Gaussian noise to every timestamp, clamps to
/// `[0, exposure]` and re-sorts.
pub fn apply_jitter<R: Rng + ?Sized>(mut events: Vec<u64>, sigma_ps: f64, exposure_ps: u64, rng: &mut R) -> Vec<u64> {
    if sigma_ps <= 0.0 || events.is_empty() {
        return events;
    }
    let noise = Normal::new(0.0, sigma_ps).expect("jitter sigma must be finite");
    let upper = exposure_ps as f64;
    for t in events.iter_mut() {
        let shifted = (*t as f64 + noise.sample(rng)).round();
        *t = shifted.clamp(0.0, upper) as u64;
    }
    events.sort_unstable();
    events
}

/// Result of simulating one pixel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimulatedPixel {
    /// Detections after dead-time filtering, before jitter. Consecutive
    /// entries are at least one dead time apart.
    pub pre_jitter: PixelTrace,
    /// Recorded detections.
    pub trace: PixelTrace,
}

/// Sensor and scene parameters resolved into the integer time base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelModel {
    pub quantum_efficiency: f64,
    pub afterpulse_prob: f64,
    pub dark_count_rate: f64,
    pub exposure_ps: u64,
    pub dead_time_ps: u64,
    pub jitter_sigma_ps: f64,
}

impl PixelModel {
    pub fn new(config: &SpadConfig, scene: &SceneConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        scene.validate()?;
        Ok(Self {
            quantum_efficiency: config.quantum_efficiency,
            afterpulse_prob: config.afterpulse_prob,
            dark_count_rate: config.dark_count_rate,
            exposure_ps: seconds_to_ps(scene.exposure),
            dead_time_ps: seconds_to_ps(config.dead_time),
            jitter_sigma_ps: config.jitter_sigma * PS_PER_SECOND,
        })
    }

    /// Upper bound on pre-jitter detections: `ceil(T / dead_time)`, which
    /// equals `floor(T / dead_time)` whenever the dead time divides T.
    pub fn max_count(&self) -> u64 {
        self.exposure_ps.div_ceil(self.dead_time_ps)
    }

    pub fn simulate(&self, flux: f64, streams: &mut StageStreams) -> SimulatedPixel {
        let arrivals = sample_arrivals(flux, self.exposure_ps, &mut streams.arrivals);
        let detected = apply_quantum_efficiency(arrivals, self.quantum_efficiency, &mut streams.quantum_efficiency);
        let dark = sample_dark_counts(self.dark_count_rate, self.exposure_ps, &mut streams.dark_counts);
        let avalanches = merge_sorted(&detected, &dark);
        let with_afterpulses = apply_afterpulsing(
            &avalanches,
            self.afterpulse_prob,
            self.dead_time_ps,
            self.exposure_ps,
            &mut streams.afterpulsing,
        );
        let pre_jitter = apply_dead_time(&with_afterpulses, self.dead_time_ps);
        let recorded = apply_jitter(pre_jitter.clone(), self.jitter_sigma_ps, self.exposure_ps, &mut streams.jitter);
        SimulatedPixel {
            pre_jitter: PixelTrace { timestamps: pre_jitter },
            trace: PixelTrace { timestamps: recorded },
        }
    }
}

pub fn simulate_pixel(
    flux: f64,
    config: &SpadConfig,
    scene: &SceneConfig,
    streams: &mut StageStreams,
) -> Result<SimulatedPixel, ConfigError> {
    Ok(PixelModel::new(config, scene)?.simulate(flux, streams))
}

/// Simulates every pixel of `flux_map` with its own derived random streams
/// and returns the events sorted by `(t, y, x)`. The output does not depend
/// on thread count or scheduling.
pub fn simulate_array(
    flux_map: &FluxMap,
    config: &SpadConfig,
    scene: &SceneConfig,
    policy: &RngSeedPolicy,
    image_index: u64,
) -> Result<EventStream, ConfigError> {
    let model = PixelModel::new(config, scene)?;
    let (width, height) = (flux_map.width, flux_map.height);
    if width == 0 || height == 0 || width > usize::from(u16::MAX) || height > usize::from(u16::MAX) {
        return Err(ConfigError::Invalid(format!("array size {width}x{height} outside 1..=65535")));
    }
    if flux_map.flux.len() != width * height {
        return Err(ConfigError::Invalid(format!(
            "flux map holds {} values, expected {width}x{height}",
            flux_map.flux.len()
        )));
    }
    if let Some(f) = flux_map.flux.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
        return Err(ConfigError::out_of_range("flux", *f, "finite and >= 0"));
    }

    let mut events: Vec<Event> = flux_map
        .flux
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &flux)| {
            let mut streams = policy.pixel_streams(image_index, i as u64);
            let pixel = model.simulate(flux, &mut streams);
            let (x, y) = ((i % width) as u16, (i / width) as u16);
            pixel.trace.timestamps.into_iter().map(move |t| Event { x, y, t })
        })
        .collect();
    events.par_sort_unstable_by_key(|e| (e.t, e.y, e.x));

    Ok(EventStream {
        width: width as u16,
        height: height as u16,
        exposure_ps: model.exposure_ps,
        events,
        metadata: StreamMetadata {
            config: *config,
            scene: *scene,
            master_seed: policy.master_seed,
            seed_domain: policy.domain,
            image_index,
        },
    })
}
