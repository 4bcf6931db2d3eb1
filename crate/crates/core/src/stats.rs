//! Photon-count statistics over event streams.

use std::fmt::Write as _;
use std::io::{self, Write};

use thiserror::Error;

use crate::aer::{pixel_traces, EventStream};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("stream {index} is {got_w}x{got_h} with exposure {got_t} ps, expected {want_w}x{want_h} with {want_t} ps")]
    Mismatch {
        index: usize,
        got_w: u16,
        got_h: u16,
        got_t: u64,
        want_w: u16,
        want_h: u16,
        want_t: u64,
    },
    #[error("histogram is empty")]
    Empty,
}

/// Frequencies of per-pixel photon counts. Bin `k` holds the number of
/// pixels that recorded exactly `k` detections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountHistogram {
    pub frequencies: Vec<u64>,
    pub total_pixels: u64,
    pub label: Option<String>,
}

impl CountHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn record(&mut self, count: usize) {
        if count >= self.frequencies.len() {
            self.frequencies.resize(count + 1, 0);
        }
        self.frequencies[count] += 1;
        self.total_pixels += 1;
    }

    /// Adds every pixel of `stream`.
    pub fn add_stream(&mut self, stream: &EventStream) {
        for trace in pixel_traces(stream).traces {
            self.record(trace.count());
        }
    }

    /// Associative merge of two partial histograms.
    pub fn merge(mut self, other: &CountHistogram) -> CountHistogram {
        if other.frequencies.len() > self.frequencies.len() {
            self.frequencies.resize(other.frequencies.len(), 0);
        }
        for (a, b) in self.frequencies.iter_mut().zip(&other.frequencies) {
            *a += b;
        }
        self.total_pixels += other.total_pixels;
        self
    }

    pub fn max_count(&self) -> Option<usize> {
        self.frequencies.iter().rposition(|&f| f > 0)
    }

    /// First moment: mean detections per pixel.
    pub fn mean(&self) -> f64 {
        if self.total_pixels == 0 {
            return 0.0;
        }
        let sum: u64 = self.frequencies.iter().enumerate().map(|(k, f)| k as u64 * f).sum();
        sum as f64 / self.total_pixels as f64
    }

    /// Most frequent bin; ties resolve to the lowest count.
    pub fn modal_bin(&self) -> Option<usize> {
        let max = *self.frequencies.iter().max()?;
        (max > 0).then(|| self.frequencies.iter().position(|&f| f == max).unwrap())
    }

    /// `bin<TAB>frequency` lines with a header.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "count\tfrequency")?;
        for (k, f) in self.frequencies.iter().enumerate() {
            writeln!(out, "{k}\t{f}")?;
        }
        Ok(())
    }

    /// Bar chart with a log10 frequency axis.
    pub fn to_svg(&self) -> String {
        let (w, h, margin) = (640.0, 360.0, 40.0);
        let bins = self.frequencies.len().max(1);
        let top = self.frequencies.iter().copied().max().unwrap_or(1).max(1) as f64;
        let decades = top.log10().ceil().max(1.0);
        let bar_w = (w - 2.0 * margin) / bins as f64;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        if let Some(label) = &self.label {
            let _ = writeln!(svg, r#"<text x="{margin}" y="20" font-size="14">{}</text>"#, escape(label));
        }
        for (k, &f) in self.frequencies.iter().enumerate().filter(|(_, f)| **f > 0) {
            // a single pixel sits one tenth of a decade above the axis
            let frac = ((f as f64).log10() + 0.1) / (decades + 0.1);
            let bar_h = frac * (h - 2.0 * margin);
            let x = margin + k as f64 * bar_w;
            let y = h - margin - bar_h;
            let _ = writeln!(
                svg,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bar_h:.2}" fill="#3465a4"/>"##,
                bar_w.max(0.5)
            );
        }
        let _ = writeln!(
            svg,
            r#"<line x1="{margin}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
            h - margin,
            w - margin
        );
        let _ = writeln!(
            svg,
            r#"<text x="{margin}" y="{}" font-size="12">0</text><text x="{}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
            h - margin + 16.0,
            w - margin,
            h - margin + 16.0,
            bins - 1
        );
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{}" font-size="12">1e{decades}</text>"#,
            margin + 4.0
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pools per-pixel counts over streams that share dimensions and exposure.
pub fn count_histogram(streams: &[EventStream]) -> Result<CountHistogram, StatsError> {
    let mut hist = CountHistogram::new();
    let Some(first) = streams.first() else {
        return Ok(hist);
    };
    for (index, s) in streams.iter().enumerate() {
        if (s.width, s.height, s.exposure_ps) != (first.width, first.height, first.exposure_ps) {
            return Err(StatsError::Mismatch {
                index,
                got_w: s.width,
                got_h: s.height,
                got_t: s.exposure_ps,
                want_w: first.width,
                want_h: first.height,
                want_t: first.exposure_ps,
            });
        }
        hist.add_stream(s);
    }
    Ok(hist)
}

/// Detections per pixel.
pub fn mean_count(stream: &EventStream) -> f64 {
    stream.event_count() as f64 / stream.pixel_count() as f64
}

/// Peak-detection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakRule {
    /// Width of the centered moving average applied before peak search.
    pub smoothing_width: usize,
    /// A peak is significant when its prominence exceeds this many Poisson
    /// standard deviations of its smoothed height.
    pub min_prominence_sigmas: f64,
}

impl Default for PeakRule {
    fn default() -> Self {
        Self {
            smoothing_width: 3,
            min_prominence_sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub bin: usize,
    pub height: f64,
    pub prominence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalityReport {
    pub modal_bin: usize,
    /// Every strict local maximum of the smoothed profile, in bin order.
    pub local_maxima: Vec<Peak>,
    /// The most prominent significant maximum other than the main mode.
    pub secondary_peak: Option<Peak>,
}

pub fn moving_average(values: &[u64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64
        })
        .collect()
}

/// Strict local maxima; a flat run counts once, at its center, when both
/// neighbours of the run are lower (array ends count as lower).
fn local_maxima(profile: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < profile.len() {
        let mut j = i;
        while j + 1 < profile.len() && profile[j + 1] == profile[i] {
            j += 1;
        }
        let left_lower = i == 0 || profile[i - 1] < profile[i];
        let right_lower = j + 1 == profile.len() || profile[j + 1] < profile[i];
        if left_lower && right_lower && profile[i] > 0.0 {
            out.push((i + j) / 2);
        }
        i = j + 1;
    }
    out
}

/// Topographic prominence: height above the higher of the two lowest points
/// separating the peak from taller terrain on either side.
fn prominence(profile: &[f64], peak: usize) -> f64 {
    let h = profile[peak];
    let side = |range: &mut dyn Iterator<Item = usize>| {
        let mut lowest = h;
        for k in range {
            if profile[k] > h {
                return lowest;
            }
            lowest = lowest.min(profile[k]);
        }
        // no taller terrain on this side
        f64::NEG_INFINITY
    };
    let left = side(&mut (0..peak).rev());
    let right = side(&mut (peak + 1..profile.len()));
    let base = left.max(right);
    if base == f64::NEG_INFINITY {
        // highest peak: measured against the lowest point anywhere
        h - profile.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        h - base
    }
}

/// Finds the main mode and, if present, a significant secondary peak.
pub fn bimodality_check(hist: &CountHistogram, rule: PeakRule) -> Result<BimodalityReport, StatsError> {
    let modal_bin = hist.modal_bin().ok_or(StatsError::Empty)?;
    let profile = moving_average(&hist.frequencies, rule.smoothing_width.max(1));
    let maxima: Vec<Peak> = local_maxima(&profile)
        .into_iter()
        .map(|bin| Peak {
            bin,
            height: profile[bin],
            prominence: prominence(&profile, bin),
        })
        .collect();
    let main = maxima
        .iter()
        .max_by(|a, b| a.height.total_cmp(&b.height).then(b.bin.cmp(&a.bin)))
        .map(|p| p.bin);
    let noise = rule.smoothing_width.max(1) as f64;
    let secondary_peak = maxima
        .iter()
        .filter(|p| Some(p.bin) != main)
        .filter(|p| p.prominence > rule.min_prominence_sigmas * (p.height / noise).sqrt().max(1.0))
        .max_by(|a, b| a.prominence.total_cmp(&b.prominence))
        .copied();
    Ok(BimodalityReport {
        modal_bin,
        local_maxima: maxima,
        secondary_peak,
    })
}
