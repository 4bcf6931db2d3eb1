//! TR-MNIST pipeline: IDX images in, one TRSP file per (image, lux level)
//! out, plus manifests, reconstructed rasters and count statistics.
//!
//! Layout under the output root:
//!
//! ```text
//! <root>/<split>/<lux_mlux>/<index>.trsp
//! <root>/<split>/<lux_mlux>/manifest.toml
//! <root>/rec/<estimator>/<lux_mlux>/<split>-images-idx3-float
//! <root>/rec/<estimator>/<lux_mlux>/<split>-preview-idx3-ubyte
//! <root>/rec/<estimator>/<lux_mlux>/<split>-labels-idx1-ubyte
//! <root>/rec/<estimator>/<lux_mlux>/manifest.toml
//! ```

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aer::{self, AerError, EventStream};
use crate::error::ConfigError;
use crate::idx::{self, IdxError, LabeledImages};
use crate::pixel_sim::simulate_array;
use crate::radiometry::{image_to_flux, SceneConfig, SpadConfig};
use crate::reconstruct::{
    apply_normalization, fit_normalization, preview_u8, reconstruct_image, Estimator, FluxEstimate,
    ReconstructError, DEFAULT_CLIP_MULTIPLE,
};
use crate::rng::{splitmix64, RngSeedPolicy};
use crate::stats::{bimodality_check, BimodalityReport, CountHistogram, PeakRule, StatsError};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DEFAULT_LUX_MLUX: [u32; 10] = [5, 10, 20, 40, 80, 160, 320, 640, 1280, 2560];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("{path}: {source}")]
    Aer {
        path: PathBuf,
        #[source]
        source: AerError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("no {split} manifest for {lux_mlux} mlux under {root}")]
    MissingSplit { split: Split, lux_mlux: u32, root: PathBuf },
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Io,
}

impl DatasetError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            DatasetError::Config(_) | DatasetError::MissingSplit { .. } => ErrorKind::Usage,
            DatasetError::Io { .. } => ErrorKind::Io,
            DatasetError::Idx(IdxError::Io { .. }) => ErrorKind::Io,
            DatasetError::Aer {
                source: AerError::Io { .. },
                ..
            } => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reference illuminances in millilux, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct LuxSchedule(Vec<u32>);

impl LuxSchedule {
    pub fn new(levels: Vec<u32>) -> Result<Self, ConfigError> {
        if levels.is_empty() {
            return Err(ConfigError::Invalid("lux schedule is empty".into()));
        }
        if levels.contains(&0) {
            return Err(ConfigError::Invalid("lux levels must be > 0 mlux".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Invalid(format!("lux levels {levels:?} are not strictly increasing")));
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }
}

impl TryFrom<Vec<u32>> for LuxSchedule {
    type Error = ConfigError;

    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        LuxSchedule::new(v)
    }
}

impl From<LuxSchedule> for Vec<u32> {
    fn from(s: LuxSchedule) -> Self {
        s.0
    }
}

/// Ten doubling levels from 5 to 2560 mlux.
pub fn default_lux_schedule() -> LuxSchedule {
    LuxSchedule(DEFAULT_LUX_MLUX.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "t10k" => Ok(Split::Test),
            other => Err(ConfigError::Invalid(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

/// TOML integers are signed 64-bit, so seeds are written as `0x` hex strings
/// when they do not fit. Plain integers are accepted on input.
mod seed_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => s.serialize_i64(i),
            Err(_) => s.serialize_str(&format!("{v:#018x}")),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(i) => u64::try_from(i).map_err(|_| de::Error::custom("seed must be non-negative")),
            Repr::Str(s) => {
                let parsed = match s.strip_prefix("0x") {
                    Some(hex) => u64::from_str_radix(hex, 16),
                    None => s.parse(),
                };
                parsed.map_err(|_| de::Error::custom(format!("invalid seed {s:?}")))
            }
        }
    }
}

/// Generation settings, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: String,
    #[serde(with = "seed_serde")]
    pub seed: u64,
    /// Exposure time, seconds.
    pub exposure: f64,
    pub lux_mlux: Vec<u32>,
    pub sensor: SpadConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: "tr-mnist".into(),
            seed: 0,
            exposure: 1e-3,
            lux_mlux: DEFAULT_LUX_MLUX.to_vec(),
            sensor: SpadConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(Self::from_toml(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks every parameter and returns the lux schedule.
    pub fn validate(&self) -> Result<LuxSchedule, ConfigError> {
        self.sensor.validate()?;
        let schedule = LuxSchedule::new(self.lux_mlux.clone())?;
        for &lux in schedule.levels() {
            self.scene(lux).validate()?;
        }
        Ok(schedule)
    }

    pub fn scene(&self, lux_mlux: u32) -> SceneConfig {
        SceneConfig {
            reference_lux: f64::from(lux_mlux) / 1000.0,
            exposure: self.exposure,
        }
    }
}

/// Seed domain separating splits and lux levels, so that e.g. train image 0
/// and test image 0 never share random streams.
pub fn seed_domain(split: Split, lux_mlux: u32) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Test => 2u64,
    };
    splitmix64((tag << 32) | u64::from(lux_mlux))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Index into the source IDX file.
    pub index: u64,
    pub label: u8,
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset: String,
    pub split: Split,
    pub lux_mlux: u32,
    pub lux_levels: Vec<u32>,
    pub exposure: f64,
    #[serde(with = "seed_serde")]
    pub master_seed: u64,
    #[serde(with = "seed_serde")]
    pub seed_domain: u64,
    /// Number of images in the source IDX file.
    pub source_images: u64,
    pub sensor: SpadConfig,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = toml::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest {
                path: path.to_path_buf(),
                message: format!("unsupported manifest version {}", m.format_version),
            });
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            reference_lux: f64::from(self.lux_mlux) / 1000.0,
            exposure: self.exposure,
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

pub fn manifest_path(root: &Path, split: Split, lux_mlux: u32) -> PathBuf {
    root.join(split.name()).join(lux_mlux.to_string()).join(MANIFEST_FILE)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Which source images to simulate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Selection {
    #[default]
    All,
    /// The first `n` images.
    Limit(usize),
    Indices(Vec<usize>),
}

impl Selection {
    fn resolve(&self, available: usize) -> Result<Vec<usize>, ConfigError> {
        match self {
            Selection::All => Ok((0..available).collect()),
            Selection::Limit(n) => Ok((0..(*n).min(available)).collect()),
            Selection::Indices(idx) => {
                if let Some(bad) = idx.iter().find(|&&i| i >= available) {
                    return Err(ConfigError::Invalid(format!(
                        "index {bad} out of range for {available} source images"
                    )));
                }
                let mut v = idx.clone();
                v.sort_unstable();
                v.dedup();
                Ok(v)
            }
        }
    }
}

/// Simulates one source image at one lux level.
pub fn simulate_image(
    images: &LabeledImages,
    index: usize,
    split: Split,
    lux_mlux: u32,
    config: &PipelineConfig,
) -> Result<EventStream, ConfigError> {
    let scene = config.scene(lux_mlux);
    let flux = image_to_flux(&images.image(index), &scene, &config.sensor);
    let policy = RngSeedPolicy::new(config.seed).with_domain(seed_domain(split, lux_mlux));
    simulate_array(&flux, &config.sensor, &scene, &policy, index as u64)
}

/// Writes one TRSP file per selected image and lux level and a manifest per
/// lux level. The configuration is validated before anything is written. On
/// failure, manifests written by this call are removed.
pub fn generate_dataset(
    images: &LabeledImages,
    split: Split,
    config: &PipelineConfig,
    selection: &Selection,
    root: &Path,
) -> Result<Vec<DatasetManifest>, DatasetError> {
    let schedule = config.validate()?;
    let indices = selection.resolve(images.len())?;
    if images.rows > usize::from(u16::MAX) || images.cols > usize::from(u16::MAX) {
        return Err(ConfigError::Invalid(format!("images of {}x{} exceed the TRSP limit", images.cols, images.rows)).into());
    }

    let mut written: Vec<PathBuf> = Vec::new();
    let mut manifests = Vec::new();
    for &lux in schedule.levels() {
        match generate_level(images, split, lux, config, &schedule, &indices, root) {
            Ok(m) => {
                let path = manifest_path(root, split, lux);
                if let Err(e) = fs::write(&path, m.to_toml()).map_err(io_err(&path)) {
                    cleanup(&written);
                    return Err(e);
                }
                written.push(path);
                manifests.push(m);
            }
            Err(e) => {
                cleanup(&written);
                return Err(e);
            }
        }
    }
    Ok(manifests)
}

fn cleanup(manifests: &[PathBuf]) {
    for path in manifests {
        let _ = fs::remove_file(path);
    }
}

fn generate_level(
    images: &LabeledImages,
    split: Split,
    lux_mlux: u32,
    config: &PipelineConfig,
    schedule: &LuxSchedule,
    indices: &[usize],
    root: &Path,
) -> Result<DatasetManifest, DatasetError> {
    let rel_dir = format!("{}/{}", split.name(), lux_mlux);
    let dir = root.join(split.name()).join(lux_mlux.to_string());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let samples = indices
        .par_iter()
        .map(|&index| {
            let stream = simulate_image(images, index, split, lux_mlux, config)?;
            let path = dir.join(format!("{index}.trsp"));
            let bytes = aer::to_bytes(&stream).map_err(|source| DatasetError::Aer {
                path: path.clone(),
                source,
            })?;
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            Ok(SampleRecord {
                index: index as u64,
                label: images.labels[index],
                path: format!("{rel_dir}/{index}.trsp"),
                sha256: sha256_hex(&bytes),
                events: stream.event_count(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;

    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        dataset: config.dataset.clone(),
        split,
        lux_mlux,
        lux_levels: schedule.levels().to_vec(),
        exposure: config.exposure,
        master_seed: config.seed,
        seed_domain: seed_domain(split, lux_mlux),
        source_images: images.len() as u64,
        sensor: config.sensor,
        samples,
    })
}

pub fn read_sample(root: &Path, sample: &SampleRecord) -> Result<EventStream, DatasetError> {
    let path = root.join(&sample.path);
    aer::read_file(&path).map_err(|source| DatasetError::Aer { path, source })
}

/// All generation manifests under `root`, ordered by split then lux.
pub fn discover_manifests(root: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut found = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        if !dir.is_dir() {
            continue;
        }
        let mut levels: Vec<u32> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if let Some(lux) = entry.file_name().to_str().and_then(|s| s.parse().ok()) {
                if entry.path().join(MANIFEST_FILE).is_file() {
                    levels.push(lux);
                }
            }
        }
        levels.sort_unstable();
        found.extend(levels.into_iter().map(|lux| manifest_path(root, split, lux)));
    }
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerifyReport {
    pub checked: usize,
    pub missing: Vec<String>,
    /// `(path, expected, actual)`
    pub mismatched: Vec<(String, String, String)>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.mismatched.is_empty()
    }
}

/// Recomputes every sample digest listed in `manifest`.
pub fn verify_manifest(root: &Path, manifest: &DatasetManifest) -> VerifyReport {
    let results: Vec<(String, Option<String>, String)> = manifest
        .samples
        .par_iter()
        .map(|s| {
            let actual = fs::read(root.join(&s.path)).ok().map(|b| sha256_hex(&b));
            (s.path.clone(), actual, s.sha256.clone())
        })
        .collect();
    let mut report = VerifyReport {
        checked: results.len(),
        ..Default::default()
    };
    for (path, actual, expected) in results {
        match actual {
            None => report.missing.push(path),
            Some(a) if a != expected => report.mismatched.push((path, expected, a)),
            Some(_) => {}
        }
    }
    report
}

/// Per-split record of a reconstructed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedSplit {
    pub split: Split,
    pub count: u64,
    pub images: String,
    pub preview: String,
    pub labels: String,
    pub images_sha256: String,
    pub source_manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionManifest {
    pub format_version: u32,
    pub dataset: String,
    pub estimator: Estimator,
    pub lux_mlux: u32,
    pub rows: u32,
    pub cols: u32,
    /// Absent when the training estimates have no positive pixel.
    pub median_nonzero: Option<f64>,
    pub clip_multiple: Option<f64>,
    pub fitted_on: Split,
    pub splits: Vec<ReconstructedSplit>,
}

impl ReconstructionManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn reconstruction_dir(root: &Path, estimator: Estimator, lux_mlux: u32) -> PathBuf {
    root.join("rec").join(estimator.short_name()).join(lux_mlux.to_string())
}

/// Reconstructs every sample of a manifest without normalization, in
/// manifest order. Sensor parameters come from each file's embedded config.
pub fn reconstruct_split(
    root: &Path,
    manifest: &DatasetManifest,
    estimator: Estimator,
) -> Result<Vec<FluxEstimate>, DatasetError> {
    manifest
        .samples
        .par_iter()
        .map(|s| {
            let stream = read_sample(root, s)?;
            Ok(reconstruct_image(&stream, estimator, &stream.metadata.config))
        })
        .collect()
}

/// Fits the median normalization on the training split of one lux level,
/// applies it to both splits and writes float rasters, 8-bit previews and
/// labels. Returns the written manifest.
///
/// When the training estimates contain no positive pixel the raw (all-zero)
/// rasters are still written, then `UndefinedNormalization` is returned.
pub fn reconstruct_dataset(
    root: &Path,
    estimator: Estimator,
    lux_mlux: u32,
    clip_multiple: Option<f64>,
) -> Result<ReconstructionManifest, DatasetError> {
    if let Some(c) = clip_multiple {
        if !(c.is_finite() && c > 0.0) {
            return Err(ConfigError::out_of_range("clip_multiple", c, "> 0").into());
        }
    }
    let train_path = manifest_path(root, Split::Train, lux_mlux);
    if !train_path.is_file() {
        return Err(DatasetError::MissingSplit {
            split: Split::Train,
            lux_mlux,
            root: root.to_path_buf(),
        });
    }
    let mut sources = vec![(train_path, DatasetManifest::load(&manifest_path(root, Split::Train, lux_mlux))?)];
    let test_path = manifest_path(root, Split::Test, lux_mlux);
    if test_path.is_file() {
        let m = DatasetManifest::load(&test_path)?;
        sources.push((test_path, m));
    }

    let mut estimates = Vec::new();
    for (_, m) in &sources {
        estimates.push(reconstruct_split(root, m, estimator)?);
    }
    let fitted = fit_normalization(estimates[0].iter());
    let normalized: Vec<Vec<FluxEstimate>> = match &fitted {
        Ok(state) => estimates
            .iter()
            .map(|split| split.iter().map(|e| apply_normalization(e, state, clip_multiple)).collect())
            .collect(),
        Err(_) => estimates,
    };

    let (rows, cols) = normalized
        .iter()
        .flatten()
        .next()
        .map(|e| (e.height, e.width))
        .unwrap_or((0, 0));
    let dir = reconstruction_dir(root, estimator, lux_mlux);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let rel = format!("rec/{}/{}", estimator.short_name(), lux_mlux);
    let preview_scale = clip_multiple.unwrap_or(DEFAULT_CLIP_MULTIPLE);

    let mut splits = Vec::new();
    for ((source_path, m), split_estimates) in sources.iter().zip(&normalized) {
        let name = m.split.name();
        let values: Vec<f32> = split_estimates.iter().flat_map(|e| e.flux.iter().map(|&v| v as f32)).collect();
        let preview: Vec<u8> = split_estimates
            .iter()
            .flat_map(|e| preview_u8(&e.flux, preview_scale))
            .collect();
        let float_bytes = idx::encode_images_f32(rows.max(1), cols.max(1), &values);
        let files = [
            (format!("{name}-images-idx3-float"), float_bytes),
            (format!("{name}-preview-idx3-ubyte"), idx::encode_images_u8(rows.max(1), cols.max(1), &preview)),
            (format!("{name}-labels-idx1-ubyte"), idx::encode_labels(&m.labels())),
        ];
        for (file, bytes) in &files {
            let path = dir.join(file);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        let source_bytes = fs::read(source_path).map_err(io_err(source_path))?;
        splits.push(ReconstructedSplit {
            split: m.split,
            count: split_estimates.len() as u64,
            images: format!("{rel}/{}", files[0].0),
            preview: format!("{rel}/{}", files[1].0),
            labels: format!("{rel}/{}", files[2].0),
            images_sha256: sha256_hex(&files[0].1),
            source_manifest_sha256: sha256_hex(&source_bytes),
        });
    }

    let manifest = ReconstructionManifest {
        format_version: MANIFEST_VERSION,
        dataset: sources[0].1.dataset.clone(),
        estimator,
        lux_mlux,
        rows: rows as u32,
        cols: cols as u32,
        median_nonzero: fitted.as_ref().ok().map(|s| s.median_nonzero),
        clip_multiple,
        fitted_on: Split::Train,
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).expect("manifest is always serializable");
    fs::write(&path, text).map_err(io_err(&path))?;
    fitted?;
    Ok(manifest)
}

/// Count statistics of one (split, lux) manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub split: Split,
    pub lux_mlux: u32,
    pub images: usize,
    pub histogram: CountHistogram,
    /// Mean detections per pixel, pooled over all images.
    pub mean_count: f64,
    pub bimodality: Option<BimodalityReport>,
}

pub fn level_stats(root: &Path, manifest: &DatasetManifest, rule: PeakRule) -> Result<LevelStats, DatasetError> {
    let histogram = manifest
        .samples
        .par_iter()
        .map(|s| {
            let stream = read_sample(root, s)?;
            let mut h = CountHistogram::new();
            h.add_stream(&stream);
            Ok::<_, DatasetError>(h)
        })
        .try_reduce(CountHistogram::new, |a, b| Ok(a.merge(&b)))?
        .with_label(format!("{} {} mlux", manifest.split, manifest.lux_mlux));
    let bimodality = if histogram.total_pixels > 0 {
        Some(bimodality_check(&histogram, rule)?)
    } else {
        None
    };
    Ok(LevelStats {
        split: manifest.split,
        lux_mlux: manifest.lux_mlux,
        images: manifest.samples.len(),
        mean_count: histogram.mean(),
        histogram,
        bimodality,
    })
}

/// Computes statistics for each manifest and writes `hist-<split>-<lux>mlux`
/// TSV and SVG files plus `summary.tsv` into `out_dir`.
pub fn stats_command(root: &Path, manifests: &[DatasetManifest], out_dir: &Path, rule: PeakRule) -> Result<Vec<LevelStats>, DatasetError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut summary = String::from("split\tlux_mlux\timages\tmean_count\tmodal_bin\tsecondary_peak\n");
    let mut all = Vec::new();
    for m in manifests {
        let s = level_stats(root, m, rule)?;
        let stem = format!("hist-{}-{}mlux", s.split, s.lux_mlux);
        let tsv = out_dir.join(format!("{stem}.tsv"));
        let mut buf = Vec::new();
        s.histogram.write_tsv(&mut buf).expect("writing to memory");
        fs::write(&tsv, buf).map_err(io_err(&tsv))?;
        let svg = out_dir.join(format!("{stem}.svg"));
        fs::write(&svg, s.histogram.to_svg()).map_err(io_err(&svg))?;
        let modal = s.bimodality.as_ref().map(|b| b.modal_bin.to_string()).unwrap_or_else(|| "-".into());
        let secondary = s
            .bimodality
            .as_ref()
            .and_then(|b| b.secondary_peak)
            .map(|p| p.bin.to_string())
            .unwrap_or_else(|| "-".into());
        summary.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{modal}\t{secondary}\n",
            s.split, s.lux_mlux, s.images, s.mean_count
        ));
        all.push(s);
    }
    let path = out_dir.join("summary.tsv");
    fs::write(&path, summary).map_err(io_err(&path))?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images() -> LabeledImages {
        // 4x3 images: one black, one with a bright bar, one all white
        let mut pixels = vec![0u8; 12];
        pixels.extend([0, 255, 255, 0, 0, 255, 255, 0, 0, 128, 128, 0]);
        pixels.extend([255u8; 12]);
        LabeledImages {
            rows: 3,
            cols: 4,
            pixels,
            labels: vec![0, 1, 7],
        }
    }

    fn config() -> PipelineConfig {
        PipelineConfig {
            lux_mlux: vec![320, 2560],
            seed: 11,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn default_schedule_doubles() {
        let s = default_lux_schedule();
        assert_eq!(s.levels().len(), 10);
        assert_eq!((s.levels()[0], s.levels()[9]), (5, 2560));
        assert!(s.levels().windows(2).all(|w| w[1] == 2 * w[0]));
    }

    #[test]
    fn schedule_validation() {
        assert!(LuxSchedule::new(vec![]).is_err());
        assert!(LuxSchedule::new(vec![0, 5]).is_err());
        assert!(LuxSchedule::new(vec![10, 5]).is_err());
        assert!(LuxSchedule::new(vec![5, 5]).is_err());
    }

    #[test]
    fn config_toml_round_trip_and_defaults() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = PipelineConfig::from_toml("seed = 5\n[sensor]\nquantum_efficiency = 0.4\n").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.sensor.quantum_efficiency, 0.4);
        assert_eq!(partial.sensor.dead_time, 50e-9);
        assert_eq!(partial.exposure, 1e-3);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn large_seeds_survive_toml() {
        let cfg = PipelineConfig {
            seed: u64::MAX - 3,
            ..PipelineConfig::default()
        };
        let text = cfg.to_toml();
        assert!(text.contains("0xfffffffffffffffc"));
        assert_eq!(PipelineConfig::from_toml(&text).unwrap().seed, u64::MAX - 3);
        assert!(PipelineConfig::from_toml("seed = -1").is_err());
        assert_eq!(PipelineConfig::from_toml("seed = \"42\"").unwrap().seed, 42);
    }

    #[test]
    fn domains_differ_by_split_and_lux() {
        assert_ne!(seed_domain(Split::Train, 5), seed_domain(Split::Test, 5));
        assert_ne!(seed_domain(Split::Train, 5), seed_domain(Split::Train, 10));
    }

    #[test]
    fn generate_writes_files_and_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let ms = generate_dataset(&tiny_images(), Split::Test, &config(), &Selection::All, dir.path()).unwrap();
        assert_eq!(ms.len(), 2);
        for m in &ms {
            assert_eq!(m.samples.len(), 3);
            assert_eq!(m.labels(), vec![0, 1, 7]);
            let back = DatasetManifest::load(&manifest_path(dir.path(), Split::Test, m.lux_mlux)).unwrap();
            assert_eq!(&back, m);
            assert!(verify_manifest(dir.path(), m).is_ok());
            for s in &m.samples {
                let stream = read_sample(dir.path(), s).unwrap();
                assert_eq!(stream.event_count(), s.events);
                assert_eq!((stream.width, stream.height), (4, 3));
                assert_eq!(stream.metadata.image_index, s.index);
            }
        }
        assert_eq!(discover_manifests(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn selection_subsets() {
        let dir = tempfile::tempdir().unwrap();
        let ms = generate_dataset(&tiny_images(), Split::Train, &config(), &Selection::Indices(vec![2, 0, 2]), dir.path()).unwrap();
        let idx: Vec<u64> = ms[0].samples.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![0, 2]);
        let bad = generate_dataset(&tiny_images(), Split::Train, &config(), &Selection::Indices(vec![3]), dir.path());
        assert!(matches!(bad, Err(DatasetError::Config(_))));
        let ms = generate_dataset(&tiny_images(), Split::Train, &config(), &Selection::Limit(1), dir.path()).unwrap();
        assert_eq!(ms[0].samples.len(), 1);
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config();
        cfg.sensor.quantum_efficiency = 2.0;
        let err = generate_dataset(&tiny_images(), Split::Test, &cfg, &Selection::All, dir.path()).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Usage);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn failure_removes_earlier_manifests() {
        let dir = tempfile::tempdir().unwrap();
        // a regular file where the second level's directory must go
        fs::create_dir_all(dir.path().join("test")).unwrap();
        fs::write(dir.path().join("test").join("2560"), b"x").unwrap();
        let err = generate_dataset(&tiny_images(), Split::Test, &config(), &Selection::All, dir.path()).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Io);
        assert!(!manifest_path(dir.path(), Split::Test, 320).exists());
    }

    #[test]
    fn verify_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let ms = generate_dataset(&tiny_images(), Split::Test, &config(), &Selection::All, dir.path()).unwrap();
        let m = &ms[1];
        let first = dir.path().join(&m.samples[0].path);
        let mut bytes = fs::read(&first).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&first, bytes).unwrap();
        fs::remove_file(dir.path().join(&m.samples[1].path)).unwrap();
        let r = verify_manifest(dir.path(), m);
        assert_eq!((r.checked, r.mismatched.len(), r.missing.len()), (3, 1, 1));
    }

    #[test]
    fn reconstruct_requires_training_split() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_images(), Split::Test, &config(), &Selection::All, dir.path()).unwrap();
        let err = reconstruct_dataset(dir.path(), Estimator::Counts, 320, Some(3.0)).unwrap_err();
        assert!(matches!(err, DatasetError::MissingSplit { split: Split::Train, .. }));
        assert_eq!(err.kind(), ErrorKind::Usage);
    }

    #[test]
    fn reconstruct_writes_normalized_rasters() {
        let dir = tempfile::tempdir().unwrap();
        let images = tiny_images();
        generate_dataset(&images, Split::Train, &config(), &Selection::All, dir.path()).unwrap();
        generate_dataset(&images, Split::Test, &config(), &Selection::Limit(2), dir.path()).unwrap();
        let m = reconstruct_dataset(dir.path(), Estimator::Counts, 2560, Some(3.0)).unwrap();
        assert_eq!(m.splits.len(), 2);
        assert_eq!((m.rows, m.cols), (3, 4));
        let (count, rows, cols, values) = idx::read_images_f32(&dir.path().join(&m.splits[1].images)).unwrap();
        assert_eq!((count, rows, cols), (2, 3, 4));
        assert!(values.iter().all(|v| (0.0..=3.0).contains(v)));
        let labels = fs::read(dir.path().join(&m.splits[1].labels)).unwrap();
        assert_eq!(idx::parse_labels(Path::new("l"), &labels).unwrap(), vec![0, 1]);
        let back = ReconstructionManifest::load(&reconstruction_dir(dir.path(), Estimator::Counts, 2560).join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn all_dark_training_set_reports_undefined_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let images = LabeledImages {
            rows: 2,
            cols: 2,
            pixels: vec![0; 8],
            labels: vec![3, 4],
        };
        let mut cfg = config();
        cfg.sensor.dark_count_rate = 0.0;
        generate_dataset(&images, Split::Train, &cfg, &Selection::All, dir.path()).unwrap();
        let err = reconstruct_dataset(dir.path(), Estimator::InterPhoton, 320, Some(3.0)).unwrap_err();
        assert!(matches!(err, DatasetError::Reconstruct(ReconstructError::UndefinedNormalization)));
        assert_eq!(err.kind(), ErrorKind::Data);
        let path = reconstruction_dir(dir.path(), Estimator::InterPhoton, 320).join("train-images-idx3-float");
        let (_, _, _, values) = idx::read_images_f32(&path).unwrap();
        assert!(values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stats_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let ms = generate_dataset(&tiny_images(), Split::Test, &config(), &Selection::All, dir.path()).unwrap();
        let out = dir.path().join("stats");
        let stats = stats_command(dir.path(), &ms, &out, PeakRule::default()).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].histogram.total_pixels, 36);
        let total: u64 = ms[0].samples.iter().map(|s| s.events).sum();
        assert!((stats[0].mean_count - total as f64 / 36.0).abs() < 1e-12);
        assert!(out.join("hist-test-320mlux.tsv").is_file());
        assert!(out.join("hist-test-2560mlux.svg").is_file());
        let summary = fs::read_to_string(out.join("summary.tsv")).unwrap();
        assert_eq!(summary.lines().count(), 3);
    }
}
