//! Image-to-flux conversion.
//!
//! A grayscale reference image is scaled so that a value of `1.0` corresponds
//! to the scene's reference illuminance. Illuminance is converted to optical
//! power on the pixel assuming monochromatic 555 nm light, and power to an
//! expected photon rate through the photon energy `h·c/λ`.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Planck constant, J·s (CODATA 2018, exact).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
/// Luminous efficacy of monochromatic 555 nm radiation, lm/W.
pub const LUMINOUS_EFFICACY: f64 = 683.0;

/// Luminance weights applied to linear RGB channels.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// SPAD pixel parameters. All quantities in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpadConfig {
    /// Probability that a photon hitting the active area is detected.
    pub quantum_efficiency: f64,
    /// Dead time after each avalanche, seconds.
    pub dead_time: f64,
    /// Probability that a detection spawns an afterpulse.
    pub afterpulse_prob: f64,
    /// Standard deviation of the Gaussian timing jitter, seconds.
    pub jitter_sigma: f64,
    /// Dark count rate, events per second.
    pub dark_count_rate: f64,
    /// Pixel pitch, meters.
    pub pixel_pitch: f64,
    /// Fraction of the pixel area that is photosensitive.
    pub fill_factor: f64,
    /// Illumination wavelength, meters.
    pub wavelength: f64,
}

impl Default for SpadConfig {
    /// The sensor used for TR-MNIST.
    fn default() -> Self {
        Self {
            quantum_efficiency: 0.5,
            dead_time: 50e-9,
            afterpulse_prob: 0.005,
            jitter_sigma: 200e-12,
            dark_count_rate: 100.0,
            pixel_pitch: 5e-6,
            fill_factor: 1.0,
            wavelength: 555e-9,
        }
    }
}

impl SpadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let in_open_closed = |v: f64| v > 0.0 && v <= 1.0;
        if !in_open_closed(self.quantum_efficiency) {
            return Err(ConfigError::out_of_range("quantum_efficiency", self.quantum_efficiency, "(0, 1]"));
        }
        if !in_open_closed(self.fill_factor) {
            return Err(ConfigError::out_of_range("fill_factor", self.fill_factor, "(0, 1]"));
        }
        if !(0.0..1.0).contains(&self.afterpulse_prob) {
            return Err(ConfigError::out_of_range("afterpulse_prob", self.afterpulse_prob, "[0, 1)"));
        }
        // dead time is handled in integer picoseconds downstream
        if !(self.dead_time.is_finite() && self.dead_time >= 1e-12) {
            return Err(ConfigError::out_of_range("dead_time", self.dead_time, ">= 1 ps"));
        }
        if !(self.dark_count_rate.is_finite() && self.dark_count_rate >= 0.0) {
            return Err(ConfigError::out_of_range("dark_count_rate", self.dark_count_rate, ">= 0"));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(ConfigError::out_of_range("jitter_sigma", self.jitter_sigma, ">= 0"));
        }
        if !(self.wavelength.is_finite() && self.wavelength > 0.0) {
            return Err(ConfigError::out_of_range("wavelength", self.wavelength, "> 0"));
        }
        let area = self.pixel_area();
        if !(area.is_finite() && area > 0.0) {
            return Err(ConfigError::out_of_range("pixel_pitch", self.pixel_pitch, "pitch² × fill factor > 0"));
        }
        Ok(())
    }

    /// Photosensitive area `pitch² × fill_factor`, m².
    pub fn pixel_area(&self) -> f64 {
        self.pixel_pitch * self.pixel_pitch * self.fill_factor
    }

    /// Energy of one photon at the configured wavelength, J.
    pub fn photon_energy(&self) -> f64 {
        PLANCK * SPEED_OF_LIGHT / self.wavelength
    }

    /// Photon rate on one pixel per lux of illuminance, photons/s/lx.
    pub fn flux_per_lux(&self) -> f64 {
        self.pixel_area() / LUMINOUS_EFFICACY / self.photon_energy()
    }
}

/// Scene illumination and exposure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Illuminance (lux) that a white image pixel maps to.
    pub reference_lux: f64,
    /// Exposure time `T`, seconds.
    pub exposure: f64,
}

impl SceneConfig {
    pub fn new(reference_lux: f64, exposure: f64) -> Result<Self, ConfigError> {
        let scene = Self { reference_lux, exposure };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.reference_lux.is_finite() && self.reference_lux > 0.0) {
            return Err(ConfigError::out_of_range("reference_lux", self.reference_lux, "> 0"));
        }
        if !(self.exposure.is_finite() && self.exposure >= 1e-12) {
            return Err(ConfigError::out_of_range("exposure", self.exposure, ">= 1 ps"));
        }
        Ok(())
    }
}

/// Normalized grayscale image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ReferenceImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, ConfigError> {
        check_dims(width, height, values.len())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ConfigError::out_of_range("pixel value", *v, "[0, 1]"));
        }
        Ok(Self { width, height, values })
    }

    /// 8-bit image normalized by 255.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ConfigError> {
        check_dims(width, height, bytes.len())?;
        Ok(Self {
            width,
            height,
            values: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Linear RGB image, row-major, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self, ConfigError> {
        check_dims(width, height, pixels.len())?;
        if let Some(v) = pixels.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ConfigError::out_of_range("channel value", *v, "[0, 1]"));
        }
        Ok(Self { width, height, pixels })
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), ConfigError> {
    if width == 0 || height == 0 {
        return Err(ConfigError::Invalid(format!("image dimensions {width}x{height} must be at least 1x1")));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(ConfigError::Invalid(format!(
            "image buffer holds {len} values, expected {width}x{height}"
        )));
    }
    Ok(())
}

pub fn rgb_to_grayscale(image: &RgbImage) -> ReferenceImage {
    let values = image
        .pixels
        .iter()
        .map(|px| {
            let y: f64 = px.iter().zip(LUMA_WEIGHTS).map(|(c, w)| c * w).sum();
            // weights sum to 1 up to rounding
            y.clamp(0.0, 1.0)
        })
        .collect();
    ReferenceImage {
        width: image.width,
        height: image.height,
        values,
    }
}

/// Per-pixel illuminance in lux.
#[derive(Debug, Clone, PartialEq)]
pub struct LuxMap {
    pub width: usize,
    pub height: usize,
    pub lux: Vec<f64>,
}

/// Per-pixel expected photon rate in photons/s.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxMap {
    pub width: usize,
    pub height: usize,
    pub flux: Vec<f64>,
}

impl FluxMap {
    pub fn uniform(width: usize, height: usize, flux: f64) -> Self {
        Self {
            width,
            height,
            flux: vec![flux; width * height],
        }
    }
}

/// Scales the image so that 1.0 maps to the reference illuminance. No
/// per-image renormalization is applied.
pub fn image_to_lux(image: &ReferenceImage, scene: &SceneConfig) -> LuxMap {
    LuxMap {
        width: image.width,
        height: image.height,
        lux: image.values.iter().map(|v| v * scene.reference_lux).collect(),
    }
}

pub fn lux_to_flux(lux_map: &LuxMap, config: &SpadConfig) -> FluxMap {
    let area = config.pixel_area();
    let photon_energy = config.photon_energy();
    let flux = lux_map
        .lux
        .iter()
        .map(|&lux| {
            let power = area / LUMINOUS_EFFICACY * lux;
            power / photon_energy
        })
        .collect();
    FluxMap {
        width: lux_map.width,
        height: lux_map.height,
        flux,
    }
}

/// `image_to_lux` followed by `lux_to_flux`.
pub fn image_to_flux(image: &ReferenceImage, scene: &SceneConfig, config: &SpadConfig) -> FluxMap {
    lux_to_flux(&image_to_lux(image, scene), config)
}
