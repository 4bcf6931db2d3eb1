//! Time-resolved SPAD sensor simulation for MNIST-style image datasets.
//!
//! The pipeline maps grayscale images to photon flux ([`radiometry`]),
//! simulates per-pixel detection timestamps ([`pixel_sim`]), stores them as
//! address-event streams ([`aer`]), reconstructs intensity images
//! ([`reconstruct`]) and summarizes photon-count statistics ([`stats`]).
//! [`dataset`] drives the whole pipeline over IDX inputs.

pub mod aer;
pub mod dataset;
pub mod error;
pub mod idx;
pub mod pixel_sim;
pub mod radiometry;
pub mod reconstruct;
pub mod rng;
pub mod stats;

pub use aer::{AerError, Event, EventStream, StreamMetadata};
pub use error::ConfigError;
pub use pixel_sim::{simulate_array, simulate_pixel, PixelModel, PixelTrace};
pub use radiometry::{FluxMap, ReferenceImage, SceneConfig, SpadConfig};
pub use reconstruct::{Estimator, FluxEstimate};
pub use rng::{RngSeedPolicy, Stage};
