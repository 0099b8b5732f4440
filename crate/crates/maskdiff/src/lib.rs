//! Latent-diffusion tamper-mask localization.
//!
//! The pipeline: a distilled lightweight codec compresses binary tamper
//! masks and their boundary maps into a 1/8-resolution latent; a condition
//! encoder extracts artifact features from the RGB image once; a small UNet
//! is trained to predict the clean stacked latent from an error-prior
//! perturbed noisy latent; inference runs a deterministic respaced DDIM
//! chain N times, averages the final latents, and decodes the mask half.
//! Synthetic tampered data, fixed-threshold pixel-F1 scoring, robustness
//! sweeps, and an ensemble-stability study round out the harness.

pub mod baseline;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod edges;
mod error;
pub mod eval;
pub mod image;
pub mod latent;
pub mod params;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use image::{ColorImage, EdgeMap, MaskImage};
pub use latent::LatentGrid;
pub use schedule::{ErrorPriorConfig, NoiseSchedule};
