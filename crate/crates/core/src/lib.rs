//! Generative-model anomaly detection on synthetic brain phantoms.
//!
//! The crate covers the full desk-scale pipeline: deterministic phantom
//! cohorts with ground-truth labels ([`phantom`]), the image-processing and
//! metric kernel ([`imageproc`]), three generative models trained from
//! scratch on phantom slices ([`vqvae`], [`rae`], [`ddim`]), anomaly-map
//! construction and region scoring ([`anomaly`]), and label-map volumetry
//! ([`volumetry`]). Everything is seeded and bit-reproducible; the [`nn`]
//! module is a small f64 tape autodiff used by the three model families.

pub mod anomaly;
pub mod dataset;
pub mod ddim;
pub mod error;
pub mod imageproc;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod rae;
pub mod rng;
pub mod volumetry;
pub mod vqvae;

pub use error::{Error, Result};
