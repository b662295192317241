//! Calibrated adversarial stain augmentation for H&E-like images.
//!
//! The crate is organized bottom-up:
//!
//! * [`image`] and [`stain`]: Beer-Lambert conversions, Macenko stain
//!   estimation, concentration unmixing and reconstruction.
//! * [`calibration`]: per-image stain statistics and DKW-corrected quantile
//!   budgets.
//! * [`perturbation`]: feasible stain perturbations and their projections.
//! * [`adversary`]: projected gradient ascent over stain perturbations.
//! * [`model`]: a small hand-differentiated classifier.
//! * [`trainer`]: min-max training, baselines and group evaluation.
//! * [`synth`]: seeded multi-center synthetic datasets.

// `!(x > 0.0)` also rejects NaN, and index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adversary;
pub mod calibration;
pub mod error;
pub mod image;
pub mod linalg;
pub mod model;
pub mod perturbation;
pub mod rng;
pub mod stain;
pub mod synth;
pub mod trainer;

pub use error::{CasaError, Result};
pub use image::{od_to_rgb, rgb_to_od, OdImage, RgbImage};
pub use stain::{macenko_decompose, reconstruct, solve_concentrations, ConcentrationMap, MacenkoParams, StainMatrix};
