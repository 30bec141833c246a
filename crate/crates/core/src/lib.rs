//! Coupled high/low-resolution dictionary learning with a truncated
//! beta-Bernoulli factor model, and example-based super-resolution on top of it.
//!
//! Training runs on coupled patches (an interpolated-LR patch stacked over
//! the co-located HR patch) with one of three engines: [`gibbs`],
//! [`vb`] (batch coordinate ascent) or [`online`] (stochastic natural
//! gradient). [`sr`] transfers sparse codes inferred from LR patches onto the
//! HR half of the dictionary. [`eval`] scores results with PSNR against
//! interpolation baselines.

pub mod error;
pub mod eval;
pub mod gibbs;
pub mod image;
pub mod model;
pub mod model_file;
pub mod online;
pub mod patches;
pub mod resample;
pub mod rng;
pub mod sr;
pub mod synthetic;
pub mod vb;

pub use error::{Error, Result};
pub use image::{load_image, save_image, ImagePlane, YCbCrImage};
pub use model::{
    compute_elbo, CoupledDictionary, GlobalVariationalState, Hyperparameters, LocalState, PosteriorEstimate,
};
pub use model_file::{load_model, save_model};
pub use patches::PatchMatrix;
