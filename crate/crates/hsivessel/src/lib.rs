//! Cross-domain vessel segmentation for hyperspectral images.
//!
//! The crate covers the full pipeline:
//!
//! - **data**: hyperspectral cubes, reduced images, masks, file formats, and
//!   synthetic phantoms for desk-scale experiments;
//! - **reduce**: static spectral reduction by median windowing;
//! - **autodiff / nn / models**: a small reverse-mode tape, the layers built
//!   on it, and the segmentation, discriminator, and generator networks;
//! - **losses / metrics**: segmentation and adversarial losses (Dice,
//!   centerline Dice, domain and per-class cross-entropies, cycle L1) and the
//!   evaluation metrics with report aggregation;
//! - **train**: source pretraining, gradient-reversal adaptation, per-class
//!   adversarial adaptation, and cycle-consistent learned reduction;
//! - **harness**: random hyperparameter search with cross-testing and
//!   table-style reporting;
//! - **cli**: the `hsivessel` binary's subcommands.
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod reduce;
pub mod train;

pub use error::{Error, Result};
