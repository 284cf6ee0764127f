//! Contrastive crop-to-grid pretraining for unsupervised object localization.
//!
//! A crop encoder embeds a random square crop; a pyramid encoder embeds every
//! cell of a 5-level feature pyramid over the full image. Training pulls the
//! crop embedding toward the cell nearest the crop center and pushes it away
//! from other images and from randomly chosen cells of the same image. The
//! evaluation kit measures how often the most similar cell lands inside the
//! crop, relative to a random-cell baseline.

pub mod cropper;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod loss;
pub mod oracle;
pub mod pairing;
pub mod seeding;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
