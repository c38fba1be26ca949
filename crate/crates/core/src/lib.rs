//! Video fitting of a 3D morphable face model, pseudo-ground-truth
//! expression annotation, single-frame expression regression and
//! expression-based emotion classification.

pub mod annotation;
pub mod camera;
pub mod classifier;
pub mod config;
pub mod container;
pub mod error;
pub mod fitter;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod regressor;
pub mod sequence;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
