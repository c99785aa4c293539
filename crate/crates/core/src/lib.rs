//! Spatial-temporal transformer for dynamic scene graph generation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod graphgen;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod par;
pub mod train;
pub mod transformer;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
