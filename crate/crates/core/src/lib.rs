//! Bottom-up pattern matching for image-to-GPS verification: decide whether a
//! perspective query photo was taken at the location of a reference panorama, and
//! localize the query's content inside the panorama.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gps;
pub mod gradcheck;
pub mod image;
pub mod localize;
pub mod manifest;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
