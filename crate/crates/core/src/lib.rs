pub mod autograd;
pub mod error;
pub mod gaze;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod labels;
pub mod loss;
pub mod matching;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod rectification;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
