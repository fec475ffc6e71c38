pub mod checkpoint;
pub mod error;
pub mod evaluator;
pub mod formats;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod photometry;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
