pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
