pub mod anscombe;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod stream;
pub mod synth;
pub mod tracking;
pub mod tree;

pub use error::{Result, ThinError};
