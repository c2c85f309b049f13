pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod pairing;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
