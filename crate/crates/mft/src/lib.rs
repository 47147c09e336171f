pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod rng;
pub mod synth;
pub mod testing;
pub mod train;

pub use error::{MftError, Result};
