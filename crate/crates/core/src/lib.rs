pub mod audio;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod real;
pub mod stream;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
