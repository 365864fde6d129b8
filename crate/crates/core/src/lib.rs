pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod nn;
pub mod params;
pub mod sgp;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
