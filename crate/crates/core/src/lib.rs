pub mod autograd;
pub mod codec;
pub mod coder;
pub mod dwt;
pub mod error;
pub mod eval;
pub mod image;
pub mod nets;
pub mod pipeline;
pub mod quant;
pub mod rate;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
