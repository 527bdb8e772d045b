//! Open-set RF emitter recognition.
//!
//! The pipeline turns complex baseband recordings into normalized spectrograms,
//! learns a multi-domain embedding with a supervised contrastive objective,
//! mines GAN samples the closed-set classifier gets wrong as a simulated
//! unknown class, and calibrates an OpenMax layer on extreme-value fits of
//! activation-vector distances.

pub mod autograd;
pub mod embednet;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod openmax;
pub mod params;
pub mod preprocess;
pub mod seed;
pub mod simunknown;
pub mod supcon;
pub mod synth;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
