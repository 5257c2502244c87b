//! Spiking neural networks built on the Spike Response Model, trained with a
//! surrogate gradient, with normalization of the postsynaptic potential.

pub mod arch;
pub mod audit;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod norm;
pub mod srm;
pub mod surrogate;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
