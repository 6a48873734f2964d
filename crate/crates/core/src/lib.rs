//! Spiking Mamba2 language models: integer-spiking neurons, an event-driven
//! projection kernel, a Mamba2 block with dense and spiking modes, an analytic
//! energy model and distillation / preference training on CPU.

pub mod corpus;
pub mod energy;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mamba2;
pub mod neurons;
pub mod numerics;
pub mod spike_kernel;
pub mod tokenizer;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
