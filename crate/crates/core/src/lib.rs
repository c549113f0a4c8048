//! Certified training with small adversarial bounding regions.
//!
//! The crate bundles a small autodiff tensor engine, sequential networks
//! with a checkpoint format, the Box (interval) domain with differentiable
//! transformers, a DeepPoly-style verifier, PGD attacks, the region
//! selection and robust-loss training loop, growth-rate analysis tools and
//! the experiment harness behind the `sabr` CLI.

pub mod attack;
pub mod bench;
pub mod boxdom;
pub mod deeppoly;
pub mod error;
pub mod fixtures;
pub mod network;
pub mod optim;
pub mod sabr;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
