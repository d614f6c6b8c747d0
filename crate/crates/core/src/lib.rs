//! Structural concept graphs and gradient-attributed "why / why not"
//! explanations for image classifiers.
//!
//! The pipeline: a synthetic parts world trains a small CNN teacher
//! ([`world`]); class concepts are discovered from attention-masked patches
//! ([`concepts`]); each image becomes one concept graph per class
//! ([`scg`]); a graph network is distilled to mimic the teacher ([`grn`]);
//! its logits are decomposed into node and edge contributions ([`vdi`]).
//! [`harness`] wires the stages together and runs the experiments.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod world;
pub mod concepts;
pub mod scg;
pub mod grn;
pub mod vdi;
pub mod harness;

pub use autodiff::{BatchNormState, Tape, Var};
pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
