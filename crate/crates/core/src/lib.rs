//! Snippet similarity-weighted masked reconstruction for battery capacity
//! estimation from EV charging snippets.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and
//! anything else touching the operating system live in the `evcap` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod array;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
mod lstm;
pub mod masking;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod pretrain;
pub mod real;
pub mod rng;
pub mod synthgen;
pub mod tape;

pub use array::{matmul, Array, DenseArray};
pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, PointwiseKind, Tape, Var};
