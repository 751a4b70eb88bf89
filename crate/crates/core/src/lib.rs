//! Recurrent action-anticipation models on a small reverse-mode autodiff tape.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation:
//! tensors and their gradient tape, the higher-order recurrent space-time
//! attention cell ([`horst`]), the message-passing cell with learned edges
//! ([`mpnnel`]), the assembled anticipation network ([`model`]), the phased
//! training loop ([`trainer`]), the synthetic dataset generator ([`datagen`])
//! and the evaluation / late-fusion toolkit ([`evalkit`]).
//!
//! File formats, disk layout and the command-line front end live in the
//! companion `anticipation` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod horst;
pub mod model;
pub mod mpnnel;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
