//! Summary-vector routed multilingual speech recognition on a synthetic corpus.
//!
//! Everything here is `no_std` with `alloc`; file formats, threads and the
//! command line live in the companion binary crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod routing;
pub mod seq2seq;
pub mod trainer;

pub use error::{Error, Result};
