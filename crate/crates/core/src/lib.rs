//! Core of a small laboratory for studying how syntactic attention structure
//! emerges while training a masked language model.
//!
//! Everything here is pure computation over `alloc` collections: tensors and
//! reverse-mode gradients, a synthetic dependency grammar, the encoder, the
//! attention-head parse probe, the syntactic regularizer, breakthrough
//! detection and the complexity/similarity metrics. File formats, the
//! training harness and the CLI live in the `saslab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod complexity;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod regularizer;
pub mod rng;

pub use error::{Error, Result};
