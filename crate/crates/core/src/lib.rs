//! Few-shot two-stage detection on a dependency-light, `no_std` core.
//!
//! The crate hosts a small reverse-mode autograd engine ([`autograd`]), the
//! two feature-refinement mechanisms built on it ([`drd`] for pixel-wise
//! query/support cross-attention and [`cfa`] for multi-resolution RoI
//! pooling with learned fusion), a toy two-stage [`detector`], a procedural
//! shapes benchmark with episodic sampling ([`episodes`]), a VOC-style AP
//! scorer ([`metrics`]) and the training schedule ([`train`]).
//!
//! Everything here is pure computation over `alloc` collections. File
//! formats, the CLI and wall-clock timing live in the `fsdet` crate.

#![no_std]
#![deny(unused_must_use)]

extern crate alloc;

#[cfg(any(feature = "std", test))]
extern crate std;

pub mod autograd;
pub mod boxes;
pub mod cfa;
pub mod detector;
pub mod drd;
pub mod episodes;
mod error;
pub mod gradcheck;
pub mod metrics;
mod scalar;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
