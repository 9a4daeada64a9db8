//! Rotation-equivariant convolution and rotated-RoI warping kernels, with a
//! verification harness, reverse-mode autodiff, and a toy training pipeline
//! on synthetic oriented-shape scenes.
//!
//! The crate is built around *regular feature fields* of the cyclic group
//! `C_N`: tensors of shape `(K, N, H, W)` whose `N` orientation channels
//! permute cyclically while the spatial grid rotates when the underlying
//! image is rotated by a multiple of `2π/N`. On top of those fields it
//! provides:
//!
//! - lifting and group convolutions with rotation weight sharing
//!   ([`layers`]), plus norm/nonlinearity/pooling layers and a miniature
//!   residual backbone with a feature-pyramid merge;
//! - rotated-RoI feature extraction with spatial and orientation alignment
//!   ([`roi`]);
//! - a tape-based reverse-mode autodiff covering every forward operation
//!   ([`autodiff`]), an SGD optimizer and finite-difference gradient checks;
//! - a measurement harness that turns the equivariance and invariance
//!   contracts into numbers ([`verify`]);
//! - a deterministic synthetic scene generator with oriented-box
//!   annotations ([`synth`]) and a toy classifier trainer ([`train`]).
//!
//! The `regconv` binary exposes the whole thing on the command line; see the
//! [`cli`] module.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod group;
pub mod layers;
pub mod rng;
pub mod roi;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use group::{CyclicGroup, RRoI, RegularField};
pub use scalar::Scalar;
pub use tensor::{PlanarTensor, Tensor4};

/// Library version embedded in reports and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
