//! Conditional DCGAN for 32×32 grayscale images, built on a small
//! reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f32 tensors and the tape that differentiates them
//! - [`gradcheck`]: finite-difference verification of every op and of the
//!   full generator/discriminator composite
//! - [`nets`]: class labels, the conditional generator and discriminator
//! - [`optim`]: Adam
//! - [`data`]: PGM I/O, manifests, normalization, augmentation, batching
//! - [`phantom`]: seeded class-conditional synthetic dataset
//! - [`train`]: adversarial loop, evaluation grids, checkpoints
//! - [`eval`]: checkerboard energy, class darkness, nearest-centroid fidelity
//! - [`cli`]: the `pgan` command line

pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod nets;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use nets::{Discriminator, Generator, GleasonLabel};
pub use tensor::{Tape, Tensor, Var};
