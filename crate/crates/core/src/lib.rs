//! Pixel-wise contrastive distillation, from the tensor engine up.
//!
//! `no_std` + `alloc`. File formats, configuration parsing and the command
//! line live in the companion `pcd` crate.

#![no_std]

extern crate alloc;

pub mod adaptor;
pub mod autodiff;
pub mod distill;
pub mod erf;
pub mod error;
pub mod layers;
pub mod model;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Init, Tensor};
