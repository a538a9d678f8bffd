//! A small Vision Transformer whose attention adds the output of its
//! highest-norm head back onto the concatenated heads, built on a
//! from-scratch reverse-mode autodiff tape.
//!
//! The modules layer bottom-up: [`tensor`] (dense row-major arrays),
//! [`autodiff`] (tape and parameters), [`attention`], [`vit`], [`train`],
//! [`data`], [`bench`] and the command layer in [`run`].

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod run;
pub mod tensor;
pub mod train;
pub mod vit;

pub use attention::{AttentionTrace, AttentionVariant, NormPolicy};
pub use autodiff::{ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use vit::{ModelState, ViTConfig};
