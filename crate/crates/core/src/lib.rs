//! One-shot image pair identification.
//!
//! Three approaches share one reverse-mode autodiff core: a CNN over merged
//! (channel-stacked or spatially joined) image pairs, a siamese CNN trained
//! with contrastive loss, and a siamese capsule network with dynamic routing
//! and a reconstruction decoder.

pub mod augment;
pub mod capsules;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod losses;
pub mod model;
pub mod pairing;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ParamId, Tape, Tensor, Var};
