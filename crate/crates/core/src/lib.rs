//! Prototype-driven multi-feature embedding alignment for two-modality
//! (visible / infrared) retrieval.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndnum`]: tensors and reverse-mode differentiation.
//! * [`mfgm`]: dilated-convolution branches with channel/spatial attention
//!   that generate extra embeddings from a feature map.
//! * [`plm`]: learnable prototypes that pool pixel features into local
//!   descriptors.
//! * [`losses`]: identity, triplet, cosine heterogeneity, dual-center
//!   separation and center-guided pair mining objectives.
//! * [`synthdata`]: seeded two-modality data and an identity-balanced sampler.
//! * [`trainer`]: the full model, SGD with momentum and the step schedule.
//! * [`evalkit`]: CMC / mAP retrieval metrics and distance-gap statistics.
//! * [`gradsuite`]: finite-difference checks for every differentiable piece.
//!
//! All randomness flows through [`rng::stream`].

pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod losses;
pub mod mfgm;
pub mod ndnum;
pub mod plm;
pub mod rng;
pub mod synthdata;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{PdmError, Result};
