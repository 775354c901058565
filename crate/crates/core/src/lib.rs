//! Multimodal pretraining framework at desk scale.
//!
//! Single-modality toy encoders feed a merge- or co-attention fusion network,
//! trained with masked unit modeling and pairwise cross-modality contrastive
//! objectives on synthetic aligned data.

pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod masking;
pub mod model;
pub mod nn;
pub mod numkit;
pub mod objectives;
pub mod synthdata;
pub mod vq;

pub use error::{Error, Result};
pub mod trainer;
