//! Attention alignment analysis, alignment losses, guidance, interaction
//! metrics and data curation on a small deterministic video DiT.

pub mod align_losses;
pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod curation;
pub mod dit;
pub mod error;
pub mod grounding;
pub mod guidance;
pub mod intergeneval;
pub mod layer_select;
pub mod mask_tracks;
pub mod propagation;
pub mod synthetic_data;

pub use config::{ModelConfig, SequenceLayout};
pub use error::{LabError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(test)]
mod test_support;
