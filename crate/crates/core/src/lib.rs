//! Head-wise attention weight sharing for transformer checkpoints.
//!
//! - [`store`]: the `HWS1` checkpoint container and per-head weight slices.
//! - [`similarity`]: cosine match functions over head weights and attention maps.
//! - [`sharing`]: DirectShare candidate matching, top-N selection and tying.
//! - [`engine`]: a small decoder-only transformer with forward and backward passes.
//! - [`postshare`]: training with the weight-similarity regularizer before tying.
//! - [`analysis`]: weight vs attention-map agreement and layer heatmaps.
//! - [`report`]: parameter accounting for a share plan.

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod postshare;
pub mod report;
pub mod sharing;
pub mod similarity;
pub mod store;
pub mod toy;

pub use config::ModelConfig;
pub use engine::{ForwardTrace, TokenSequence};
pub use error::{Error, Result};
pub use sharing::{CandidateBuffer, SharePlan};
pub use similarity::{MatchFunction, MatchScore};
pub use store::{HeadRef, HeadSlices, TensorStore};
