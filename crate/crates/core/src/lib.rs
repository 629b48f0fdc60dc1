//! Question-conditioned prototype matching for multiple-choice visual
//! question answering.
//!
//! Image patch features are compared against prototypes built from the
//! question, matched greedily under a spatial radius, fused with candidate
//! answers and scored. Matched patches double as the explanation and are
//! evaluated against ground-truth evidence boxes.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod explain;
pub mod features;
pub mod geometry;
pub mod instance;
pub mod matching;
pub mod model;
pub mod projection;
pub mod prototypes;
pub mod synth;
pub mod train;
pub mod vlas;

pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use features::{EnhancedFeatures, FeatureMap, QAExample, TokenEmbeddings};
pub use geometry::{BBox, GridSpec, PatchIndex};
pub use matching::{MatchResult, Selection};
pub use model::{AnswerInput, ModelConfig, ModelParams, Pathway};
pub use train::{EpochLog, TrainConfig};
pub use vlas::{AlignmentRecord, VlasReport};
