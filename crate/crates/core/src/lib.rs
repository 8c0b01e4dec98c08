//! Desk-scale 3D visual grounding.
//!
//! Instance and word tokens are fused by stacked blocks of spherically masked
//! instance self-attention and bidirectional cross-attention. Training combines
//! a selection loss with per-block offset regression and a word-level span
//! loss. A procedural scene and referral generator supplies exact supervision.

pub mod error;
pub mod datagen;
pub mod tensor;
pub mod nn;
pub mod encoders;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod gradcheck;
pub mod checkpoint;
pub mod harness;

pub use error::{Error, Result};
pub use tensor::{GradBuffer, Graph, ParamId, ParamStore, Tensor, Var};
pub use datagen::{Corpus, GenConfig, Referral, Scene, Vocabulary};
pub use fusion::{RadiusSchedule, ScheduleOrder};
pub use harness::{AblationMode, AblationTable, EvalReport, LogEntry, RunConfig};
pub use losses::{LossReport, LossWeights};
pub use model::{Architecture, Model};
