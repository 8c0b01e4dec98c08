//! Procedural scenes and template referrals with exact targets and spans.

pub mod corpus;
pub mod io;
pub mod referral;
pub mod rng;
pub mod scene;
pub mod vocab;

pub use corpus::{generate_corpus, Corpus};
pub use referral::{
    augment_text, generate_referral, resolve, split_labels, AugmentConfig, Referral, TemplateKind,
};
pub use scene::{generate_scene, Difficulty, GenConfig, Scene};
pub use vocab::Vocabulary;
