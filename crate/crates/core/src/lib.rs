//! Aspect-based few-shot learning.
//!
//! Datasets of images annotated with categorical property vectors, episode
//! sampling with an exact aspect oracle, a deep-set traversal model that learns
//! which properties a support set has in common, and tuplet-loss training and
//! evaluation on top of a small autodiff engine.

pub mod checkpoint;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod properties;
pub mod shapegen;
pub mod sprites;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use properties::{
    aspect_oracle, shared_pairs, validate_episode_semantics, AspectMatch, EpisodeDiagnostics, Pair,
    PropertyDef, PropertySchema, PropertyVector,
};
