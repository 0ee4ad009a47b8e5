//! Anatomy-aware agent engine for 3D chest CT question answering and report
//! generation.
//!
//! The engine routes each request through a planner (task type, anatomical
//! region, query normalization), compresses the study's visual tokens,
//! activates the region's low-rank adapter, and for reports retrieves similar
//! historical cases to use as few-shot examples. Model backends sit behind
//! [`backend::LlmClient`] and [`backend::EmbeddingClient`]; deterministic
//! mocks make the whole pipeline runnable offline.

pub mod adapters;
pub mod backend;
pub mod compression;
pub mod container;
pub mod evaluation;
pub mod feature_io;
pub mod memory;
pub mod orchestration;
pub mod planner;
pub mod region;
pub mod rng;
pub mod templates;
pub mod text;

pub use region::{canonicalize_region, RegionId};
