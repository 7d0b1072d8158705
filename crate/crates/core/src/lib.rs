//! Synthesis of multi-turn, interleaved image-text instruction conversations
//! from plain image-caption corpora.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`corpus`]: ingest caption pairs, attach embeddings, score and clean them.
//! - [`clustering`]: k-means topic clusters, outlier pruning, image-group sampling.
//! - [`promptkit`]: image tags, in-context example selection, prompt rendering.
//! - [`gateway`]: chat-completion backends (HTTP and a deterministic mock).
//! - [`convparse`]: transcript parsing into structured conversations.
//! - [`postproc`]: rule-based quality filters with auditable verdicts.
//! - [`seedset`]: the human-in-the-loop seed set and its event log.
//! - [`stats`]: dataset statistics, diversity, annotation distributions.
//! - [`workspace`] and [`pipeline`]: the on-disk workspace and stage runners.

pub mod clustering;
pub mod config;
pub mod convparse;
pub mod corpus;
pub mod gateway;
pub mod pipeline;
pub mod postproc;
pub mod promptkit;
pub mod rng;
pub mod seedset;
pub mod stats;
pub mod workspace;

pub use config::PipelineConfig;
pub use convparse::{Conversation, Segment, Turn};
pub use corpus::{CaptionedImage, ImageId};
