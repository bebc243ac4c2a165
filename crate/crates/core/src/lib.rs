//! Teacher/student contrastive alignment of text and audio embeddings with
//! unsupervised pair curation, on synthetic two-modality corpora.
//!
//! The pipeline: train a dual-encoder teacher with the symmetric contrastive
//! loss, use it to curate an Improvement-Set of new (audio, caption) pairs,
//! then warm-start a student on that set with soft targets taken from the
//! teacher's intra-modal similarities. Models are scored by prompted
//! zero-shot classification.

pub mod batching;
pub mod corpus;
pub mod curation;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod jsonl;
pub mod loss;
pub mod optim;
pub mod trainer;
pub mod zero_shot;

pub use error::{Error, Result};
