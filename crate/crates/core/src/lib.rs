//! Quiz-based ranking of reference images for subject LoRA fine-tuning.
//!
//! A vision-language model answers multiple-choice questions about each
//! candidate image; the best-scoring images are selected for training, and
//! generated samples are scored the same way.

pub mod corpus;
pub mod digest;
pub mod generate;
pub mod pipeline;
pub mod provider;
pub mod quiz;
pub mod retry;
pub mod rng;
pub mod scorer;
pub mod selector;
pub mod stats;
pub mod train;
pub mod util;
