//! Batch evaluation, single-image dumps and test fixtures for ViT saliency
//! maps. The numerical work lives in `attnmap-core`; this crate handles
//! files, configuration and reporting.

pub mod annotations;
pub mod config;
pub mod fixtures;
pub mod imageio;
pub mod pipeline;
pub mod report;
pub mod tools;
