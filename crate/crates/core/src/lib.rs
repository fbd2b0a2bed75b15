//! Visual explanations for Vision Transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small dense tensor type with forward operations and their
//!   vector-Jacobian products.
//! - [`autodiff`]: a reverse-mode tape over those operations.
//! - [`vit`]: a pre-norm ViT (ViT-B/16 compatible) that records its attention
//!   matrices during the forward pass and back-propagates a class logit onto
//!   them, plus the VTW weight format and image preprocessing.
//! - [`saliency`]: last-layer `[cls]` attention, GradCAM on the final block and
//!   gradient-weighted relevance propagation.
//! - [`eval`]: pointing game, top-k percentile boxes, IoU and aggregation.
// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod resample;
pub mod saliency;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
