//! Few-shot adaptation of a frozen pre-trained classifier.
//!
//! The frozen backbone is represented by precomputed per-image feature
//! tensors. Its classifier head, applied densely, yields per-location
//! certainty weights that replace global average pooling with a weighted
//! pooling; a light linear adapter is then fine-tuned on few base-class
//! examples and, optionally, on the support set of each novel task.

pub mod attention;
pub mod classify;
pub mod data_io;
pub mod episodes;
pub mod error;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
