//! Invariant representation learning with the Nadaraya-Watson head.
//!
//! A prediction is a softmax-weighted vote over the labels of a support set,
//! with weights given by negative Euclidean distance in a learned feature
//! space. Which examples enter the support (class-balanced, restricted to
//! one environment, or both) decides which dependencies the feature
//! extractor can exploit.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod featnet;
pub mod harness;
pub mod infer;
pub mod metrics;
pub mod numcore;
pub mod nwhead;
pub mod scmgen;
pub mod support;
pub mod trainer;

pub use error::{Error, Result};
