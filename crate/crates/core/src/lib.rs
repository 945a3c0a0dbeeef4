//! Metric-learning re-identification of individuals from flank images.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datagen;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod image;
pub mod io;
pub mod metricnet;
pub mod novelty;
pub mod pipeline;
pub mod retrieval;

pub use error::{ReidError, Result};
