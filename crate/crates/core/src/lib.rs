//! Continual dual-encoder contrastive training with screened
//! contrastive-matrix distillation, baselines, and representation-space
//! diagnostics on synthetic domain-shifted data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod datastream;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod numeric;
pub mod optimizer;
pub mod report;

pub use error::{Error, Result};
