//! Dynamic nested hierarchies: a chain of linear memory levels whose depth,
//! update frequencies and optimizer coefficients evolve online, plus the
//! streams, metrics and experiment harness used to evaluate them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hierarchy;
pub mod memory;
pub mod numerics;
pub mod optim;
pub mod streams;
pub mod learner;
pub mod meta;
pub mod config;
pub mod metrics;
pub mod harness;
pub mod gradcheck;
