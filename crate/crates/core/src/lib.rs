//! Tree-index retrieval with a context-aware node scorer.
//!
//! The pipeline: build a behavior corpus ([`corpus`]), organise items as the
//! leaves of a binary tree ([`tree`]), connect co-occurring nodes on each
//! level ([`graph`]), optionally add extra parent links ([`multipath`]),
//! train the scorer ([`nn`], [`sampler`], [`trainer`]) and retrieve with
//! layer-wise beam search ([`retrieval`]).

pub mod artifact;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod flops;
pub mod graph;
pub mod multipath;
pub mod nn;
pub mod retrieval;
pub mod sampler;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};
