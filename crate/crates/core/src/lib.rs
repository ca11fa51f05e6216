//! Semi-supervised co-training for conversational query rewrite.
//!
//! A Simplifier (full query to in-context form) and a Rewriter (in-context
//! query plus history to full form) label unlabeled conversations for each
//! other. Confident outputs are flipped into training pairs for the opposite
//! model, and both models are retrained with a generation loss plus in-batch
//! contrastive terms over dropout-perturbed encodings.

pub mod contrastive;
pub mod cotrain;
pub mod dataio;
pub mod domain;
pub mod error;
pub mod exec;
pub mod genmodel;
pub mod metrics;
pub mod seed;
pub mod weaklabel;

pub use error::{Error, Result};
