//! Referring multi-object tracking lab.
//!
//! * [`scenesim`] builds seeded intersection scenes and their ground truth.
//! * [`promptlang`] turns scene attributes into prompts and referral maps.
//! * [`dataset`] reads and writes the on-disk benchmark layout.
//! * [`generate`] assembles a train/test split from seeded worlds.
//! * [`nn`] is a small reverse-mode autograd kernel.
//! * [`tracker`] is a text-guided query tracker trained on that kernel.
//! * [`refeval`] scores predictions with prompt-conditioned HOTA.

pub mod assign;
pub mod bbox;
pub mod dataset;
pub mod error;
pub mod generate;
pub mod nn;
pub mod promptlang;
pub mod refeval;
pub mod scenesim;
pub mod tracker;

pub use error::{Error, Result};
