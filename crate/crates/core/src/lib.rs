//! Audio-adaptive activity recognition across visual domain shift.
//!
//! Sound is far less affected than appearance when the scene, viewpoint or
//! actor changes. This crate trains a visual recognizer on a labeled source
//! domain and adapts it to an unlabeled target domain by letting a
//! source-trained audio model say which activities a target video does *not*
//! contain, by reweighting the source loss toward rare audio-visual
//! combinations, and by building the recognizer's class token from learned
//! per-class sound vectors.

pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod recognizer;
pub mod synthgen;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/absent-labels.md")]
    mod absent_labels {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
