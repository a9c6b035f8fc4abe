//! Semi-supervised triage of classified-ad corpora.
//!
//! Listings are cleaned ([`corpus`]), reduced to fifteen binary signal flags
//! ([`features`]), filtered and sanity-checked ([`cluster`]), embedded as LDA
//! document-topic mixtures ([`topics`]), and finally scored by label
//! spreading from a handful of expert verdicts ([`labeling`], [`ssl`]).
//! [`pipeline`] strings the stages together with content-hash caching and
//! [`report`] renders the dataset and results tables.

pub mod cluster;
pub mod corpus;
pub mod error;
pub mod features;
pub mod labeling;
pub mod pipeline;
pub mod report;
pub mod ssl;
pub mod synth;
pub mod text;
pub mod topics;

pub use error::{Error, Result};
