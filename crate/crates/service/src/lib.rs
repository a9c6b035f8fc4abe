//! HTTP review service for the expert labeling loop.
//!
//! All state that matters lives on disk: the journal is the source of truth
//! for verdicts, and candidates come from the spread stage's results files.
//! The in-memory copies here are read-only views of pipeline artifacts plus
//! the currently loaded candidate set.

pub mod api;

pub use api::{router, AppState};
