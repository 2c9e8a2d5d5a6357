//! Engine-free macro-management benchmark pipeline.
//!
//! Two-player RTS match traces go through a fixed sequence of stages:
//! quality filtering ([`preprocess`]), event-sourced observation
//! reconstruction and action labelling ([`parser`]), balancing and feature
//! extraction ([`features`]), and a winner-balanced 7:1:2 split
//! ([`dataset`]). The [`nn`] and [`models`] modules implement the recurrent
//! baselines for global state evaluation (win probability) and build order
//! prediction (next macro action), and [`eval`] scores them.

pub mod dataset;
pub mod eval;
pub mod features;
pub mod models;
pub mod nn;
pub mod parser;
pub mod pipeline;
pub mod plot;
pub mod preprocess;
pub mod trace;

pub(crate) mod util;

pub use parser::vocab::{ActionGroup, ActionVocabulary, VocabEntry};
pub use trace::{Event, EventKind, GameResult, Matchup, PlayerMeta, Race, Trace, TraceHeader};
