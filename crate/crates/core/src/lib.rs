//! Desk-scale pipeline for turning long-form fiction into a multicast
//! audiobook script and synthesizing it as discrete speech tokens.
//!
//! The crate is organized around a deterministic synthetic world
//! ([`oracle`]) that stands in for real audio: it defines ground-truth
//! speech tokens, speaker voiceprints and the objective proxy metrics
//! (token error rate, speaker similarity, pitch, emotion classification)
//! used by every downstream stage.
//!
//! Pipeline stages:
//!
//! - [`extract`] parses raw fiction into chapters, narration/dialogue
//!   utterances and context windows;
//! - [`cast`] clusters voices and selects prompts under the decoupled
//!   multi-constraint policy;
//! - [`instruction`] compiles free-text style instructions into discrete
//!   attribute labels and their control-token payload;
//! - [`sequence`] assembles the flat conditional token sequences
//!   (speaker slot, context block, instruction block, text, speech);
//! - [`model`] is a small causal transformer over that flat id space,
//!   trained in three stages with teacher forcing;
//! - [`distill`] runs the synthesize / filter / rebalance self-distillation
//!   loop that feeds stage three;
//! - [`eval`] builds the NAR/DIA/CHAP test suites, computes metrics,
//!   runs the ablations and orchestrates the end-to-end pipeline.

pub mod cast;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod extract;
pub mod instruction;
pub mod model;
pub mod oracle;
pub mod sequence;
pub mod util;

pub use error::{Error, Result};
