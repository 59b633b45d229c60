//! Valid statistical inference on differences between two groups of text
//! documents.
//!
//! The pipeline answers three questions about a treatment group and a control
//! group of documents:
//!
//! 1. *Whether* the groups differ: a model predicts group membership of
//!    held-out documents, and a permutation test turns its improvement over a
//!    constant predictor into a p-value ([`permtest`]).
//! 2. *What* differs: an LLM proposes scored themes from training data only
//!    ([`themes`], [`llm`]); their group differences are estimated on the
//!    hold-out from human scores, optionally combined with cheap machine scores
//!    ([`inference`]).
//! 3. *How completely* the themes describe the difference ([`completeness`]).
//!
//! Access to hold-out data is governed by a staged state machine with
//! commitments and a hash-chained journal ([`firewall`]).

pub mod canonical;
pub mod completeness;
pub mod corpus;
pub mod firewall;
pub mod inference;
pub mod llm;
pub mod losses;
pub mod permtest;
pub mod rng;
pub mod themes;

mod error;

pub use error::{Error, Result};

pub use corpus::{Corpus, Document, GroupLabel, LabeledSubset, SampleSplit};
pub use losses::{LabelMap, Metric, PredictionSet};
pub use themes::{ScalePoint, ScoreMatrix, Theme, ThemeSet};
