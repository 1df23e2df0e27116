//! Prompted weak supervision.
//!
//! Templates turn rows of an unlabeled [`dataset::Dataset`] into typed
//! queries, a [`client::Client`] executes them (locally through the
//! [`batching`] planner or remotely through [`serving`]), [`voter`]s map the
//! responses to noisy label votes, and the [`labelmodel`] module aggregates
//! the resulting vote matrix into probabilistic training labels.

pub mod backend;
pub mod batching;
pub mod cache;
pub mod canonical;
pub mod client;
pub mod dataset;
pub mod labelmodel;
pub mod query;
pub mod serving;
pub mod template;
pub mod voter;

pub use backend::{Backend, Capabilities, Capability, MockBackend};
pub use client::{Client, Engine};
pub use dataset::{ColumnKind, Dataset, Value};
pub use labelmodel::{LabelModel, ProbLabels};
pub use query::{CompletionQuery, GenParams, Payload, Query, RankedQuery, Response};
pub use voter::{LabelMap, Matcher, Vote, VoteMatrix, Voter};
