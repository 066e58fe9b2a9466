//! Dataset augmentation and evaluation harness for robust multiple-choice
//! QA benchmarking.
//!
//! The pipeline filters items for answer-order invariability (the diamond
//! subset), derives the six augmented question settings from each item,
//! runs them against a model backend, parses the free-text answers, and
//! scores per-setting accuracy, the macro-mean aggregate, yes/no confidence,
//! multi-select recall, the no-answer ratio, and replacement recovery.

pub mod cli;
pub mod client;
pub mod config;
pub mod model;
pub mod parsing;
pub mod prompting;
pub mod report;
pub mod scoring;
pub mod seed;
pub mod transforms;

pub use model::{
    Dataset, DatasetMarker, DerivedQuestion, ExpectedResponse, Gold, MCQItem, OptionLabel,
    QuestionPayload, Setting, TFClaim,
};
pub use scoring::EvalRecord;
pub use transforms::{PermutationBudget, Profile, TokenPolicy};
