//! Cascaded early-rejection matching for unit-normalized feature templates.
//!
//! Templates are projected with LDA so that leading dimensions carry the most
//! discriminative energy. Matching accumulates the cosine over nested
//! prefixes and stops as soon as a partial score falls below the threshold
//! learned for that stage.

pub mod bench;
pub mod cascade;
pub mod error;
pub mod lda;
pub mod store;
pub mod synth;

pub use cascade::{
    cascade_match, cascade_match_counted, cosine, identify, identify_counted, learn_thresholds,
    linear_scan, make_stage_plan, rank_order, truncate_model, truncate_template, vr_schedule,
    Candidate, CascadeModel, Hit, MatchResult, PairSample, StagePlan, Template, WorkCounter,
};
pub use error::{Error, Result};
pub use lda::{fit_lda, LabeledDataset, LdaProjection};
