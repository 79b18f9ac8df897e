//! Hyper-parameter studies: parameter spaces with conditional dimensions,
//! grid and random designs, a trials ledger, and variance decomposition of
//! a regression forest fitted to the trial scores.

mod fanova;
mod forest;
mod ledger;
mod space;
mod study;

pub use fanova::{
    importance, interaction, marginal, CurvePoint, ImportanceReport, InteractionEffect, MainEffect, Marginal,
};
pub use forest::{Forest, ForestParams, LeafRegion, Tree};
pub use ledger::{
    append_trials, infer_space, read_ledger, recorded_hashes, training_set, DivergedPolicy, LedgerContents, Trial,
    TrialStatus,
};
pub use space::{Condition, Configuration, DimKind, Dimension, Level, ParamSpace, MAX_LEVELS, SCHEDULE_PERIOD};
pub use study::{analyze, run_study, score_folds, trial_hash, StudyProgress, TrialOutcome};
