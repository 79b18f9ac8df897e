//! Training runs: configuration, the scheduled optimization loop with
//! validation-based model selection, resumable checkpoints and the
//! learning-rate search.

mod config;
mod fit;
mod record;
mod search;

pub use config::{BnStatsMode, TrainConfig, TrainSection};
pub use fit::{
    evaluate, load_network, plateaued, predict, run_dir, train, train_fold, write_run_outputs,
    FoldData, NetworkMeta, TrainOptions, TrainOutcome, BEST_FILE, CURVES_FILE, RECORD_FILE,
    STATE_FILE,
};
pub use record::{EpochRecord, RunRecord, RunStatus, WallClock};
pub use search::{lr_candidates, lr_search, lr_search_with, LrSearch};
