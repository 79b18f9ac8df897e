use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::fit::{train_fold, FoldData, TrainOptions};
use crate::error::{Error, Result};
use crate::optim::Schedule;

/// Decade-spaced candidates `10, 1, 0.1, ...` of length `n`.
pub fn lr_candidates(n: usize) -> Vec<f64> {
    (0..n as i32)
        .map(|k| format!("1e{}", 1 - k).parse().expect("decimal literal"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    pub chosen: f64,
    /// Every candidate probed, with whether it diverged.
    pub tried: Vec<(f64, bool)>,
}

/// Returns the first candidate for which `diverges` reports `false`.
pub fn lr_search_with(candidates: &[f64], mut diverges: impl FnMut(f64) -> Result<bool>) -> Result<LrSearch> {
    let mut tried = Vec::new();
    for &lr in candidates {
        let failed = diverges(lr)?;
        tried.push((lr, failed));
        if !failed {
            return Ok(LrSearch { chosen: lr, tried });
        }
    }
    Err(Error::SearchFailed(format!(
        "all {} candidate learning rates diverged (smallest {:e})",
        candidates.len(),
        candidates.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Probes decreasing learning rates with short constant-rate runs of
/// `probe_epochs` epochs and returns the first that does not diverge.
pub fn lr_search(template: &TrainConfig, data: &FoldData, probe_epochs: u32, n_candidates: usize) -> Result<LrSearch> {
    if probe_epochs == 0 {
        return Err(Error::Config("learning-rate search needs a probe budget of at least one epoch".into()));
    }
    lr_search_with(&lr_candidates(n_candidates), |lr| {
        let mut cfg = template.clone();
        cfg.optimizer.learning_rate = lr;
        cfg.schedule = Schedule::constant();
        cfg.train.epochs = probe_epochs;
        cfg.train.stop_on_plateau = false;
        let out = train_fold(&cfg, data, &TrainOptions::default())?;
        Ok(out.record.status.is_failed())
    })
}
