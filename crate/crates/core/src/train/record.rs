use serde::{Deserialize, Serialize};

use crate::eval::Metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped early by the plateau rule.
    Plateaued { epoch: u32 },
    Diverged { step: u64, reason: String },
    /// Halted on request; resumable from its checkpoint.
    Interrupted { epoch: u32 },
}

impl RunStatus {
    pub fn is_failed(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Plateaued { .. } => "plateaued",
            RunStatus::Diverged { .. } => "diverged",
            RunStatus::Interrupted { .. } => "interrupted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub valid: Metrics,
}

/// Seconds of wall-clock time. Deliberately ignored by equality so that
/// repeated runs compare equal.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WallClock(pub f64);

impl PartialEq for WallClock {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub fold: usize,
    pub param_count: usize,
    pub status: RunStatus,
    /// Validation metrics of the initialized network.
    pub initial: Metrics,
    pub epochs: Vec<EpochRecord>,
    /// `None` when no epoch beat the initialization.
    pub best_epoch: Option<u32>,
    pub best_valid: Metrics,
    /// Validation metrics of the selected network after batch-norm finalization.
    pub final_valid: Option<Metrics>,
    pub checkpoint: Option<String>,
    pub wall_clock_seconds: WallClock,
}

impl RunRecord {
    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.learning_rate).collect()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Columns `epoch, learning_rate, train_loss, valid_P, valid_R, valid_F1`;
    /// the initialization appears as epoch `-1` with an empty loss.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,learning_rate,train_loss,valid_P,valid_R,valid_F1\n");
        let m = &self.initial;
        out.push_str(&format!("-1,,,{},{},{}\n", m.precision, m.recall, m.f1));
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.learning_rate, e.train_loss, e.valid.precision, e.valid.recall, e.valid.f1
            ));
        }
        out
    }
}
