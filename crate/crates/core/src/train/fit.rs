use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BnStatsMode, TrainConfig};
use super::record::{EpochRecord, RunRecord, RunStatus, WallClock};
use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::eval::{threshold, AveragingMode, FrameCounts, Metrics};
use crate::io::{derive_seed, write_atomic};
use crate::nn::{bce_grad, bce_loss, penalty_value, Checkpoint, Mode, Network, Penalty};
use crate::optim::{schedule_lr, DivergenceMonitor, OptimizerState};

const LABEL_INIT: u64 = 0;
const LABEL_SHUFFLE: u64 = 1;
const LABEL_DROPOUT: u64 = 2;

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const RECORD_FILE: &str = "record.json";
pub const CURVES_FILE: &str = "curves.csv";

/// Training and validation frames of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: usize,
    pub train: FrameDataset,
    pub valid: FrameDataset,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints, record and curves of this fold.
    pub run_dir: Option<PathBuf>,
    /// Continue from `run_dir/state.ckpt` when present.
    pub resume: bool,
    /// Halt (resumably) once this epoch has completed.
    pub stop_after_epoch: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// The selected network, batch-norm statistics finalized.
    pub network: Network,
}

/// Metadata stored with every saved network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub config_hash: String,
    pub representation_hash: String,
    pub model: crate::zoo::ModelClass,
    pub representation: crate::dsp::SpecConfig,
    pub fold: usize,
    pub epoch: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    config_hash: String,
    next_epoch: u32,
    global_step: u64,
    monitor: DivergenceMonitor,
    record: RunRecord,
}

/// Probabilities for every frame of every track, in track order.
pub fn predict(net: &Network, data: &FrameDataset, context: usize, batch_size: usize) -> Result<Vec<Array2<f64>>> {
    let mut flat = Vec::with_capacity(data.len() * crate::zoo::N_KEYS);
    for (x, _) in data.batches(context, batch_size, None)? {
        flat.extend_from_slice(net.predict(&x)?.data());
    }
    let mut out = Vec::with_capacity(data.n_tracks());
    let mut pos = 0;
    for k in 0..data.n_tracks() {
        let n = data.track_len(k) * crate::zoo::N_KEYS;
        let m = Array2::from_shape_vec((data.track_len(k), crate::zoo::N_KEYS), flat[pos..pos + n].to_vec())
            .expect("prediction size");
        out.push(m);
        pos += n;
    }
    Ok(out)
}

/// Thresholded predictions scored against the dataset's targets, with
/// frames of all tracks pooled.
pub fn evaluate(
    net: &Network,
    data: &FrameDataset,
    context: usize,
    batch_size: usize,
    mode: AveragingMode,
) -> Result<Metrics> {
    let mut counts = FrameCounts::default();
    for (k, probs) in predict(net, data, context, batch_size)?.iter().enumerate() {
        counts.extend(&FrameCounts::new(&threshold(probs), data.track_targets(k))?);
    }
    Ok(counts.metrics(mode))
}

/// True once the last `patience` values failed to beat the best earlier
/// value by at least `min_delta`.
pub fn plateaued(history: &[f64], patience: usize, min_delta: f64) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let (earlier, recent) = history.split_at(history.len() - patience);
    let best_before = earlier.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    recent.iter().all(|&v| v < best_before + min_delta)
}

fn has_batch_norm(net: &Network) -> bool {
    !net.bn_stats().is_empty()
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a FoldData,
    context: usize,
    penalty: Penalty,
    meta: NetworkMeta,
}

impl Run<'_> {
    fn eval(&self, net: &Network) -> Result<Metrics> {
        evaluate(net, &self.data.valid, self.context, self.cfg.train.batch_size, self.cfg.train.averaging)
    }

    fn finalize(&self, net: &mut Network) -> Result<()> {
        if has_batch_norm(net) {
            net.batchnorm_finalize(&self.data.train.input_source(self.context, self.cfg.train.batch_size))?;
        }
        Ok(())
    }

    fn save_network(&self, path: &Path, net: &Network, epoch: Option<u32>) -> Result<()> {
        let mut meta = self.meta.clone();
        meta.epoch = epoch;
        let mut ck = Checkpoint::new(net.clone());
        ck.meta = serde_json::to_value(meta).expect("meta serializes");
        ck.save(path)
    }

    /// One pass over the training frames. Returns the mean objective or the
    /// divergence that ended the epoch.
    fn epoch(
        &self,
        epoch: u32,
        lr: f64,
        net: &mut Network,
        state: &mut OptimizerState,
        monitor: &mut DivergenceMonitor,
        global_step: &mut u64,
    ) -> Result<std::result::Result<f64, (u64, String)>> {
        let t = &self.cfg.train;
        let fold = self.data.fold as u64;
        let shuffle = derive_seed(t.seed, &[fold, u64::from(epoch), LABEL_SHUFFLE]);
        let mut total = 0.0;
        let mut frames = 0usize;
        for (i, (x, y)) in self.data.train.batches(self.context, t.batch_size, Some(shuffle))?.enumerate() {
            let dropout_seed = derive_seed(t.seed, &[fold, u64::from(epoch), i as u64, LABEL_DROPOUT]);
            let (out, cache) = net.forward(&x, Mode::Train { dropout_seed })?;
            let loss = bce_loss(&out, &y)? + penalty_value(net, self.penalty);
            if let Err(Error::Divergence { step, reason }) = monitor.check(*global_step, loss) {
                return Ok(Err((step, reason)));
            }
            let grads = net.backward(&cache, &bce_grad(&out, &y)?, self.penalty)?;
            if t.bn_stats == BnStatsMode::RunningAverage {
                net.update_running_stats(&cache, t.bn_momentum);
            }
            match state.step_network(&self.cfg.optimizer, net, &grads, lr) {
                Err(Error::Divergence { step: _, reason }) => return Ok(Err((*global_step, reason))),
                other => other?,
            }
            *global_step += 1;
            total += loss * x.batch() as f64;
            frames += x.batch();
        }
        Ok(Ok(total / frames.max(1) as f64))
    }
}

/// Trains one fold: scheduled optimization, per-epoch validation and
/// selection of the epoch with the highest validation F-measure (earliest on
/// ties, the initialization included).
pub fn train_fold(cfg: &TrainConfig, data: &FoldData, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyInput(format!("fold {} has no training frames", data.fold)));
    }
    if data.valid.is_empty() {
        return Err(Error::EmptyInput(format!("fold {} has no validation frames", data.fold)));
    }
    if data.train.bins() != cfg.model.input_bins {
        return Err(Error::shape("model input bins vs data", &[cfg.model.input_bins], &[data.train.bins()]));
    }
    let started = Instant::now();
    let config_hash = cfg.config_hash();
    let run = Run {
        cfg,
        data,
        context: cfg.model.context(),
        penalty: Penalty {
            l1: cfg.train.l1,
            l2: cfg.train.l2,
        },
        meta: NetworkMeta {
            config_hash: config_hash.clone(),
            representation_hash: cfg.representation.config_hash(),
            model: cfg.model.clone(),
            representation: cfg.representation.clone(),
            fold: data.fold,
            epoch: None,
        },
    };
    let state_path = opts.run_dir.as_ref().map(|d| d.join(STATE_FILE));
    let best_path = opts.run_dir.as_ref().map(|d| d.join(BEST_FILE));

    let resumed = match (&state_path, opts.resume) {
        (Some(p), true) if p.is_file() => Some(load_resume(p, best_path.as_deref().unwrap(), &config_hash, cfg)?),
        _ => None,
    };

    let (mut net, mut state, mut monitor, mut record, mut best, mut global_step, first_epoch, prior_secs) =
        match resumed {
            Some((net, state, rs, best)) => {
                let secs = rs.record.wall_clock_seconds.0;
                (net, state, rs.monitor, rs.record, best, rs.global_step, rs.next_epoch, secs)
            }
            None => {
                let mut net = cfg
                    .model
                    .build()?
                    .initialized(derive_seed(cfg.train.seed, &[data.fold as u64, LABEL_INIT]));
                run.finalize(&mut net)?;
                let initial = run.eval(&net)?;
                let state = OptimizerState::for_network(cfg.optimizer.kind, &net);
                let record = RunRecord {
                    config_hash: config_hash.clone(),
                    fold: data.fold,
                    param_count: net.param_count(),
                    status: RunStatus::Completed,
                    initial,
                    epochs: Vec::new(),
                    best_epoch: None,
                    best_valid: initial,
                    final_valid: None,
                    checkpoint: None,
                    wall_clock_seconds: WallClock(0.0),
                };
                if let Some(p) = &best_path {
                    run.save_network(p, &net, None)?;
                }
                let best = net.clone();
                (net, state, DivergenceMonitor::new(), record, best, 0, 0, 0.0)
            }
        };
    record.checkpoint = best_path.as_ref().map(|p| p.display().to_string());

    let mut status = RunStatus::Completed;
    for epoch in first_epoch..cfg.train.epochs {
        let lr = schedule_lr(cfg.optimizer.learning_rate, epoch, &cfg.schedule);
        let train_loss = match run.epoch(epoch, lr, &mut net, &mut state, &mut monitor, &mut global_step)? {
            Ok(loss) => loss,
            Err((step, reason)) => {
                status = RunStatus::Diverged { step, reason };
                break;
            }
        };
        if cfg.train.bn_stats == BnStatsMode::Finalize {
            run.finalize(&mut net)?;
        }
        let valid = run.eval(&net)?;
        record.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            valid,
        });
        if valid.f1 > record.best_valid.f1 {
            record.best_valid = valid;
            record.best_epoch = Some(epoch);
            best = net.clone();
            if let Some(p) = &best_path {
                run.save_network(p, &best, Some(epoch))?;
            }
        }
        if let Some(p) = &state_path {
            record.wall_clock_seconds = WallClock(prior_secs + started.elapsed().as_secs_f64());
            save_resume(p, &net, &state, &ResumeState {
                config_hash: config_hash.clone(),
                next_epoch: epoch + 1,
                global_step,
                monitor: monitor.clone(),
                record: record.clone(),
            })?;
        }
        let mut history = vec![record.initial.f1];
        history.extend(record.epochs.iter().map(|e| e.valid.f1));
        if cfg.train.stop_on_plateau
            && plateaued(&history, cfg.train.plateau_patience as usize, cfg.train.plateau_min_delta)
        {
            status = RunStatus::Plateaued { epoch };
            break;
        }
        if opts.stop_after_epoch == Some(epoch) && epoch + 1 < cfg.train.epochs {
            status = RunStatus::Interrupted { epoch };
            break;
        }
    }

    if !matches!(status, RunStatus::Interrupted { .. }) {
        run.finalize(&mut best)?;
        record.final_valid = Some(run.eval(&best)?);
        if let Some(p) = &best_path {
            run.save_network(p, &best, record.best_epoch)?;
        }
    }
    record.status = status;
    record.wall_clock_seconds = WallClock(prior_secs + started.elapsed().as_secs_f64());
    if let Some(dir) = &opts.run_dir {
        write_run_outputs(dir, &record)?;
    }
    Ok(TrainOutcome { record, network: best })
}

pub fn write_run_outputs(dir: &Path, record: &RunRecord) -> Result<()> {
    let json = serde_json::to_string_pretty(record).expect("record serializes");
    write_atomic(&dir.join(RECORD_FILE), json.as_bytes())?;
    write_atomic(&dir.join(CURVES_FILE), record.curves_csv().as_bytes())
}

fn save_resume(path: &Path, net: &Network, state: &OptimizerState, rs: &ResumeState) -> Result<()> {
    let mut ck = Checkpoint::new(net.clone());
    ck.meta = serde_json::to_value(rs).expect("resume state serializes");
    ck.extra = state.to_blocks();
    ck.save(path)
}

fn load_resume(
    path: &Path,
    best_path: &Path,
    config_hash: &str,
    cfg: &TrainConfig,
) -> Result<(Network, OptimizerState, ResumeState, Network)> {
    let ck = Checkpoint::load(path)?;
    let rs: ResumeState = serde_json::from_value(ck.meta).map_err(|e| Error::format(path, e.to_string()))?;
    if rs.config_hash != config_hash {
        return Err(Error::Config(format!(
            "{} belongs to a different configuration ({})",
            path.display(),
            &rs.config_hash[..16.min(rs.config_hash.len())]
        )));
    }
    let sizes: Vec<usize> = ck.network.params().iter().map(|t| t.len()).collect();
    let state = OptimizerState::from_blocks(cfg.optimizer.kind, &sizes, &ck.extra)?;
    let best = Checkpoint::load(best_path)?.network;
    Ok((ck.network, state, rs, best))
}

/// Loads a network saved by `train_fold` together with its metadata.
pub fn load_network(path: &Path) -> Result<(Network, NetworkMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta: NetworkMeta = serde_json::from_value(ck.meta).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((ck.network, meta))
}

/// Output directory of a configuration below `root`.
pub fn run_dir(root: &Path, cfg: &TrainConfig) -> PathBuf {
    root.join(&cfg.config_hash()[..16])
}

/// Trains every fold on a pool of `cfg.train.workers` threads. With an
/// output root, each fold writes to `<root>/<hash>/fold<k>/` and the config
/// is stored beside the folds.
pub fn train(cfg: &TrainConfig, folds: &[FoldData], out_root: Option<&Path>, resume: bool) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    if folds.is_empty() {
        return Err(Error::EmptyInput("no folds to train".into()));
    }
    if let Some(root) = out_root {
        let dir = run_dir(root, cfg);
        write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        folds
            .par_iter()
            .map(|f| {
                let opts = TrainOptions {
                    run_dir: out_root.map(|r| run_dir(r, cfg).join(format!("fold{}", f.fold))),
                    resume,
                    stop_after_epoch: None,
                };
                train_fold(cfg, f, &opts)
            })
            .collect()
    })
}
