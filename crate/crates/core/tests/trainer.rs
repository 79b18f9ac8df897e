use framewise::data::FrameDataset;
use framewise::optim::{schedule_lr, OptimizerConfig, OptimizerKind, Schedule};
use framewise::train::{
    lr_search, train, train_fold, FoldData, RunStatus, TrainConfig, TrainOptions, BEST_FILE, RECORD_FILE,
};
use framewise::zoo::{ModelClass, ModelKind, N_KEYS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BINS: usize = 12;

/// Random spectrogram-like tracks where key `k` sounds whenever bin
/// `k % BINS` exceeds 0.7.
fn tracks(n: usize, frames: usize, seed: u64) -> FrameDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| {
            let x = Array2::from_shape_fn((frames, BINS), |_| rng.gen_range(0.0..1.0));
            let y = Array2::from_shape_fn((frames, N_KEYS), |(t, k)| u8::from(x[[t, k % BINS]] > 0.7));
            (x, y)
        })
        .collect();
    FrameDataset::new(pairs).unwrap()
}

fn fold(k: usize, seed: u64) -> FoldData {
    FoldData {
        fold: k,
        train: tracks(3, 40, seed),
        valid: tracks(2, 30, seed + 100),
    }
}

fn config(kind: ModelKind, epochs: u32) -> TrainConfig {
    let mut cfg = TrainConfig::recipe(kind);
    cfg.model = ModelClass::new(kind, BINS);
    cfg.model.hidden_width = 16;
    cfg.optimizer = OptimizerConfig::new(OptimizerKind::Momentum, 0.02).with_momentum(0.9);
    cfg.schedule = Schedule::step_multiply(0.5, 2);
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.train.seed = 7;
    cfg
}

fn shallow_bn(epochs: u32) -> TrainConfig {
    let mut cfg = config(ModelKind::Shallow, epochs);
    cfg.model.batch_norm = true;
    cfg.model.dropout = Some(0.3);
    cfg
}

#[test]
fn zero_epochs_evaluates_initialization_only() {
    let out = train_fold(&config(ModelKind::LogReg, 0), &fold(0, 1), &TrainOptions::default()).unwrap();
    let r = &out.record;
    assert!(r.epochs.is_empty());
    assert_eq!(r.best_epoch, None);
    assert_eq!(r.status, RunStatus::Completed);
    assert_eq!(r.best_valid, r.initial);
    assert_eq!(r.final_valid, Some(r.initial));
}

#[test]
fn records_are_contiguous_and_follow_the_schedule() {
    let cfg = shallow_bn(6);
    let r = train_fold(&cfg, &fold(0, 1), &TrainOptions::default()).unwrap().record;
    assert_eq!(r.epochs.len(), 6);
    for (i, e) in r.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i as u32);
        assert_eq!(e.learning_rate, schedule_lr(0.02, i as u32, &cfg.schedule));
    }
    assert_eq!(r.learning_rates(), vec![0.02, 0.02, 0.01, 0.01, 0.005, 0.005]);
    let best = r.epochs.iter().map(|e| e.valid.f1).fold(r.initial.f1, f64::max);
    assert_eq!(r.best_valid.f1, best);
    let first_best = r.epochs.iter().find(|e| e.valid.f1 == best).map(|e| e.epoch);
    assert_eq!(r.best_epoch, first_best);
    assert!(r.best_valid.f1 > r.initial.f1, "training should improve validation F1");
    assert_eq!(r.final_valid.unwrap().f1, r.best_valid.f1);
}

#[test]
fn fixed_seed_is_bit_identical() {
    let cfg = shallow_bn(3);
    let a = train_fold(&cfg, &fold(0, 1), &TrainOptions::default()).unwrap();
    let b = train_fold(&cfg, &fold(0, 1), &TrainOptions::default()).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.network.params(), b.network.params());
    for (x, y) in a.record.train_losses().iter().zip(b.record.train_losses()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = shallow_bn(5);
    let data = fold(0, 3);
    let full = train_fold(&cfg, &data, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut opts = TrainOptions {
        run_dir: Some(dir.path().to_path_buf()),
        resume: true,
        stop_after_epoch: Some(1),
    };
    let partial = train_fold(&cfg, &data, &opts).unwrap();
    assert_eq!(partial.record.status, RunStatus::Interrupted { epoch: 1 });
    assert_eq!(partial.record.epochs.len(), 2);

    opts.stop_after_epoch = None;
    let mut resumed = train_fold(&cfg, &data, &opts).unwrap();
    assert!(resumed.record.checkpoint.is_some());
    resumed.record.checkpoint = None;
    assert_eq!(resumed.record, full.record);
    assert_eq!(resumed.network.params(), full.network.params());
    assert_eq!(resumed.network.bn_stats(), full.network.bn_stats());

    let mut saved: framewise::train::RunRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(RECORD_FILE)).unwrap()).unwrap();
    saved.checkpoint = None;
    assert_eq!(saved, full.record);
    let (net, meta) = framewise::train::load_network(&dir.path().join(BEST_FILE)).unwrap();
    assert_eq!(net.params(), full.network.params());
    assert_eq!(meta.epoch, full.record.best_epoch);
}

#[test]
fn resume_rejects_other_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        run_dir: Some(dir.path().to_path_buf()),
        resume: true,
        stop_after_epoch: Some(0),
    };
    train_fold(&config(ModelKind::LogReg, 3), &fold(0, 1), &opts).unwrap();
    let err = train_fold(&config(ModelKind::LogReg, 4), &fold(0, 1), &opts).unwrap_err();
    assert!(err.to_string().contains("different configuration"), "{err}");
}

#[test]
fn divergence_still_yields_a_record() {
    let mut cfg = config(ModelKind::LogReg, 4);
    // The logistic loss is bounded; the weight penalty is not.
    cfg.optimizer = OptimizerConfig::new(OptimizerKind::Sgd, 1e6);
    cfg.train.l2 = 1e-3;
    let r = train_fold(&cfg, &fold(0, 1), &TrainOptions::default()).unwrap().record;
    match &r.status {
        RunStatus::Diverged { step, .. } => assert!(*step < 12),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(r.status.is_failed());
    assert!(r.final_valid.is_some());
}

#[test]
fn folds_are_independent_of_worker_count() {
    let folds = [fold(0, 1), fold(1, 2), fold(2, 3)];
    let mut cfg = config(ModelKind::LogReg, 2);
    let dir = tempfile::tempdir().unwrap();
    let serial = train(&cfg, &folds, Some(dir.path()), false).unwrap();
    cfg.train.workers = 3;
    let parallel = train(&cfg, &folds, None, false).unwrap();
    for (a, b) in serial.iter().zip(&parallel) {
        assert_eq!(a.record.epochs, b.record.epochs);
        assert_eq!(a.network.params(), b.network.params());
    }
    let hash = &framewise::train::TrainConfig::config_hash(&config(ModelKind::LogReg, 2))[..16];
    for k in 0..3 {
        assert!(dir.path().join(hash).join(format!("fold{k}")).join(RECORD_FILE).is_file());
    }
}

#[test]
fn lr_search_on_zero_data_takes_first_candidate() {
    let zeros = |n| {
        FrameDataset::new(vec![(Array2::zeros((n, BINS)), Array2::zeros((n, N_KEYS)))]).unwrap()
    };
    let data = FoldData {
        fold: 0,
        train: zeros(20),
        valid: zeros(10),
    };
    let mut cfg = config(ModelKind::LogReg, 1);
    cfg.optimizer = OptimizerConfig::new(OptimizerKind::Sgd, 1.0);
    // Only the bias sees gradient; it drifts towards "silent" at any rate.
    let s = lr_search(&cfg, &data, 1, 8).unwrap();
    assert_eq!(s.chosen, 10.0);
    assert!(lr_search(&cfg, &data, 0, 8).is_err());
}

#[test]
fn convnet_overfit_loss_decreases() {
    let mut cfg = config(ModelKind::ConvNet, 10);
    cfg.model = ModelClass::new(ModelKind::ConvNet, 16);
    cfg.optimizer = OptimizerConfig::new(OptimizerKind::Adam, 0.001);
    cfg.schedule = Schedule::constant();
    cfg.train.batch_size = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Array2::from_shape_fn((50, 16), |_| rng.gen_range(0.0..1.0));
    let y = Array2::from_shape_fn((50, N_KEYS), |(t, k)| u8::from(x[[t, k % 16]] > 0.7));
    let set = FrameDataset::new(vec![(x, y)]).unwrap();
    let data = FoldData {
        fold: 0,
        train: set.clone(),
        valid: set,
    };
    let r = train_fold(&cfg, &data, &TrainOptions::default()).unwrap().record;
    let losses = r.train_losses();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "loss rose beyond tolerance: {losses:?}");
    }
    assert!(losses[9] < losses[0], "{losses:?}");
}
