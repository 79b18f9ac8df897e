use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use framewise::hpstudy::{
    analyze as fit_importance, infer_space, read_ledger, run_study, score_folds, DivergedPolicy, ForestParams,
    ParamSpace, TrialOutcome,
};
use framewise::io::write_atomic;
use framewise::train::{train, TrainConfig};
use framewise::zoo::ModelKind;

use crate::corpus::{parse_folds, Corpus};
use crate::{CliResult, Failure};

pub const LEDGER_FILE: &str = "trials.csv";
pub const SPACE_FILE: &str = "space.toml";

#[derive(Clone, Copy, ValueEnum)]
pub enum Design {
    Grid,
    Random,
}

#[derive(Args)]
pub struct RunArgs {
    /// Parameter space file.
    #[arg(long)]
    space: PathBuf,
    #[arg(long, value_enum)]
    mode: Design,
    /// Number of random draws.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "FRAMEWISE_DATA")]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config the study varies; the logistic-regression recipe by default.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    folds: String,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    overfit: bool,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Space file; defaults to `space.toml` beside the ledger, else the
    /// values found in the ledger.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 2)]
    min_leaf: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fit diverged trials at the worst observed score instead of dropping them.
    #[arg(long)]
    impute_diverged: bool,
    /// Interactions listed in the text report.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

pub fn run(args: &RunArgs, workers: usize) -> CliResult {
    let space = ParamSpace::read(&args.space)?;
    let template = match &args.template {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::recipe(ModelKind::LogReg),
    };
    let configs = match (args.mode, args.n) {
        (Design::Grid, _) => space.enumerate_grid()?,
        (Design::Random, Some(n)) => space.sample_random(n, args.seed)?,
        (Design::Random, None) => {
            return Err(Failure::from(framewise::Error::Config("random mode needs --n".into())));
        }
    };
    let corpus = Corpus::open(&args.data, args.split.as_deref(), args.overfit)?;
    let folds = parse_folds(&args.folds, corpus.n_folds())?;
    let cache = args.out.join("cache");
    write_atomic(&args.out.join(SPACE_FILE), space.to_toml().as_bytes())?;
    let ledger = args.out.join(LEDGER_FILE);
    let progress = run_study(&space, &configs, &template, &ledger, workers, |_, cfg| {
        let mut cfg = cfg.clone();
        let tracks = corpus.load(&cfg.representation, Some(&cache))?;
        cfg.model.input_bins = tracks[0].spectrogram.n_bands();
        cfg.train.workers = 1;
        let data = corpus.fold_data(&folds, &tracks)?;
        let out: TrialOutcome = score_folds(&train(&cfg, &data, None, false)?);
        eprintln!("trial score {:.4}{}", out.score, if out.diverged { " (diverged)" } else { "" });
        Ok(out)
    })?;
    println!(
        "{} configurations: {} run, {} already in the ledger -> {}",
        configs.len(),
        progress.run,
        progress.skipped,
        ledger.display()
    );
    Ok(())
}

fn resolve_space(args: &AnalyzeArgs) -> CliResult<ParamSpace> {
    if let Some(p) = &args.space {
        return Ok(ParamSpace::read(p)?);
    }
    let beside = args.ledger.with_file_name(SPACE_FILE);
    if beside.is_file() {
        return Ok(ParamSpace::read(&beside)?);
    }
    Ok(infer_space(&args.ledger)?)
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult {
    let space = resolve_space(args)?;
    let contents = read_ledger(&args.ledger, &space)?;
    if contents.skipped > 0 {
        eprintln!("warning: skipped {} malformed ledger rows", contents.skipped);
    }
    let policy = if args.impute_diverged {
        DivergedPolicy::WorstScore
    } else {
        DivergedPolicy::Exclude
    };
    let params = ForestParams {
        n_trees: args.trees,
        min_leaf: args.min_leaf,
        seed: args.seed,
        ..ForestParams::default()
    };
    let (_, report) = fit_importance(&space, &contents.trials, policy, params)?;
    let out = &args.out;
    let text = report.to_text(args.top);
    write_atomic(&out.join("importance.txt"), text.as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out.join("importance.json"), json.as_bytes())?;
    write_atomic(&out.join("shares.csv"), report.shares_csv().as_bytes())?;
    for name in space.names() {
        let csv = report.curve_csv(name).expect("every dimension has a curve");
        write_atomic(&marginal_path(out, name), csv.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn marginal_path(out: &Path, dimension: &str) -> PathBuf {
    out.join("marginals").join(format!("{dimension}.csv"))
}
