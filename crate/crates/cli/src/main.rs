mod corpus;
mod study;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use framewise::audio::{read_wav, write_wav};
use framewise::data::{frame_dataset, synthesize, write_note_list, SynthSpec};
use framewise::dsp::{compute_representation, spectrogram_csv, write_spectrogram, SpecConfig};
use framewise::eval::{aggregate_folds, threshold, AveragingMode, MetricsReport};
use framewise::io::write_atomic;
use framewise::train::{evaluate, load_network, predict, run_dir, train, TrainConfig};
use framewise::Error;

use corpus::{parse_folds, Corpus};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "framewise", version, about = "Framewise piano transcription: spectrograms, training, evaluation and hyper-parameter studies")]
struct Cli {
    /// Worker threads (folds and study trials run this many at a time).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a spectrogram container and a CSV preview from a WAV file.
    Spectrogram {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames written to the CSV preview.
        #[arg(long, default_value_t = 50)]
        preview_rows: usize,
    },
    /// Render synthetic annotated tracks (WAV plus note list).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_tracks: Option<usize>,
        /// Seconds per track.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        sample_rate: Option<u32>,
        /// Largest chord size; 1 gives monophonic tracks.
        #[arg(long)]
        max_polyphony: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on every requested fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "FRAMEWISE_DATA")]
        data: PathBuf,
        /// Comma-separated fold indices or `all`.
        #[arg(long, default_value = "all")]
        folds: String,
        #[arg(long)]
        out: PathBuf,
        /// Split file; defaults to `split.toml` in the data directory.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Train and validate on all tracks (single fold 0).
        #[arg(long)]
        overfit: bool,
        /// Continue interrupted runs from their checkpoints.
        #[arg(long)]
        resume: bool,
        /// Exit with status 1 when any fold diverges.
        #[arg(long)]
        strict: bool,
    },
    /// Score a saved network on a set of tracks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "FRAMEWISE_DATA")]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Fold whose tracks are scored; all tracks when omitted.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, value_enum, default_value_t = TrackSet::Test)]
        set: TrackSet,
        #[arg(long, default_value = "aggregate")]
        mode: AveragingMode,
        /// Per-track metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid or random study and append results to a trials ledger.
    StudyRun(study::RunArgs),
    /// Fit the importance forest to a trials ledger and write the report.
    StudyAnalyze(study::AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackSet {
    Train,
    Valid,
    Test,
}

impl TrackSet {
    fn name(self) -> &'static str {
        match self {
            TrackSet::Train => "train",
            TrackSet::Valid => "valid",
            TrackSet::Test => "test",
        }
    }
}

/// A failure with its exit status.
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } | Error::SearchFailed(_) => EXIT_RUNTIME,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command, cli.jobs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command, jobs: Option<usize>) -> CliResult {
    match command {
        Command::Spectrogram {
            audio,
            config,
            out,
            preview_rows,
        } => spectrogram(&audio, &config, &out, preview_rows),
        Command::Synth {
            out,
            config,
            n_tracks,
            duration,
            sample_rate,
            max_polyphony,
            seed,
        } => {
            let mut spec = match config {
                Some(p) => read_synth_spec(&p)?,
                None => SynthSpec::default(),
            };
            if let Some(n) = n_tracks {
                spec.n_tracks = n;
            }
            if let Some(d) = duration {
                spec.duration = d;
            }
            if let Some(sr) = sample_rate {
                spec.sample_rate = sr;
            }
            if let Some(p) = max_polyphony {
                spec.polyphony = [spec.polyphony[0].min(p), p];
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            synth(&spec, &out)
        }
        Command::Train {
            config,
            data,
            folds,
            out,
            split,
            overfit,
            resume,
            strict,
        } => train_command(&config, &data, &folds, &out, split.as_deref(), overfit, resume, strict, jobs),
        Command::Eval {
            checkpoint,
            data,
            split,
            fold,
            set,
            mode,
            out,
        } => eval_command(&checkpoint, &data, split.as_deref(), fold, set, mode, out.as_deref()),
        Command::StudyRun(args) => study::run(&args, jobs.unwrap_or(1)),
        Command::StudyAnalyze(args) => study::analyze(&args),
    }
}

fn spectrogram(audio: &Path, config: &Path, out: &Path, preview_rows: usize) -> CliResult {
    let cfg = SpecConfig::read(config)?;
    let clip = read_wav(audio)?;
    let clip = if clip.sample_rate == cfg.sample_rate {
        clip
    } else {
        clip.resample(cfg.sample_rate)?
    };
    let spec = compute_representation(&clip, &cfg)?;
    write_spectrogram(out, &spec)?;
    let preview = out.with_extension("csv");
    write_atomic(&preview, spectrogram_csv(&spec, Some(preview_rows)).as_bytes())?;
    println!(
        "{}: {} frames x {} bands at {:.2} frames/s -> {}",
        cfg.spec_type,
        spec.n_frames(),
        spec.n_bands(),
        cfg.frame_rate(),
        out.display()
    );
    let means = spec.frames.mean_axis(ndarray::Axis(0));
    if let Some(means) = means {
        let (band, _) = means
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        println!("peak band {band} at {:.1} Hz", spec.band_freqs[band]);
    }
    Ok(())
}

fn read_synth_spec(path: &Path) -> CliResult<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    toml::from_str(&text).map_err(|e| {
        Failure::from(Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    })
}

fn synth(spec: &SynthSpec, out: &Path) -> CliResult {
    let tracks = synthesize(spec)?;
    for t in &tracks {
        write_wav(&out.join(format!("{}.wav", t.id)), &t.clip)?;
        write_note_list(&out.join(format!("{}.tsv", t.id)), &t.notes)?;
    }
    let settings = toml::to_string(spec).expect("synth settings serialize");
    write_atomic(&out.join("synth.toml"), settings.as_bytes())?;
    println!(
        "wrote {} tracks of {:.1} s at {} Hz to {}",
        tracks.len(),
        spec.duration,
        spec.sample_rate,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_command(
    config: &Path,
    data: &Path,
    folds: &str,
    out: &Path,
    split: Option<&Path>,
    overfit: bool,
    resume: bool,
    strict: bool,
    jobs: Option<usize>,
) -> CliResult {
    let mut cfg = TrainConfig::read(config)?;
    if let Some(n) = jobs {
        cfg.train.workers = n;
    }
    let corpus = Corpus::open(data, split, overfit)?;
    let folds = parse_folds(folds, corpus.n_folds())?;
    let tracks = corpus.load(&cfg.representation, Some(&out.join("cache")))?;
    let bins = tracks[0].spectrogram.n_bands();
    if bins != cfg.model.input_bins {
        eprintln!(
            "note: model input_bins {} replaced by the representation's {bins} bands",
            cfg.model.input_bins
        );
        cfg.model.input_bins = bins;
    }
    cfg.validate()?;
    let fold_data = corpus.fold_data(&folds, &tracks)?;
    let outcomes = train(&cfg, &fold_data, Some(out), resume)?;

    let mut table = String::from("fold,status,best_epoch,P,R,F1,train_F1\n");
    println!(
        "{:<5} {:<10} {:>5} {:>7} {:>7} {:>7} {:>9}",
        "fold", "status", "best", "P", "R", "F1", "train F1"
    );
    let mut valid = Vec::new();
    let mut failed = false;
    for (o, fd) in outcomes.iter().zip(&fold_data) {
        let r = &o.record;
        let m = r.final_valid.unwrap_or(r.best_valid);
        let train_f1 = evaluate(
            &o.network,
            &fd.train,
            cfg.model.context(),
            cfg.train.batch_size,
            cfg.train.averaging,
        )?
        .f1;
        let best = r.best_epoch.map_or("init".to_string(), |e| e.to_string());
        let status = r.status.label();
        failed |= r.status.is_failed();
        println!(
            "{:<5} {:<10} {:>5} {:>7.2} {:>7.2} {:>7.2} {:>9.2}",
            r.fold,
            status,
            best,
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1,
            100.0 * train_f1
        );
        table.push_str(&format!(
            "{},{status},{best},{},{},{},{train_f1}\n",
            r.fold, m.precision, m.recall, m.f1
        ));
        valid.push(m);
    }
    let s = aggregate_folds(&valid)?;
    println!(
        "{:<5} {:<10} {:>5} {:>7.2} {:>7.2} {:>7.2}",
        "mean",
        "",
        "",
        100.0 * s.precision,
        100.0 * s.recall,
        100.0 * s.f1
    );
    write_atomic(&run_dir(out, &cfg).join("summary.csv"), table.as_bytes())?;
    println!("records and checkpoints in {}", run_dir(out, &cfg).display());
    if failed && strict {
        return Err(Failure::runtime("at least one fold diverged"));
    }
    Ok(())
}

fn eval_command(
    checkpoint: &Path,
    data: &Path,
    split: Option<&Path>,
    fold: Option<usize>,
    set: TrackSet,
    mode: AveragingMode,
    out: Option<&Path>,
) -> CliResult {
    let (net, meta) = load_network(checkpoint)?;
    let corpus = Corpus::open(data, split, false)?;
    let tracks = corpus.load(&meta.representation, None)?;
    let chosen = match fold {
        Some(k) => corpus.select(&corpus.fold_ids(k, set.name(), &tracks)?, &tracks)?,
        None => tracks.iter().collect(),
    };
    let ds = frame_dataset(&chosen)?;
    let probs = predict(&net, &ds, meta.model.context(), framewise::data::DEFAULT_BATCH_SIZE)?;
    let preds: Vec<_> = probs.iter().map(threshold).collect();
    let fold_id = fold.unwrap_or(meta.fold);
    let report = MetricsReport::from_tracks(
        chosen
            .iter()
            .zip(&preds)
            .map(|(t, p)| (fold_id, t.id.as_str(), p, &t.roll.frames)),
        mode,
    )?;
    print!("{}", report.to_text());
    if let Some(path) = out {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    Ok(())
}
