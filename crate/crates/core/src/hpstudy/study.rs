use std::path::Path;

use rayon::prelude::*;

use super::fanova::{importance, ImportanceReport};
use super::forest::{Forest, ForestParams};
use super::ledger::{append_trials, recorded_hashes, training_set, DivergedPolicy, Trial, TrialStatus};
use super::space::{Configuration, ParamSpace};
use crate::error::{Error, Result};
use crate::io::content_hash;
use crate::train::{TrainConfig, TrainOutcome};

/// Ledger key of a trial: the template's hash plus the trial's values.
pub fn trial_hash(template: &TrainConfig, space: &ParamSpace, config: &[usize]) -> String {
    content_hash(&(template.config_hash(), space.names(), space.labels(config)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub score: f64,
    pub diverged: bool,
}

/// Mean final validation F-measure over folds; diverged if any fold was.
pub fn score_folds(outcomes: &[TrainOutcome]) -> TrialOutcome {
    let n = outcomes.len().max(1) as f64;
    let score = outcomes
        .iter()
        .map(|o| o.record.final_valid.unwrap_or(o.record.best_valid).f1)
        .sum::<f64>()
        / n;
    TrialOutcome {
        score,
        diverged: outcomes.iter().any(|o| o.record.status.is_failed()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyProgress {
    pub run: usize,
    /// Configurations already present in the ledger.
    pub skipped: usize,
}

/// Evaluates every configuration not yet in the ledger, `workers` at a
/// time, appending each finished batch to the ledger through one writer.
pub fn run_study<F>(
    space: &ParamSpace,
    configs: &[Configuration],
    template: &TrainConfig,
    ledger: &Path,
    workers: usize,
    evaluate: F,
) -> Result<StudyProgress>
where
    F: Fn(&Configuration, &TrainConfig) -> Result<TrialOutcome> + Sync,
{
    if workers == 0 {
        return Err(Error::Config("study needs at least one worker".into()));
    }
    let done = recorded_hashes(ledger, space)?;
    let pending: Vec<(String, &Configuration)> = configs
        .iter()
        .map(|c| (trial_hash(template, space, c), c))
        .filter(|(h, _)| !done.contains(h))
        .collect();
    let skipped = configs.len() - pending.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    for chunk in pending.chunks(workers) {
        let trials: Vec<Trial> = pool.install(|| {
            chunk
                .par_iter()
                .map(|(hash, c)| {
                    let cfg = space.apply(c, template)?;
                    let out = evaluate(c, &cfg)?;
                    Ok(Trial {
                        config_hash: hash.clone(),
                        config: (*c).clone(),
                        score: out.score,
                        status: if out.diverged { TrialStatus::Diverged } else { TrialStatus::Ok },
                    })
                })
                .collect::<Result<_>>()
        })?;
        append_trials(ledger, space, &trials)?;
    }
    Ok(StudyProgress {
        run: pending.len(),
        skipped,
    })
}

/// Fits the forest to the trials and decomposes its variance.
pub fn analyze(
    space: &ParamSpace,
    trials: &[Trial],
    policy: DivergedPolicy,
    params: ForestParams,
) -> Result<(Forest, ImportanceReport)> {
    let (x, y, excluded) = training_set(trials, policy);
    let forest = Forest::fit(space, &x, &y, params)?;
    let report = importance(&forest, excluded);
    Ok((forest, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpstudy::ledger::read_ledger;
    use crate::zoo::ModelKind;

    #[test]
    fn study_appends_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = dir.path().join("trials.csv");
        let space = ParamSpace::training();
        let template = TrainConfig::recipe(ModelKind::LogReg);
        let configs = space.sample_random(7, 4).unwrap();
        let eval = |_: &Configuration, cfg: &TrainConfig| {
            Ok(TrialOutcome {
                score: 1.0 / (1.0 + cfg.optimizer.learning_rate),
                diverged: cfg.optimizer.learning_rate >= 50.0,
            })
        };
        let first = run_study(&space, &configs[..4], &template, &ledger, 2, eval).unwrap();
        assert_eq!(first, StudyProgress { run: 4, skipped: 0 });
        let second = run_study(&space, &configs, &template, &ledger, 3, eval).unwrap();
        assert_eq!(second.run + second.skipped, 7);
        assert!(second.skipped >= 4);
        let rows = read_ledger(&ledger, &space).unwrap().trials;
        assert_eq!(rows.len(), second.run + 4);
        for t in &rows {
            let lr = space.apply(&t.config, &template).unwrap().optimizer.learning_rate;
            assert_eq!(t.score, 1.0 / (1.0 + lr));
            assert_eq!(t.status == TrialStatus::Diverged, lr >= 50.0);
        }
    }
}
