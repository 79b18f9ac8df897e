use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::space::{Configuration, DimKind, Dimension, Level, ParamSpace};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Diverged,
}

impl TrialStatus {
    pub fn name(self) -> &'static str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config_hash: String,
    pub config: Configuration,
    /// Validation F-measure in [0, 1].
    pub score: f64,
    pub status: TrialStatus,
}

/// What happens to diverged trials when fitting the forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergedPolicy {
    #[default]
    Exclude,
    /// Enter them with the lowest score among the successful trials.
    WorstScore,
}

/// Inputs for the forest and the number of trials left out.
pub fn training_set(trials: &[Trial], policy: DivergedPolicy) -> (Vec<Configuration>, Vec<f64>, usize) {
    let worst = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .map(|t| t.score)
        .fold(f64::INFINITY, f64::min);
    let worst = if worst.is_finite() { worst } else { 0.0 };
    let (mut x, mut y, mut excluded) = (Vec::new(), Vec::new(), 0);
    for t in trials {
        match (t.status, policy) {
            (TrialStatus::Ok, _) => {
                x.push(t.config.clone());
                y.push(t.score);
            }
            (TrialStatus::Diverged, DivergedPolicy::WorstScore) => {
                x.push(t.config.clone());
                y.push(worst);
            }
            (TrialStatus::Diverged, DivergedPolicy::Exclude) => excluded += 1,
        }
    }
    (x, y, excluded)
}

fn header(space: &ParamSpace) -> Vec<String> {
    let mut h = vec!["config_hash".to_string()];
    h.extend(space.names().iter().map(|s| s.to_string()));
    h.extend(["score".to_string(), "status".to_string()]);
    h
}

fn render(space: &ParamSpace, trials: &[Trial]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidValue(format!("ledger row: {e}"));
    w.write_record(header(space)).map_err(csv_err)?;
    for t in trials {
        let mut row = vec![t.config_hash.clone()];
        row.extend(space.labels(&t.config));
        row.extend([t.score.to_string(), t.status.name().to_string()]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::InvalidValue(e.to_string()))
}

/// Rows read from a ledger and the count of rows that had to be skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerContents {
    pub trials: Vec<Trial>,
    pub skipped: usize,
}

fn parse_row(space: &ParamSpace, rec: &csv::StringRecord) -> Option<Trial> {
    let d = space.len();
    if rec.len() != d + 3 {
        return None;
    }
    let labels: Vec<&str> = (1..=d).map(|i| &rec[i]).collect();
    let config = space.parse_labels(&labels).ok()?;
    let score: f64 = rec[d + 1].parse().ok()?;
    if !(0.0..=1.0).contains(&score) {
        return None;
    }
    let status = match &rec[d + 2] {
        "ok" => TrialStatus::Ok,
        "diverged" => TrialStatus::Diverged,
        _ => return None,
    };
    let config_hash = rec[0].to_string();
    (!config_hash.is_empty()).then_some(Trial {
        config_hash,
        config,
        score,
        status,
    })
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads the trials of a ledger written for `space`. Malformed rows are
/// skipped and counted; a header that does not match the space is an error.
pub fn read_ledger(path: &Path, space: &ParamSpace) -> Result<LedgerContents> {
    let mut r = reader(path)?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if found != header(space) {
        return Err(Error::format(path, format!("header {found:?} does not match the study space")));
    }
    let mut out = LedgerContents {
        trials: Vec::new(),
        skipped: 0,
    };
    for rec in r.records() {
        match rec.ok().and_then(|rec| parse_row(space, &rec)) {
            Some(t) => out.trials.push(t),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Rebuilds a space from a ledger alone: one dimension per parameter
/// column holding the values that occur in it. Numeric columns become
/// ordered dimensions (log-ordered when named `learning_rate`).
pub fn infer_space(path: &Path) -> Result<ParamSpace> {
    let mut r = reader(path)?;
    let h: Vec<String> = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if h.len() < 4 || h[0] != "config_hash" || h[h.len() - 2] != "score" || h[h.len() - 1] != "status" {
        return Err(Error::format(path, "not a trials ledger"));
    }
    let names = &h[1..h.len() - 2];
    let mut values: Vec<BTreeSet<String>> = vec![BTreeSet::new(); names.len()];
    for rec in r.records().flatten() {
        if rec.len() == h.len() {
            for (i, set) in values.iter_mut().enumerate() {
                set.insert(rec[i + 1].to_string());
            }
        }
    }
    let dims = names
        .iter()
        .zip(values)
        .map(|(name, set)| {
            let nums: Option<Vec<f64>> = set.iter().map(|v| v.parse::<f64>().ok()).collect();
            match nums {
                Some(mut xs) => {
                    xs.sort_by(f64::total_cmp);
                    let kind = if name == "learning_rate" && xs.iter().all(|&x| x > 0.0) {
                        DimKind::LogOrdered
                    } else {
                        DimKind::Ordered
                    };
                    Dimension::new(name, kind, xs.into_iter().map(Level::Num).collect())
                }
                None => {
                    let levels = set
                        .into_iter()
                        .map(|v| match v.as_str() {
                            "true" => Level::Bool(true),
                            "false" => Level::Bool(false),
                            _ => Level::Text(v),
                        })
                        .collect();
                    Dimension::new(name, DimKind::Categorical, levels)
                }
            }
        })
        .collect();
    ParamSpace::new(dims).map_err(|e| Error::format(path, e.to_string()))
}

/// Appends trials to the ledger at `path`, creating it if needed. The file
/// is rewritten atomically, so an interrupted append leaves the previous
/// version intact.
pub fn append_trials(path: &Path, space: &ParamSpace, trials: &[Trial]) -> Result<()> {
    let mut bytes = if path.is_file() {
        read_ledger(path, space)?;
        std::fs::read(path).map_err(|e| Error::io(path, e))?
    } else {
        render(space, &[])?
    };
    let rows = render(space, trials)?;
    let body_start = rows.iter().position(|&b| b == b'\n').map_or(rows.len(), |p| p + 1);
    if bytes.last().is_some_and(|&b| b != b'\n') {
        bytes.push(b'\n');
    }
    bytes.extend_from_slice(&rows[body_start..]);
    write_atomic(path, &bytes)
}

/// Hashes already present in a ledger, for resuming a study.
pub fn recorded_hashes(path: &Path, space: &ParamSpace) -> Result<HashSet<String>> {
    if !path.is_file() {
        return Ok(HashSet::new());
    }
    Ok(read_ledger(path, space)?.trials.into_iter().map(|t| t.config_hash).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(space: &ParamSpace, c: Configuration, score: f64, status: TrialStatus) -> Trial {
        Trial {
            config_hash: format!("h{}", space.labels(&c).join("-")),
            config: c,
            score,
            status,
        }
    }

    #[test]
    fn ledger_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        let space = ParamSpace::full();
        let draws = space.sample_random(5, 3).unwrap();
        let trials: Vec<Trial> = draws
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let st = if i == 2 { TrialStatus::Diverged } else { TrialStatus::Ok };
                trial(&space, c, 0.1 * i as f64, st)
            })
            .collect();
        append_trials(&path, &space, &trials[..2]).unwrap();
        append_trials(&path, &space, &trials[2..]).unwrap();
        let back = read_ledger(&path, &space).unwrap();
        assert_eq!(back.skipped, 0);
        assert_eq!(back.trials, trials);
        assert_eq!(recorded_hashes(&path, &space).unwrap().len(), 5);
    }

    #[test]
    fn corrupt_rows_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        let space = ParamSpace::new(vec![Dimension::new("a", DimKind::Ordered, vec![Level::Num(1.0), Level::Num(2.0)])])
            .unwrap();
        std::fs::write(
            &path,
            "config_hash,a,score,status\nx,1,0.5,ok\ny,3,0.5,ok\nz,2,abc,ok\nw,2,0.5\nv,2,1.5,ok\nu,2,0.25,diverged\n",
        )
        .unwrap();
        let back = read_ledger(&path, &space).unwrap();
        assert_eq!(back.trials.len(), 2);
        assert_eq!(back.skipped, 4);
        let inferred = infer_space(&path).unwrap();
        assert_eq!(inferred.dimensions[0].labels(), vec!["1", "2", "3"]);
        std::fs::write(&path, "config_hash,b,score,status\n").unwrap();
        assert!(read_ledger(&path, &space).is_err());
    }

    #[test]
    fn diverged_policies() {
        let space = ParamSpace::new(vec![Dimension::new("a", DimKind::Ordered, vec![Level::Num(1.0), Level::Num(2.0)])])
            .unwrap();
        let trials = vec![
            trial(&space, vec![0], 0.8, TrialStatus::Ok),
            trial(&space, vec![1], 0.4, TrialStatus::Ok),
            trial(&space, vec![1], 0.0, TrialStatus::Diverged),
        ];
        let (x, _, excluded) = training_set(&trials, DivergedPolicy::Exclude);
        assert_eq!((x.len(), excluded), (2, 1));
        let (x, y, excluded) = training_set(&trials, DivergedPolicy::WorstScore);
        assert_eq!((x.len(), excluded), (3, 0));
        assert_eq!(y[2], 0.4);
    }
}
