use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use framewise::data::{custom_split, discover_tracks, frame_dataset, load_track, SplitConfig, Track, TrackInfo};
use framewise::dsp::SpecConfig;
use framewise::train::FoldData;
use framewise::{Error, Result};
use rayon::prelude::*;

/// Split file picked up from the data directory when none is given.
pub const SPLIT_FILE: &str = "split.toml";
pub const DEFAULT_INSTRUMENT: &str = "unknown";
const DEFAULT_FOLDS: usize = 4;
const DEFAULT_VALID_FRACTION: f64 = 0.2;

/// Which tracks train and validate each fold.
pub enum Plan {
    Split(SplitConfig),
    /// Every track trains and validates a single fold 0.
    Overfit,
}

pub struct Corpus {
    pub dir: PathBuf,
    pub plan: Plan,
    instruments: BTreeMap<String, String>,
}

impl Corpus {
    /// Resolves the split: an explicit file, then `split.toml` in the data
    /// directory, then a seeded proportional split over the found tracks.
    pub fn open(dir: &Path, split: Option<&Path>, overfit: bool) -> Result<Self> {
        let sources = discover_tracks(dir)?;
        let default_split = dir.join(SPLIT_FILE);
        let split = match split {
            Some(p) => Some(SplitConfig::read(p)?),
            None if default_split.is_file() => Some(SplitConfig::read(&default_split)?),
            None => None,
        };
        let instruments = split.as_ref().map(|s| s.instruments.clone()).unwrap_or_default();
        let plan = match (overfit, split) {
            (true, _) => Plan::Overfit,
            (false, Some(s)) => Plan::Split(s),
            (false, None) => {
                let infos: Vec<TrackInfo> = sources.iter().map(|s| TrackInfo::new(&s.id, DEFAULT_INSTRUMENT)).collect();
                let folds = DEFAULT_FOLDS.min(infos.len());
                eprintln!(
                    "no split file; using a {folds}-fold proportional split over {} tracks",
                    infos.len()
                );
                Plan::Split(custom_split(&infos, folds, DEFAULT_VALID_FRACTION, 0)?)
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            plan,
            instruments,
        })
    }

    pub fn n_folds(&self) -> usize {
        match &self.plan {
            Plan::Split(s) => s.n_folds(),
            Plan::Overfit => 1,
        }
    }

    /// Computes (or reads from `cache`) every annotated track of the
    /// directory under one representation.
    pub fn load(&self, rep: &SpecConfig, cache: Option<&Path>) -> Result<Vec<Track>> {
        discover_tracks(&self.dir)?
            .par_iter()
            .map(|src| {
                let inst = self.instruments.get(&src.id).map_or(DEFAULT_INSTRUMENT, String::as_str);
                load_track(src, inst, rep, cache)
            })
            .collect()
    }

    /// Track ids of one fold's `set` ("train", "valid" or "test").
    pub fn fold_ids(&self, fold: usize, set: &str, tracks: &[Track]) -> Result<Vec<String>> {
        let all = || tracks.iter().map(|t| t.id.clone()).collect();
        match &self.plan {
            Plan::Overfit if fold == 0 => Ok(all()),
            Plan::Overfit => Err(Error::Split(format!("overfit mode has only fold 0, not {fold}"))),
            Plan::Split(s) => {
                let f = framewise::data::load_split(s, fold)?;
                match set {
                    "train" => Ok(f.train),
                    "valid" => Ok(f.valid),
                    "test" => Ok(f.test),
                    other => Err(Error::Config(format!("unknown track set {other}"))),
                }
            }
        }
    }

    pub fn select<'a>(&self, ids: &[String], tracks: &'a [Track]) -> Result<Vec<&'a Track>> {
        ids.iter()
            .map(|id| {
                tracks
                    .iter()
                    .find(|t| &t.id == id)
                    .ok_or_else(|| Error::Split(format!("track {id} is in the split but not in {}", self.dir.display())))
            })
            .collect()
    }

    pub fn fold_data(&self, folds: &[usize], tracks: &[Track]) -> Result<Vec<FoldData>> {
        folds
            .iter()
            .map(|&k| {
                let train = frame_dataset(&self.select(&self.fold_ids(k, "train", tracks)?, tracks)?)?;
                let valid = frame_dataset(&self.select(&self.fold_ids(k, "valid", tracks)?, tracks)?)?;
                Ok(FoldData { fold: k, train, valid })
            })
            .collect()
    }
}

/// Parses `0,2,3` or `all`.
pub fn parse_folds(spec: &str, n_folds: usize) -> Result<Vec<usize>> {
    if spec.trim() == "all" {
        return Ok((0..n_folds).collect());
    }
    let folds: Vec<usize> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("fold list entry '{s}' is not a number")))
        })
        .collect::<Result<_>>()?;
    if let Some(bad) = folds.iter().find(|&&k| k >= n_folds) {
        return Err(Error::Config(format!("fold {bad} requested but the split has {n_folds} folds")));
    }
    if folds.is_empty() {
        return Err(Error::Config("empty fold list".into()));
    }
    Ok(folds)
}
