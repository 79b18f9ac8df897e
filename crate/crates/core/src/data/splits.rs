use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::derive_seed;

/// Instrument tags that denote recordings of an acoustic piano (the two
/// Disklavier sets of the reference corpus) or a user-supplied `real` tag.
pub const REAL_PIANO_TAGS: [&str; 3] = ["ENSTDkCl", "ENSTDkAm", "real"];

pub const CONFIG_I_SIZES: (usize, usize, usize) = (173, 43, 54);
pub const CONFIG_II_SIZES: (usize, usize, usize) = (180, 30, 60);
pub const DEFAULT_FOLDS: usize = 4;

pub fn is_real_piano(tag: &str) -> bool {
    REAL_PIANO_TAGS.iter().any(|t| t.eq_ignore_ascii_case(tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitName {
    #[serde(rename = "configuration_I")]
    ConfigurationI,
    #[serde(rename = "configuration_II")]
    ConfigurationII,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub id: String,
    pub instrument: String,
}

impl TrackInfo {
    pub fn new(id: impl Into<String>, instrument: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instrument: instrument.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub name: SplitName,
    /// Track id → instrument tag.
    #[serde(default)]
    pub instruments: BTreeMap<String, String>,
    pub folds: Vec<Fold>,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds.is_empty() {
            return Err(Error::Split("split defines no folds".into()));
        }
        for (i, fold) in self.folds.iter().enumerate() {
            let lists = [("train", &fold.train), ("valid", &fold.valid), ("test", &fold.test)];
            let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
            for (name, list) in lists {
                for id in list.iter() {
                    if let Some(prev) = seen.insert(id, name) {
                        return Err(Error::Split(format!(
                            "fold {i}: track '{id}' appears in both {prev} and {name}"
                        )));
                    }
                }
            }
            if fold.train.is_empty() || fold.test.is_empty() {
                return Err(Error::Split(format!("fold {i}: train and test lists must be non-empty")));
            }
            let sizes = (fold.train.len(), fold.valid.len(), fold.test.len());
            let expected = match self.name {
                SplitName::ConfigurationI => Some(CONFIG_I_SIZES),
                SplitName::ConfigurationII => Some(CONFIG_II_SIZES),
                SplitName::Custom => None,
            };
            if let Some(expected) = expected {
                if sizes != expected {
                    return Err(Error::Split(format!(
                        "fold {i}: sizes {sizes:?} do not match the required {expected:?}"
                    )));
                }
            }
            if self.name == SplitName::ConfigurationII {
                for id in &fold.test {
                    match self.instruments.get(id) {
                        Some(tag) if is_real_piano(tag) => {}
                        Some(tag) => {
                            return Err(Error::Split(format!(
                                "fold {i}: test track '{id}' is tagged '{tag}', not a real piano"
                            )))
                        }
                        None => {
                            return Err(Error::Split(format!(
                                "fold {i}: test track '{id}' has no instrument tag"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    /// Every track id referenced by any fold, sorted.
    pub fn all_tracks(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .folds
            .iter()
            .flat_map(|f| f.train.iter().chain(&f.valid).chain(&f.test))
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let cfg: SplitConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(self).expect("split serializes")
        } else {
            toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?
        };
        crate::io::write_atomic(path, text.as_bytes())
    }
}

/// Validated (train, valid, test) lists of one fold.
pub fn load_split(cfg: &SplitConfig, fold: usize) -> Result<Fold> {
    cfg.validate()?;
    cfg.folds.get(fold).cloned().ok_or_else(|| {
        Error::Split(format!("fold {fold} requested but the split has {} folds", cfg.folds.len()))
    })
}

fn shuffled(ids: &[String], seed: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    v.sort();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

fn instrument_map(tracks: &[TrackInfo]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for t in tracks {
        if map.insert(t.id.clone(), t.instrument.clone()).is_some() {
            return Err(Error::Split(format!("duplicate track id '{}'", t.id)));
        }
    }
    Ok(map)
}

/// Cross-validation split with disjoint test sets: each fold tests on its own
/// `sizes.2` tracks and draws `sizes.1` validation and `sizes.0` training
/// tracks from the remainder.
fn rotating_split(
    name: SplitName,
    tracks: &[TrackInfo],
    n_folds: usize,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<SplitConfig> {
    let instruments = instrument_map(tracks)?;
    let (n_train, n_valid, n_test) = sizes;
    if n_folds == 0 || n_folds * n_test > tracks.len() || n_train + n_valid + n_test > tracks.len() {
        return Err(Error::Split(format!(
            "{} tracks cannot host {n_folds} folds of {sizes:?}",
            tracks.len()
        )));
    }
    let ids: Vec<String> = tracks.iter().map(|t| t.id.clone()).collect();
    let order = shuffled(&ids, seed);
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let test: Vec<String> = order[f * n_test..(f + 1) * n_test].to_vec();
        let rest: Vec<String> = order.iter().filter(|id| !test.contains(id)).cloned().collect();
        let rest = shuffled(&rest, derive_seed(seed, &[f as u64]));
        folds.push(Fold {
            valid: rest[..n_valid].to_vec(),
            train: rest[n_valid..n_valid + n_train].to_vec(),
            test,
        });
    }
    let cfg = SplitConfig { name, instruments, folds };
    cfg.validate()?;
    Ok(cfg)
}

/// Four folds of 173 train / 43 valid / 54 test over at least 270 tracks.
pub fn configuration_i(tracks: &[TrackInfo], seed: u64) -> Result<SplitConfig> {
    rotating_split(SplitName::ConfigurationI, tracks, DEFAULT_FOLDS, CONFIG_I_SIZES, seed)
}

/// Four folds training on 180 + 30 synthesized-piano tracks and testing on 60
/// real-piano recordings.
pub fn configuration_ii(tracks: &[TrackInfo], seed: u64) -> Result<SplitConfig> {
    let instruments = instrument_map(tracks)?;
    let (real, synthetic): (Vec<&TrackInfo>, Vec<&TrackInfo>) =
        tracks.iter().partition(|t| is_real_piano(&t.instrument));
    let (n_train, n_valid, n_test) = CONFIG_II_SIZES;
    if real.len() < n_test || synthetic.len() < n_train + n_valid {
        return Err(Error::Split(format!(
            "configuration II needs {n_test} real-piano and {} other tracks, found {} and {}",
            n_train + n_valid,
            real.len(),
            synthetic.len()
        )));
    }
    let real: Vec<String> = real.iter().map(|t| t.id.clone()).collect();
    let synthetic: Vec<String> = synthetic.iter().map(|t| t.id.clone()).collect();
    let folds = (0..DEFAULT_FOLDS)
        .map(|f| {
            let s = derive_seed(seed, &[f as u64]);
            let test = shuffled(&real, s)[..n_test].to_vec();
            let pool = shuffled(&synthetic, derive_seed(s, &[1]));
            Fold {
                valid: pool[..n_valid].to_vec(),
                train: pool[n_valid..n_valid + n_train].to_vec(),
                test,
            }
        })
        .collect();
    let cfg = SplitConfig {
        name: SplitName::ConfigurationII,
        instruments,
        folds,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Proportional split for arbitrary collections: test sets rotate over
/// `n_folds` disjoint chunks, a `valid_fraction` of the rest validates.
pub fn custom_split(tracks: &[TrackInfo], n_folds: usize, valid_fraction: f64, seed: u64) -> Result<SplitConfig> {
    if tracks.len() < 3 || n_folds == 0 || n_folds > tracks.len() {
        return Err(Error::Split(format!(
            "{} tracks are too few for {n_folds} folds",
            tracks.len()
        )));
    }
    let n_test = (tracks.len() / n_folds.max(2)).max(1);
    let rest = tracks.len() - n_test;
    let n_valid = ((rest as f64 * valid_fraction).round() as usize).clamp(usize::from(valid_fraction > 0.0), rest - 1);
    rotating_split(SplitName::Custom, tracks, n_folds, (rest - n_valid, n_valid, n_test), seed)
}
