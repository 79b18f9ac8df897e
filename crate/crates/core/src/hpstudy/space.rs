use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{GridRule, SpecConfig, SpecType, GRID_BANDS_PER_OCTAVE, GRID_SAMPLE_RATES, GRID_ZERO_PAD};
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, Schedule};
use crate::train::TrainConfig;

/// Most values a single dimension may declare.
pub const MAX_LEVELS: usize = 64;

/// Halving period used when a configuration switches the scheduler on.
pub const SCHEDULE_PERIOD: u32 = 10;

/// One declared value of a dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Bool(bool),
    Num(f64),
    Text(String),
}

impl Level {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Level::Num(x) => Some(*x),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Bool(b) => write!(f, "{b}"),
            Level::Num(x) => write!(f, "{x}"),
            Level::Text(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Level {
    fn from(s: &str) -> Self {
        Level::Text(s.to_string())
    }
}

impl From<f64> for Level {
    fn from(x: f64) -> Self {
        Level::Num(x)
    }
}

impl From<bool> for Level {
    fn from(b: bool) -> Self {
        Level::Bool(b)
    }
}

/// How tree splits treat a dimension. Ordered dimensions split on
/// thresholds over their (ascending) declared values; categorical ones on
/// arbitrary subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    #[default]
    Categorical,
    Ordered,
    /// Ordered, with values read on a logarithmic scale.
    LogOrdered,
}

/// A dimension only matters while an earlier dimension takes one of `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub dimension: String,
    pub values: Vec<Level>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    #[serde(default)]
    pub kind: DimKind,
    pub values: Vec<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub only_if: Option<Condition>,
}

impl Dimension {
    pub fn new(name: &str, kind: DimKind, values: Vec<Level>) -> Self {
        Self {
            name: name.to_string(),
            kind,
            values,
            only_if: None,
        }
    }

    fn when(mut self, dimension: &str, values: &[&str]) -> Self {
        self.only_if = Some(Condition {
            dimension: dimension.to_string(),
            values: values.iter().map(|&v| Level::from(v)).collect(),
        });
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_ordered(&self) -> bool {
        self.kind != DimKind::Categorical
    }

    pub fn labels(&self) -> Vec<String> {
        self.values.iter().map(Level::to_string).collect()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.values.iter().position(|v| v.to_string() == label)
    }
}

/// A point of a space: one level index per dimension.
pub type Configuration = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpace {
    #[serde(rename = "dimension")]
    pub dimensions: Vec<Dimension>,
}

fn nums(xs: &[f64]) -> Vec<Level> {
    xs.iter().map(|&x| Level::Num(x)).collect()
}

fn texts(xs: &[&str]) -> Vec<Level> {
    xs.iter().map(|&x| Level::from(x)).collect()
}

fn on_off() -> Vec<Level> {
    vec![Level::Bool(false), Level::Bool(true)]
}

impl ParamSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self> {
        let s = Self { dimensions };
        s.validate()?;
        Ok(s)
    }

    /// The representation grid: spectrogram type, sample rate, zero padding,
    /// circular shift, bands per octave and filter normalization, each active
    /// only for the types it applies to.
    pub fn representation(rule: GridRule) -> Self {
        let types: Vec<&str> = match rule {
            GridRule::StftFamily => vec!["S", "LS", "LM"],
            GridRule::AllTypes => SpecType::ALL.iter().map(|t| t.name()).collect(),
        };
        let stft: Vec<&str> = types.iter().copied().filter(|t| *t != "CQT").collect();
        let banded: Vec<&str> = types.iter().copied().filter(|t| *t != "S").collect();
        let dims = vec![
            Dimension::new("spec_type", DimKind::Categorical, texts(&types)),
            Dimension::new(
                "sample_rate",
                DimKind::Ordered,
                nums(&GRID_SAMPLE_RATES.map(f64::from)),
            ),
            Dimension::new("zero_pad", DimKind::Ordered, nums(&GRID_ZERO_PAD.map(f64::from))).when("spec_type", &stft),
            Dimension::new("circular_shift", DimKind::Categorical, on_off()).when("spec_type", &stft),
            Dimension::new(
                "bands_per_octave",
                DimKind::Ordered,
                nums(&GRID_BANDS_PER_OCTAVE.map(f64::from)),
            )
            .when("spec_type", &banded),
            Dimension::new("area_normed_filters", DimKind::Categorical, vec![Level::Bool(true), Level::Bool(false)])
                .when("spec_type", &["LS", "LM"]),
        ];
        Self { dimensions: dims }
    }

    /// The training hyper-parameters varied in the random study.
    pub fn training() -> Self {
        let dims = vec![
            Dimension::new(
                "optimizer",
                DimKind::Categorical,
                OptimizerKind::ALL.iter().map(|k| Level::from(k.name())).collect(),
            ),
            Dimension::new(
                "learning_rate",
                DimKind::LogOrdered,
                nums(&[0.001, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 50.0, 100.0]),
            ),
            Dimension::new("momentum", DimKind::Ordered, nums(&[0.0, 0.7, 0.8, 0.9])),
            Dimension::new("scheduler", DimKind::Categorical, on_off()),
            Dimension::new("batch_norm", DimKind::Categorical, on_off()),
            Dimension::new("dropout", DimKind::Ordered, nums(&[0.0, 0.1, 0.3, 0.5])),
            Dimension::new("l1", DimKind::Ordered, nums(&[0.0, 1e-9, 1e-8, 1e-7])),
            Dimension::new("l2", DimKind::Ordered, nums(&[0.0, 1e-9, 1e-8, 1e-7])),
        ];
        Self { dimensions: dims }
    }

    /// Representation grid (all four types) joined with the training space.
    pub fn full() -> Self {
        let mut s = Self::representation(GridRule::AllTypes);
        s.dimensions.extend(Self::training().dimensions);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(Error::Config("parameter space has no dimensions".into()));
        }
        let mut names = HashSet::new();
        for (i, d) in self.dimensions.iter().enumerate() {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("dimension {} declared twice", d.name)));
            }
            if d.values.is_empty() {
                return Err(Error::Config(format!("dimension {} has no values", d.name)));
            }
            if d.values.len() > MAX_LEVELS {
                return Err(Error::Config(format!(
                    "dimension {} has {} values, at most {MAX_LEVELS} are supported",
                    d.name,
                    d.values.len()
                )));
            }
            let labels = d.labels();
            if labels.iter().collect::<HashSet<_>>().len() != labels.len() {
                return Err(Error::Config(format!("dimension {} repeats a value", d.name)));
            }
            if d.is_ordered() {
                let xs: Option<Vec<f64>> = d.values.iter().map(Level::as_f64).collect();
                let xs = xs.ok_or_else(|| Error::Config(format!("ordered dimension {} needs numeric values", d.name)))?;
                if xs.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Config(format!("values of ordered dimension {} must ascend", d.name)));
                }
                if d.kind == DimKind::LogOrdered && xs.iter().any(|&x| x <= 0.0) {
                    return Err(Error::Config(format!("log-ordered dimension {} needs positive values", d.name)));
                }
            }
            if let Some(c) = &d.only_if {
                let j = self.dimensions[..i]
                    .iter()
                    .position(|p| p.name == c.dimension)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "dimension {} depends on {}, which must be declared before it",
                            d.name, c.dimension
                        ))
                    })?;
                for v in &c.values {
                    if self.dimensions[j].position(&v.to_string()).is_none() {
                        return Err(Error::Config(format!(
                            "condition of {} names unknown value {v} of {}",
                            d.name, c.dimension
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.dimensions.iter().map(|d| d.name.as_str()).collect()
    }

    /// Level counts per dimension.
    pub fn cardinalities(&self) -> Vec<usize> {
        self.dimensions.iter().map(Dimension::len).collect()
    }

    pub fn contains(&self, config: &[usize]) -> bool {
        config.len() == self.len() && config.iter().zip(&self.dimensions).all(|(&l, d)| l < d.len())
    }

    /// Whether dimension `d` influences `config`.
    pub fn is_active(&self, config: &[usize], d: usize) -> bool {
        match &self.dimensions[d].only_if {
            None => true,
            Some(c) => {
                let j = self.index(&c.dimension).expect("validated condition");
                let label = self.dimensions[j].values[config[j]].to_string();
                c.values.iter().any(|v| v.to_string() == label)
            }
        }
    }

    pub fn labels(&self, config: &[usize]) -> Vec<String> {
        config
            .iter()
            .zip(&self.dimensions)
            .map(|(&l, d)| d.values[l].to_string())
            .collect()
    }

    pub fn parse_labels<S: AsRef<str>>(&self, labels: &[S]) -> Result<Configuration> {
        if labels.len() != self.len() {
            return Err(Error::Config(format!(
                "expected {} values, got {}",
                self.len(),
                labels.len()
            )));
        }
        labels
            .iter()
            .zip(&self.dimensions)
            .map(|(s, d)| {
                d.position(s.as_ref())
                    .ok_or_else(|| Error::Config(format!("{} is not a value of {}", s.as_ref(), d.name)))
            })
            .collect()
    }

    /// Every distinct configuration, varying each dimension only where it
    /// is active. Inactive dimensions stay at their first value.
    pub fn enumerate_grid(&self) -> Result<Vec<Configuration>> {
        self.validate()?;
        let mut out = Vec::new();
        let mut current = vec![0; self.len()];
        self.expand(0, &mut current, &mut out);
        Ok(out)
    }

    fn expand(&self, d: usize, current: &mut Configuration, out: &mut Vec<Configuration>) {
        if d == self.len() {
            out.push(current.clone());
            return;
        }
        if !self.is_active(current, d) {
            current[d] = 0;
            self.expand(d + 1, current, out);
            return;
        }
        for l in 0..self.dimensions[d].len() {
            current[d] = l;
            self.expand(d + 1, current, out);
        }
    }

    /// `n` independent draws, uniform over every dimension's values.
    pub fn sample_random(&self, n: usize, seed: u64) -> Result<Vec<Configuration>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Config("random study needs at least one draw".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| self.dimensions.iter().map(|d| rng.gen_range(0..d.len())).collect())
            .collect())
    }

    /// Reads a space from TOML, or JSON when the extension is `.json`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let s: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        };
        s.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("space serializes")
    }

    /// The run configuration for `config`: `template` with every active
    /// dimension applied. Input bins are left to the caller, since they
    /// depend on the computed representation.
    pub fn apply(&self, config: &[usize], template: &TrainConfig) -> Result<TrainConfig> {
        if !self.contains(config) {
            return Err(Error::Config("configuration does not belong to the space".into()));
        }
        let mut cfg = template.clone();
        let level = |name: &str| self.index(name).map(|d| &self.dimensions[d].values[config[d]]);
        let spec_type = match level("spec_type") {
            Some(v) => v.to_string().parse::<SpecType>()?,
            None => cfg.representation.spec_type,
        };
        let sample_rate = match level("sample_rate") {
            Some(v) => num(v, "sample_rate")? as u32,
            None => cfg.representation.sample_rate,
        };
        if spec_type != cfg.representation.spec_type || sample_rate != cfg.representation.sample_rate {
            cfg.representation = SpecConfig::new(spec_type, sample_rate);
        }
        for (d, dim) in self.dimensions.iter().enumerate() {
            if !self.is_active(config, d) {
                continue;
            }
            let v = &dim.values[config[d]];
            match dim.name.as_str() {
                "spec_type" | "sample_rate" => {}
                "zero_pad" => cfg.representation.zero_pad = num(v, &dim.name)? as u8,
                "circular_shift" => cfg.representation.circular_shift = flag(v, &dim.name)?,
                "bands_per_octave" => cfg.representation.bands_per_octave = num(v, &dim.name)? as u32,
                "area_normed_filters" => cfg.representation.area_normed_filters = flag(v, &dim.name)?,
                "model" => cfg.model.kind = v.to_string().parse()?,
                "optimizer" => cfg.optimizer.kind = v.to_string().parse()?,
                "learning_rate" => cfg.optimizer.learning_rate = num(v, &dim.name)?,
                "momentum" => cfg.optimizer.momentum = num(v, &dim.name)?,
                "scheduler" => {
                    cfg.schedule = if flag(v, &dim.name)? {
                        Schedule::step_multiply(0.5, SCHEDULE_PERIOD)
                    } else {
                        Schedule::constant()
                    }
                }
                "batch_norm" => cfg.model.batch_norm = flag(v, &dim.name)?,
                "dropout" => {
                    let p = num(v, &dim.name)?;
                    cfg.model.dropout = (p > 0.0).then_some(p);
                }
                "l1" => cfg.train.l1 = num(v, &dim.name)?,
                "l2" => cfg.train.l2 = num(v, &dim.name)?,
                "epochs" => cfg.train.epochs = num(v, &dim.name)? as u32,
                "batch_size" => cfg.train.batch_size = num(v, &dim.name)? as usize,
                other => return Err(Error::Config(format!("dimension {other} does not map to a run setting"))),
            }
        }
        cfg.representation.validate()?;
        cfg.optimizer.validate()?;
        Ok(cfg)
    }
}

fn num(v: &Level, name: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{name} needs a numeric value, got {v}")))
}

fn flag(v: &Level, name: &str) -> Result<bool> {
    match v {
        Level::Bool(b) => Ok(*b),
        _ => Err(Error::Config(format!("{name} needs true or false, got {v}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::representation_grid;
    use crate::zoo::ModelKind;

    #[test]
    fn representation_grid_counts() {
        let g = ParamSpace::representation(GridRule::StftFamily).enumerate_grid().unwrap();
        assert_eq!(g.len(), 204);
        let all = ParamSpace::representation(GridRule::AllTypes).enumerate_grid().unwrap();
        assert_eq!(all.len(), 212);
        let unique: HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 212);
    }

    #[test]
    fn grid_matches_front_end_enumeration() {
        let space = ParamSpace::representation(GridRule::StftFamily);
        let template = TrainConfig::recipe(ModelKind::LogReg);
        let mut ours: Vec<String> = space
            .enumerate_grid()
            .unwrap()
            .iter()
            .map(|c| space.apply(c, &template).unwrap().representation.canonical().config_hash())
            .collect();
        let mut theirs: Vec<String> = representation_grid(GridRule::StftFamily)
            .iter()
            .map(|c| c.canonical().config_hash())
            .collect();
        ours.sort();
        theirs.sort();
        assert_eq!(ours, theirs);
    }

    #[test]
    fn small_grids_and_errors() {
        let s = ParamSpace::new(vec![Dimension::new("a", DimKind::Categorical, texts(&["x", "y"]))]).unwrap();
        assert_eq!(s.enumerate_grid().unwrap(), vec![vec![0], vec![1]]);
        assert!(ParamSpace { dimensions: vec![] }.enumerate_grid().is_err());
        let dup = Dimension::new("a", DimKind::Categorical, texts(&["x", "x"]));
        assert!(ParamSpace::new(vec![dup]).is_err());
        let unsorted = Dimension::new("a", DimKind::Ordered, nums(&[2.0, 1.0]));
        assert!(ParamSpace::new(vec![unsorted]).is_err());
        let dangling = Dimension::new("a", DimKind::Categorical, texts(&["x"])).when("b", &["y"]);
        assert!(ParamSpace::new(vec![dangling]).is_err());
    }

    #[test]
    fn random_draws_are_valid_and_seeded() {
        let space = ParamSpace::full();
        let template = TrainConfig::recipe(ModelKind::Shallow);
        let draws = space.sample_random(3000, 1).unwrap();
        assert_eq!(draws.len(), 3000);
        for c in &draws {
            assert!(space.contains(c));
            space.apply(c, &template).unwrap().validate().unwrap();
        }
        assert_eq!(space.sample_random(3000, 1).unwrap(), draws);
        assert_ne!(space.sample_random(3000, 2).unwrap(), draws);
        assert_eq!(space.sample_random(1, 5).unwrap().len(), 1);
        assert!(space.sample_random(0, 5).is_err());
    }

    #[test]
    fn apply_sets_run_fields() {
        let space = ParamSpace::full();
        let labels: Vec<String> = space
            .names()
            .iter()
            .map(|n| match *n {
                "spec_type" => "LS",
                "sample_rate" => "22050",
                "zero_pad" => "2",
                "circular_shift" => "true",
                "bands_per_octave" => "24",
                "area_normed_filters" => "false",
                "optimizer" => "nesterov",
                "learning_rate" => "0.5",
                "momentum" => "0.8",
                "scheduler" => "true",
                "batch_norm" => "true",
                "dropout" => "0.3",
                "l1" => "0.00000001",
                "l2" => "0",
                other => panic!("unexpected dimension {other}"),
            })
            .map(String::from)
            .collect();
        let config = space.parse_labels(&labels).unwrap();
        assert_eq!(space.labels(&config), labels);
        let cfg = space.apply(&config, &TrainConfig::recipe(ModelKind::Shallow)).unwrap();
        let r = &cfg.representation;
        assert_eq!((r.spec_type, r.sample_rate, r.zero_pad), (SpecType::LS, 22050, 2));
        assert!(r.circular_shift && !r.area_normed_filters);
        assert_eq!(r.bands_per_octave, 24);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Nesterov);
        assert_eq!((cfg.optimizer.learning_rate, cfg.optimizer.momentum), (0.5, 0.8));
        assert_eq!(cfg.schedule, Schedule::step_multiply(0.5, SCHEDULE_PERIOD));
        assert!(cfg.model.batch_norm);
        assert_eq!(cfg.model.dropout, Some(0.3));
        assert_eq!((cfg.train.l1, cfg.train.l2), (1e-8, 0.0));
    }

    #[test]
    fn space_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let space = ParamSpace::full();
        let path = dir.path().join("space.toml");
        std::fs::write(&path, space.to_toml()).unwrap();
        assert_eq!(ParamSpace::read(&path).unwrap(), space);
    }
}
