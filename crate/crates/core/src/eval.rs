//! Framewise precision, recall and F-measure.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

/// Binary decision `p > 0.5`.
pub fn threshold(probs: &Array2<f64>) -> Array2<u8> {
    probs.mapv(|p| u8::from(p > THRESHOLD))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// Counts pooled over all frames before taking ratios.
    #[default]
    Aggregate,
    /// Per-frame ratios averaged over the frames where they are defined.
    PerFrameMean,
}

impl AveragingMode {
    pub fn name(self) -> &'static str {
        match self {
            AveragingMode::Aggregate => "aggregate",
            AveragingMode::PerFrameMean => "per_frame_mean",
        }
    }
}

impl std::str::FromStr for AveragingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregate" => Ok(AveragingMode::Aggregate),
            "per_frame_mean" => Ok(AveragingMode::PerFrameMean),
            _ => Err(Error::Config(format!("unknown averaging mode '{s}'"))),
        }
    }
}

/// Per-frame true positives, false positives and false negatives.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameCounts {
    pub tp: Vec<u32>,
    pub fp: Vec<u32>,
    pub fn_: Vec<u32>,
}

impl FrameCounts {
    pub fn new(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<Self> {
        if pred.dim() != truth.dim() {
            let (a, b) = (pred.dim(), truth.dim());
            return Err(Error::shape("prediction vs ground truth", &[b.0, b.1], &[a.0, a.1]));
        }
        let mut c = FrameCounts::default();
        for (p, t) in pred.rows().into_iter().zip(truth.rows()) {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&a, &b) in p.iter().zip(t.iter()) {
                match (a != 0, b != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            c.tp.push(tp);
            c.fp.push(fp);
            c.fn_.push(fn_);
        }
        Ok(c)
    }

    pub fn n_frames(&self) -> usize {
        self.tp.len()
    }

    /// Appends another track's frames.
    pub fn extend(&mut self, other: &FrameCounts) {
        self.tp.extend(&other.tp);
        self.fp.extend(&other.fp);
        self.fn_.extend(&other.fn_);
    }

    pub fn totals(&self) -> (u64, u64, u64) {
        let sum = |v: &[u32]| v.iter().map(|&x| u64::from(x)).sum::<u64>();
        (sum(&self.tp), sum(&self.fp), sum(&self.fn_))
    }

    pub fn metrics(&self, mode: AveragingMode) -> Metrics {
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        let (precision, recall) = match mode {
            AveragingMode::Aggregate => {
                let (tp, fp, fn_) = self.totals();
                (ratio(tp as f64, (tp + fp) as f64), ratio(tp as f64, (tp + fn_) as f64))
            }
            AveragingMode::PerFrameMean => {
                let mean_of = |den: &[u32]| {
                    let vals: Vec<f64> = self
                        .tp
                        .iter()
                        .zip(den)
                        .filter(|(&tp, &other)| tp + other > 0)
                        .map(|(&tp, &other)| f64::from(tp) / f64::from(tp + other))
                        .collect();
                    ratio(vals.iter().sum(), vals.len() as f64)
                };
                (mean_of(&self.fp), mean_of(&self.fn_))
            }
        };
        Metrics {
            precision,
            recall,
            f1: harmonic(precision, recall),
            mode,
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mode: AveragingMode,
}

pub fn framewise_prf(pred: &Array2<u8>, truth: &Array2<u8>, mode: AveragingMode) -> Result<Metrics> {
    Ok(FrameCounts::new(pred, truth)?.metrics(mode))
}

/// Cross-fold summary. `f1` is the mean of per-fold F-measures;
/// `f1_of_means` is the harmonic mean of the averaged precision and recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_of_means: f64,
    pub n_folds: usize,
    pub mode: AveragingMode,
}

pub fn aggregate_folds(reports: &[Metrics]) -> Result<FoldSummary> {
    let n = reports.len();
    if n == 0 {
        return Err(Error::EmptyInput("no fold reports to aggregate".into()));
    }
    let mode = reports[0].mode;
    if reports.iter().any(|m| m.mode != mode) {
        return Err(Error::Config("fold reports use different averaging modes".into()));
    }
    let mean = |f: fn(&Metrics) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let (precision, recall) = (mean(|m| m.precision), mean(|m| m.recall));
    Ok(FoldSummary {
        precision,
        recall,
        f1: mean(|m| m.f1),
        f1_of_means: harmonic(precision, recall),
        n_folds: n,
        mode,
    })
}

/// One line of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub track: String,
    pub fold: Option<usize>,
    pub metrics: Metrics,
}

/// Per-track rows, per-fold totals and the cross-fold summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub folds: Vec<Metrics>,
    pub summary: FoldSummary,
}

impl MetricsReport {
    /// Builds a report from `(fold, track, prediction, truth)` tuples.
    pub fn from_tracks<'a>(
        items: impl IntoIterator<Item = (usize, &'a str, &'a Array2<u8>, &'a Array2<u8>)>,
        mode: AveragingMode,
    ) -> Result<Self> {
        let mut per_fold: std::collections::BTreeMap<usize, FrameCounts> = Default::default();
        let mut rows = Vec::new();
        for (fold, track, pred, truth) in items {
            let counts = FrameCounts::new(pred, truth)?;
            rows.push(MetricsRow {
                track: track.to_string(),
                fold: Some(fold),
                metrics: counts.metrics(mode),
            });
            per_fold.entry(fold).or_default().extend(&counts);
        }
        let folds: Vec<Metrics> = per_fold.values().map(|c| c.metrics(mode)).collect();
        let summary = aggregate_folds(&folds)?;
        Ok(Self { rows, folds, summary })
    }

    /// Columns `track, fold, mode, P, R, F1`; fold totals use track `*`, the
    /// cross-fold mean uses track `*` and fold `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("track,fold,mode,P,R,F1\n");
        let line = |track: &str, fold: &str, m: &Metrics| {
            format!("{track},{fold},{},{:.6},{:.6},{:.6}\n", m.mode.name(), m.precision, m.recall, m.f1)
        };
        for r in &self.rows {
            let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&line(&r.track, &fold, &r.metrics));
        }
        for (i, m) in self.folds.iter().enumerate() {
            out.push_str(&line("*", &i.to_string(), m));
        }
        let s = &self.summary;
        let mean = Metrics {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            mode: s.mode,
        };
        out.push_str(&line("*", "mean", &mean));
        out
    }

    pub fn to_text(&self) -> String {
        let s = &self.summary;
        format!(
            "mode {}  folds {}\nP {:.2}  R {:.2}  F1 {:.2} (mean of folds)  F1 {:.2} (from mean P/R)\n",
            s.mode.name(),
            s.n_folds,
            100.0 * s.precision,
            100.0 * s.recall,
            100.0 * s.f1,
            100.0 * s.f1_of_means
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn m(p: f64, r: f64, f1: f64) -> Metrics {
        Metrics {
            precision: p,
            recall: r,
            f1,
            mode: AveragingMode::Aggregate,
        }
    }

    #[test]
    fn threshold_is_strict() {
        let t = threshold(&array![[0.5, 0.5001, 0.0]]);
        assert_eq!(t, array![[0u8, 1, 0]]);
        assert_eq!(threshold(&Array2::zeros((3, 4))), Array2::<u8>::zeros((3, 4)));
    }

    #[test]
    fn two_frame_hand_count() {
        let truth = array![[1u8, 0], [1, 1]];
        let pred = array![[1u8, 1], [1, 0]];
        let agg = framewise_prf(&pred, &truth, AveragingMode::Aggregate).unwrap();
        for v in [agg.precision, agg.recall, agg.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        let per_frame = framewise_prf(&pred, &truth, AveragingMode::PerFrameMean).unwrap();
        for v in [per_frame.precision, per_frame.recall, per_frame.f1] {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_and_disjoint() {
        let a = array![[1u8, 0, 1], [0, 1, 0]];
        let b = a.mapv(|v| 1 - v);
        let perfect = framewise_prf(&a, &a, AveragingMode::Aggregate).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = framewise_prf(&b, &a, AveragingMode::Aggregate).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let empty = Array2::<u8>::zeros((2, 3));
        let z = framewise_prf(&empty, &empty, AveragingMode::PerFrameMean).unwrap();
        assert_eq!(z.f1, 0.0);
        assert!(framewise_prf(&a, &Array2::zeros((2, 4)), AveragingMode::Aggregate).is_err());
    }

    #[test]
    fn per_frame_mode_skips_empty_denominators() {
        let truth = array![[1u8, 0], [0, 0]];
        let pred = array![[1u8, 0], [0, 1]];
        let r = framewise_prf(&pred, &truth, AveragingMode::PerFrameMean).unwrap();
        assert!((r.precision - 0.5).abs() < 1e-12);
        assert!((r.recall - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fold_aggregation() {
        let one = aggregate_folds(&[m(0.9, 0.7, 0.7875)]).unwrap();
        assert_eq!((one.precision, one.recall, one.f1), (0.9, 0.7, 0.7875));
        let two = aggregate_folds(&[m(0.8, 0.8, 0.8), m(0.6, 0.6, 0.6)]).unwrap();
        assert!((two.f1 - 0.7).abs() < 1e-12);
        let s = aggregate_folds(&[m(0.8019, 0.7866, 0.7933)]).unwrap();
        assert!((100.0 * s.f1_of_means - 79.42).abs() < 5e-3);
        assert!((s.f1_of_means - s.f1).abs() > 5e-4);
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn report_csv() {
        let truth = array![[1u8, 0], [1, 1]];
        let pred = array![[1u8, 1], [1, 0]];
        let items = vec![(0, "a", &pred, &truth), (1, "b", &truth, &truth)];
        let r = MetricsReport::from_tracks(items, AveragingMode::Aggregate).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("track,fold,mode,P,R,F1\n"));
        assert!(csv.contains("b,1,aggregate,1.000000,1.000000,1.000000"));
        assert!(csv.contains("*,mean,aggregate,0.833333,0.833333,0.833333"));
        assert_eq!(r.folds.len(), 2);
    }
}
