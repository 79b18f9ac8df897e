use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::forest::{Forest, ForestParams, LeafRegion, Tree};
use crate::error::{Error, Result};

/// Trees whose prediction variance falls below this are treated as constant.
const VARIANCE_FLOOR: f64 = 1e-14;

/// Exact integrals of one tree under the uniform measure over declared
/// values.
struct TreeIntegrals<'a> {
    leaves: &'a [LeafRegion],
    cards: &'a [usize],
    /// Per leaf: fraction of each dimension's levels covered.
    fracs: Vec<Vec<f64>>,
    /// Per leaf: product of `fracs`.
    volume: Vec<f64>,
    mean: f64,
    variance: f64,
}

impl<'a> TreeIntegrals<'a> {
    fn new(tree: &'a Tree, cards: &'a [usize]) -> Self {
        let leaves = tree.leaves();
        let fracs: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| {
                l.masks
                    .iter()
                    .zip(cards)
                    .map(|(m, &c)| m.count_ones() as f64 / c as f64)
                    .collect()
            })
            .collect();
        let volume: Vec<f64> = fracs.iter().map(|f| f.iter().product()).collect();
        let mean: f64 = leaves.iter().zip(&volume).map(|(l, v)| l.value * v).sum();
        let second: f64 = leaves.iter().zip(&volume).map(|(l, v)| l.value * l.value * v).sum();
        Self {
            leaves,
            cards,
            fracs,
            volume,
            mean,
            variance: (second - mean * mean).max(0.0),
        }
    }

    /// Mean prediction with dimension `d` fixed to each of its levels.
    fn marginal(&self, d: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.cards[d]];
        for (k, leaf) in self.leaves.iter().enumerate() {
            let w = leaf.value * self.volume[k] / self.fracs[k][d];
            for (l, slot) in m.iter_mut().enumerate() {
                if leaf.masks[d] >> l & 1 == 1 {
                    *slot += w;
                }
            }
        }
        m
    }

    /// Mean prediction with dimensions `i` and `j` fixed, row-major in `i`.
    fn pair_marginal(&self, i: usize, j: usize) -> Vec<f64> {
        let cj = self.cards[j];
        let mut m = vec![0.0; self.cards[i] * cj];
        for (k, leaf) in self.leaves.iter().enumerate() {
            let w = leaf.value * self.volume[k] / (self.fracs[k][i] * self.fracs[k][j]);
            for a in (0..self.cards[i]).filter(|&a| leaf.masks[i] >> a & 1 == 1) {
                for b in (0..cj).filter(|&b| leaf.masks[j] >> b & 1 == 1) {
                    m[a * cj + b] += w;
                }
            }
        }
        m
    }

    fn variance_of(&self, m: &[f64]) -> f64 {
        let sq = m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64;
        (sq - self.mean * self.mean).max(0.0)
    }

    fn informative(&self) -> bool {
        self.variance > VARIANCE_FLOOR
    }
}

fn integrals(forest: &Forest) -> (Vec<usize>, &[Tree]) {
    (forest.space.cardinalities(), forest.trees())
}

/// Per-tree quantity averaged over the trees with non-zero variance; zero
/// when every tree is constant.
fn mean_share(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub label: String,
    /// Predicted mean score with the dimension fixed to this value.
    pub mean: f64,
    /// Standard deviation of that prediction across trees.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub dimension: String,
    pub curve: Vec<CurvePoint>,
    /// Percentage of the prediction variance explained by this dimension alone.
    pub share: f64,
}

fn dim_index(forest: &Forest, name: &str) -> Result<usize> {
    forest
        .space
        .index(name)
        .ok_or_else(|| Error::Config(format!("unknown dimension {name}")))
}

/// Marginal curve of one dimension and its variance share, integrated
/// exactly over each tree's partition and averaged across trees.
pub fn marginal(forest: &Forest, dimension: &str) -> Result<Marginal> {
    let d = dim_index(forest, dimension)?;
    let (cards, trees) = integrals(forest);
    let per_tree: Vec<(Vec<f64>, Option<f64>)> = trees
        .iter()
        .map(|t| {
            let ti = TreeIntegrals::new(t, &cards);
            let m = ti.marginal(d);
            let share = ti.informative().then(|| ti.variance_of(&m) / ti.variance);
            (m, share)
        })
        .collect();
    let n = per_tree.len() as f64;
    let labels = forest.space.dimensions[d].labels();
    let curve = labels
        .into_iter()
        .enumerate()
        .map(|(l, label)| {
            let mean = per_tree.iter().map(|(m, _)| m[l]).sum::<f64>() / n;
            let var = per_tree.iter().map(|(m, _)| (m[l] - mean).powi(2)).sum::<f64>() / n;
            CurvePoint {
                label,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(Marginal {
        dimension: dimension.to_string(),
        curve,
        share: 100.0 * mean_share(per_tree.iter().map(|(_, s)| *s)),
    })
}

/// Percentage of the prediction variance due to the interaction of two
/// dimensions beyond their main effects.
pub fn interaction(forest: &Forest, a: &str, b: &str) -> Result<f64> {
    let (i, j) = (dim_index(forest, a)?, dim_index(forest, b)?);
    if i == j {
        return Err(Error::Config(format!("interaction of {a} with itself")));
    }
    let (cards, trees) = integrals(forest);
    Ok(100.0
        * mean_share(trees.iter().map(|t| {
            let ti = TreeIntegrals::new(t, &cards);
            ti.informative().then(|| pair_component(&ti, i, j) / ti.variance)
        })))
}

fn pair_component(ti: &TreeIntegrals<'_>, i: usize, j: usize) -> f64 {
    let vi = ti.variance_of(&ti.marginal(i));
    let vj = ti.variance_of(&ti.marginal(j));
    (ti.variance_of(&ti.pair_marginal(i, j)) - vi - vj).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainEffect {
    pub dimension: String,
    /// Percentage of total prediction variance.
    pub share: f64,
    /// Percentage of the summed main effects.
    pub share_of_main: f64,
    /// Percentage of the summed main and pairwise effects.
    pub share_of_effects: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEffect {
    pub dimensions: (String, String),
    pub share: f64,
    pub share_of_effects: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub forest: ForestParams,
    pub features_per_split: usize,
    pub n_trials: usize,
    pub n_excluded: usize,
    /// Mean over trees of the prediction variance across the space.
    pub total_variance: f64,
    /// Sorted by share, largest first; ties by name.
    pub main_effects: Vec<MainEffect>,
    pub interactions: Vec<InteractionEffect>,
}

fn by_share<T>(share: impl Fn(&T) -> f64, name: impl Fn(&T) -> String) -> impl Fn(&T, &T) -> Ordering {
    move |x, y| share(y).total_cmp(&share(x)).then_with(|| name(x).cmp(&name(y)))
}

/// Main effects of every dimension and interactions of every pair.
pub fn importance(forest: &Forest, n_excluded: usize) -> ImportanceReport {
    let (cards, trees) = integrals(forest);
    let names = forest.space.names();
    let d = cards.len();
    let tis: Vec<TreeIntegrals<'_>> = trees.iter().map(|t| TreeIntegrals::new(t, &cards)).collect();
    let mut main_raw = vec![Vec::with_capacity(tis.len()); d];
    let mut pair_raw = vec![Vec::with_capacity(tis.len()); d * d];
    let mut curves = vec![Vec::with_capacity(tis.len()); d];
    for ti in &tis {
        let margs: Vec<Vec<f64>> = (0..d).map(|i| ti.marginal(i)).collect();
        let v: Vec<f64> = margs.iter().map(|m| ti.variance_of(m)).collect();
        for i in 0..d {
            curves[i].push(margs[i].clone());
            main_raw[i].push(ti.informative().then(|| v[i] / ti.variance));
            for j in i + 1..d {
                pair_raw[i * d + j].push(ti.informative().then(|| {
                    (ti.variance_of(&ti.pair_marginal(i, j)) - v[i] - v[j]).max(0.0) / ti.variance
                }));
            }
        }
    }
    let main: Vec<f64> = main_raw.iter().map(|s| 100.0 * mean_share(s.iter().copied())).collect();
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            pairs.push((i, j, 100.0 * mean_share(pair_raw[i * d + j].iter().copied())));
        }
    }
    let main_sum: f64 = main.iter().sum();
    let effect_sum = main_sum + pairs.iter().map(|p| p.2).sum::<f64>();
    let pct = |x: f64, of: f64| if of > 0.0 { 100.0 * x / of } else { 0.0 };
    let n = tis.len() as f64;
    let mut main_effects: Vec<MainEffect> = (0..d)
        .map(|i| {
            let labels = forest.space.dimensions[i].labels();
            let curve = labels
                .into_iter()
                .enumerate()
                .map(|(l, label)| {
                    let mean = curves[i].iter().map(|m| m[l]).sum::<f64>() / n;
                    let var = curves[i].iter().map(|m| (m[l] - mean).powi(2)).sum::<f64>() / n;
                    CurvePoint { label, mean, std: var.sqrt() }
                })
                .collect();
            MainEffect {
                dimension: names[i].to_string(),
                share: main[i],
                share_of_main: pct(main[i], main_sum),
                share_of_effects: pct(main[i], effect_sum),
                curve,
            }
        })
        .collect();
    main_effects.sort_by(by_share(|m: &MainEffect| m.share, |m| m.dimension.clone()));
    let mut interactions: Vec<InteractionEffect> = pairs
        .into_iter()
        .map(|(i, j, s)| InteractionEffect {
            dimensions: (names[i].to_string(), names[j].to_string()),
            share: s,
            share_of_effects: pct(s, effect_sum),
        })
        .collect();
    interactions.sort_by(by_share(
        |m: &InteractionEffect| m.share,
        |m| format!("{} x {}", m.dimensions.0, m.dimensions.1),
    ));
    ImportanceReport {
        forest: forest.params,
        features_per_split: forest.params.features_per_split(d),
        n_trials: forest.n_samples,
        n_excluded,
        total_variance: tis.iter().map(|t| t.variance).sum::<f64>() / n,
        main_effects,
        interactions,
    }
}

impl ImportanceReport {
    pub fn main_share(&self, dimension: &str) -> Option<f64> {
        self.main_effects.iter().find(|m| m.dimension == dimension).map(|m| m.share)
    }

    pub fn interaction_share(&self, a: &str, b: &str) -> Option<f64> {
        self.interactions
            .iter()
            .find(|m| (m.dimensions.0 == a && m.dimensions.1 == b) || (m.dimensions.0 == b && m.dimensions.1 == a))
            .map(|m| m.share)
    }

    pub fn to_text(&self, top_interactions: usize) -> String {
        let mut s = String::new();
        let f = &self.forest;
        let _ = writeln!(
            s,
            "# forest: {} trees, min leaf {}, {} features per split, bootstrap {}, seed {}",
            f.n_trees, f.min_leaf, self.features_per_split, f.bootstrap, f.seed
        );
        let _ = writeln!(
            s,
            "# trials: {} fitted, {} excluded; prediction variance {:.6e}",
            self.n_trials, self.n_excluded, self.total_variance
        );
        let _ = writeln!(s, "{:<28} {:>9} {:>9} {:>9}", "effect", "% total", "% main", "% effects");
        for m in &self.main_effects {
            let _ = writeln!(
                s,
                "{:<28} {:>9.2} {:>9.2} {:>9.2}",
                m.dimension, m.share, m.share_of_main, m.share_of_effects
            );
        }
        for m in self.interactions.iter().take(top_interactions) {
            let name = format!("{} x {}", m.dimensions.0, m.dimensions.1);
            let _ = writeln!(s, "{:<28} {:>9.2} {:>9} {:>9.2}", name, m.share, "-", m.share_of_effects);
        }
        s
    }

    /// `kind,effect,share,share_of_main,share_of_effects` for every main
    /// effect and interaction.
    pub fn shares_csv(&self) -> String {
        let mut s = String::from("kind,effect,share,share_of_main,share_of_effects\n");
        for m in &self.main_effects {
            let _ = writeln!(s, "main,{},{},{},{}", m.dimension, m.share, m.share_of_main, m.share_of_effects);
        }
        for m in &self.interactions {
            let _ = writeln!(
                s,
                "interaction,{} x {},{},,{}",
                m.dimensions.0, m.dimensions.1, m.share, m.share_of_effects
            );
        }
        s
    }

    /// `value,mean,std` rows of one dimension's marginal curve.
    pub fn curve_csv(&self, dimension: &str) -> Option<String> {
        let m = self.main_effects.iter().find(|m| m.dimension == dimension)?;
        let mut s = String::from("value,mean,std\n");
        for p in &m.curve {
            let _ = writeln!(s, "{},{},{}", p.label, p.mean, p.std);
        }
        Some(s)
    }
}
