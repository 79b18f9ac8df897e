use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::space::{Configuration, ParamSpace};
use crate::error::{Error, Result};
use crate::io::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Smallest number of samples either child of a split may hold.
    pub min_leaf: usize,
    /// Dimensions examined per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            min_leaf: 2,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn features_per_split(&self, n_dims: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (n_dims as f64).sqrt().ceil() as usize)
            .clamp(1, n_dims.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { value: f64 },
    /// Levels in `left_mask` go to `left`, the rest to `right`.
    Split { dim: usize, left_mask: u64, left: usize, right: usize },
}

/// A leaf together with the box of the space it covers: one level set per
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafRegion {
    pub value: f64,
    pub masks: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    leaves: Vec<LeafRegion>,
}

impl Tree {
    pub fn predict(&self, config: &[usize]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { dim, left_mask, left, right } => {
                    i = if left_mask >> config[dim] & 1 == 1 { left } else { right };
                }
            }
        }
    }

    /// Leaves with their regions; together they partition the space.
    pub fn leaves(&self) -> &[LeafRegion] {
        &self.leaves
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    fn collect_leaves(&mut self, cards: &[usize]) {
        let full: Vec<u64> = cards.iter().map(|&c| full_mask(c)).collect();
        let mut stack = vec![(0usize, full)];
        let mut leaves = Vec::new();
        while let Some((i, masks)) = stack.pop() {
            match self.nodes[i] {
                Node::Leaf { value } => leaves.push(LeafRegion { value, masks }),
                Node::Split { dim, left_mask, left, right } => {
                    let mut l = masks.clone();
                    l[dim] &= left_mask;
                    let mut r = masks;
                    r[dim] &= !left_mask;
                    stack.push((right, r));
                    stack.push((left, l));
                }
            }
        }
        self.leaves = leaves;
    }
}

pub(crate) fn full_mask(levels: usize) -> u64 {
    if levels >= 64 {
        u64::MAX
    } else {
        (1u64 << levels) - 1
    }
}

/// Bagged regression trees over the level indices of a parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub space: ParamSpace,
    pub params: ForestParams,
    pub n_samples: usize,
    trees: Vec<Tree>,
}

struct Grower<'a> {
    x: &'a [Configuration],
    y: &'a [f64],
    cards: &'a [usize],
    ordered: &'a [bool],
    min_leaf: usize,
    max_features: usize,
    nodes: Vec<Node>,
}

struct Candidate {
    score: f64,
    dim: usize,
    left_mask: u64,
}

impl Grower<'_> {
    fn grow(&mut self, idx: &[usize], rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        let value = if pure {
            self.y[idx[0]]
        } else {
            idx.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64
        };
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value });
        if pure || n < 2 * self.min_leaf {
            return id;
        }
        let mut dims: Vec<usize> = (0..self.cards.len()).collect();
        dims.shuffle(rng);
        let mut best: Option<Candidate> = None;
        let mut visited = 0;
        for d in dims {
            if visited >= self.max_features && best.is_some() {
                break;
            }
            let Some(c) = self.best_split(idx, d) else { continue };
            visited += 1;
            if best.as_ref().is_none_or(|b| c.score > b.score) {
                best = Some(c);
            }
        }
        let Some(best) = best else { return id };
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| best.left_mask >> self.x[i][best.dim] & 1 == 1);
        let left = self.grow(&l, rng);
        let right = self.grow(&r, rng);
        self.nodes[id] = Node::Split {
            dim: best.dim,
            left_mask: best.left_mask,
            left,
            right,
        };
        id
    }

    /// Best variance-reducing split of `idx` on dimension `d`, if the node
    /// shows at least two of its levels.
    fn best_split(&self, idx: &[usize], d: usize) -> Option<Candidate> {
        let card = self.cards[d];
        let mut count = vec![0usize; card];
        let mut sum = vec![0.0f64; card];
        for &i in idx {
            count[self.x[i][d]] += 1;
            sum[self.x[i][d]] += self.y[i];
        }
        let mut present: Vec<usize> = (0..card).filter(|&l| count[l] > 0).collect();
        if present.len() < 2 {
            return None;
        }
        if !self.ordered[d] {
            present.sort_by(|&a, &b| {
                let (ma, mb) = (sum[a] / count[a] as f64, sum[b] / count[b] as f64);
                ma.total_cmp(&mb).then(a.cmp(&b))
            });
        }
        let n = idx.len();
        let total: f64 = sum.iter().sum();
        let (mut nl, mut sl) = (0usize, 0.0f64);
        let mut best: Option<(f64, usize)> = None;
        for k in 0..present.len() - 1 {
            nl += count[present[k]];
            sl += sum[present[k]];
            let nr = n - nl;
            if nl < self.min_leaf || nr < self.min_leaf {
                continue;
            }
            let sr = total - sl;
            let score = sl * sl / nl as f64 + sr * sr / nr as f64;
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, k));
            }
        }
        let (score, k) = best?;
        let left_mask = if self.ordered[d] {
            let mid = (present[k] + present[k + 1]) / 2;
            full_mask(mid + 1)
        } else {
            let mut mask = present[..=k].iter().fold(0u64, |m, &l| m | 1 << l);
            let n_left: usize = present[..=k].iter().map(|&l| count[l]).sum();
            if n_left >= n - n_left {
                mask |= full_mask(card) & !present.iter().fold(0u64, |m, &l| m | 1 << l);
            }
            mask
        };
        Some(Candidate { score, dim: d, left_mask })
    }
}

impl Forest {
    /// Fits `params.n_trees` trees, each on a bootstrap resample of the
    /// trials, splitting to purity subject to the minimum leaf size.
    pub fn fit(space: &ParamSpace, x: &[Configuration], y: &[f64], params: ForestParams) -> Result<Self> {
        space.validate()?;
        if x.len() != y.len() {
            return Err(Error::shape("trial scores", &[x.len()], &[y.len()]));
        }
        if let Some(c) = x.iter().find(|c| !space.contains(c)) {
            return Err(Error::Config(format!("configuration {c:?} is outside the space")));
        }
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("trial score {v} is not finite")));
        }
        if x.iter().collect::<HashSet<_>>().len() < 2 {
            return Err(Error::EmptyInput("forest needs at least two distinct configurations".into()));
        }
        if params.n_trees == 0 || params.min_leaf == 0 {
            return Err(Error::Config("forest needs at least one tree and a positive leaf size".into()));
        }
        let cards = space.cardinalities();
        let ordered: Vec<bool> = space.dimensions.iter().map(|d| d.is_ordered()).collect();
        let max_features = params.features_per_split(cards.len());
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[t as u64]));
                let idx: Vec<usize> = if params.bootstrap {
                    (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                let mut g = Grower {
                    x,
                    y,
                    cards: &cards,
                    ordered: &ordered,
                    min_leaf: params.min_leaf,
                    max_features,
                    nodes: Vec::new(),
                };
                g.grow(&idx, &mut rng);
                let mut tree = Tree {
                    nodes: g.nodes,
                    leaves: Vec::new(),
                };
                tree.collect_leaves(&cards);
                tree
            })
            .collect();
        Ok(Self {
            space: space.clone(),
            params,
            n_samples: x.len(),
            trees,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn predict(&self, config: &[usize]) -> f64 {
        self.trees.iter().map(|t| t.predict(config)).sum::<f64>() / self.trees.len() as f64
    }
}
