use framewise::hpstudy::{
    importance, interaction, marginal, Configuration, DimKind, Dimension, Forest, ForestParams, Level, ParamSpace,
};
use proptest::prelude::*;

fn space(cards: &[usize], kind: DimKind) -> ParamSpace {
    ParamSpace::new(
        cards
            .iter()
            .enumerate()
            .map(|(i, &c)| Dimension::new(&format!("d{i}"), kind, (0..c).map(|l| Level::Num(l as f64)).collect()))
            .collect(),
    )
    .unwrap()
}

fn exhaustive(s: &ParamSpace, f: &dyn Fn(&Configuration) -> f64) -> (Vec<Configuration>, Vec<f64>) {
    let x = s.enumerate_grid().unwrap();
    let y = x.iter().map(f).collect();
    (x, y)
}

/// Empirical mean of `y` over the grid points with dimension `d` at each level.
fn brute_marginal(x: &[Configuration], y: &[f64], d: usize, levels: usize) -> Vec<f64> {
    (0..levels)
        .map(|l| {
            let vals: Vec<f64> = x.iter().zip(y).filter(|(c, _)| c[d] == l).map(|(_, v)| *v).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

fn max_marginal_error(s: &ParamSpace, f: &dyn Fn(&Configuration) -> f64) -> f64 {
    let (x, y) = exhaustive(s, f);
    let forest = Forest::fit(s, &x, &y, ForestParams::default()).unwrap();
    let mut worst = 0.0f64;
    for (d, dim) in s.dimensions.iter().enumerate() {
        let truth = brute_marginal(&x, &y, d, dim.len());
        let m = marginal(&forest, &dim.name).unwrap();
        for (p, t) in m.curve.iter().zip(&truth) {
            worst = worst.max((p.mean - t).abs());
        }
    }
    worst
}

fn g(a: usize) -> f64 {
    [0.1, 0.5, 0.3, 0.6][a]
}

fn h(b: usize) -> f64 {
    [0.0, 0.2, 0.05, 0.3][b]
}

#[test]
fn marginals_match_brute_force_on_exhaustive_grids() {
    let s = space(&[4, 4, 4, 4], DimKind::Categorical);
    let additive = |c: &Configuration| g(c[0]) + h(c[1]) + 0.05 * c[2] as f64;
    let product = |c: &Configuration| g(c[0]) * (0.5 + h(c[1])) + 0.1 * (c[2] * c[3]) as f64 / 9.0;
    for f in [&additive as &dyn Fn(&Configuration) -> f64, &product] {
        let err = max_marginal_error(&s, f);
        assert!(err <= 0.02, "max marginal error {err}");
    }
    let ordered = space(&[8, 4, 8], DimKind::Ordered);
    let err = max_marginal_error(&ordered, &|c| (c[0] as f64 / 7.0).powi(2) + 0.2 * h(c[1]) + 0.01 * c[2] as f64);
    assert!(err <= 0.02, "max marginal error {err}");
}

#[test]
fn additive_function_has_no_interaction() {
    let g16 = |a: usize| (a as f64 * 0.7).sin().abs() * 0.5;
    let h16 = |b: usize| (b % 5) as f64 * 0.06;
    let s = space(&[16, 16], DimKind::Categorical);
    let (x, y) = exhaustive(&s, &|c| g16(c[0]) + h16(c[1]));
    let forest = Forest::fit(&s, &x, &y, ForestParams::default()).unwrap();
    let curve = marginal(&forest, "d0").unwrap().curve;
    let mean_h = (0..16).map(h16).sum::<f64>() / 16.0;
    for (a, p) in curve.iter().enumerate() {
        assert!((p.mean - (g16(a) + mean_h)).abs() <= 0.02, "level {a}: {}", p.mean);
    }
    let share = interaction(&forest, "d0", "d1").unwrap();
    assert!(share <= 1.0, "interaction share {share}%");
}

#[test]
fn xor_is_pure_interaction() {
    let s = space(&[2, 2, 3], DimKind::Categorical);
    let (x, y) = exhaustive(&s, &|c| f64::from(u8::from(c[0] != c[1])));
    let x: Vec<_> = x.into_iter().cycle().take(48).collect();
    let y: Vec<_> = y.into_iter().cycle().take(48).collect();
    let forest = Forest::fit(&s, &x, &y, ForestParams::default()).unwrap();
    let r = importance(&forest, 0);
    let share = r.interaction_share("d0", "d1").unwrap();
    assert!(share >= 90.0, "interaction share {share}%");
    assert!(r.main_share("d0").unwrap() < 5.0);
    assert!(r.main_share("d1").unwrap() < 5.0);
}

#[test]
fn dominant_learning_rate_is_ranked_first() {
    let mut s = ParamSpace::training();
    s.dimensions.truncate(6);
    let lr = s.index("learning_rate").unwrap();
    let opt = s.index("optimizer").unwrap();
    let draws = s.sample_random(600, 9).unwrap();
    let scores: Vec<f64> = draws
        .iter()
        .map(|c| {
            let peak = (c[lr] as f64 - 3.0) / 2.0;
            0.7 * (-peak * peak).exp() + 0.05 * (c[opt] as f64 / 3.0)
        })
        .collect();
    let forest = Forest::fit(&s, &draws, &scores, ForestParams::default()).unwrap();
    let r = importance(&forest, 0);
    assert_eq!(r.main_effects[0].dimension, "learning_rate");
    assert!(r.main_effects[0].share > 50.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shares_are_bounded(seed in 0u64..1000, n in 20usize..80) {
        let s = space(&[3, 4, 2, 3], DimKind::Categorical);
        let x = s.sample_random(n, seed).unwrap();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, c)| ((c[0] * 7 + c[1] * 3 + i) % 11) as f64 / 10.0).collect();
        prop_assume!(x.iter().collect::<std::collections::HashSet<_>>().len() >= 2);
        let forest = Forest::fit(&s, &x, &y, ForestParams { n_trees: 20, seed, ..Default::default() }).unwrap();
        let r = importance(&forest, 0);
        let total: f64 = r.main_effects.iter().map(|m| m.share).sum::<f64>()
            + r.interactions.iter().map(|m| m.share).sum::<f64>();
        prop_assert!(total <= 100.0 + 1e-6);
        prop_assert!(r.main_effects.iter().all(|m| m.share >= 0.0));
        prop_assert!(r.interactions.iter().all(|m| m.share >= 0.0));
        for w in r.main_effects.windows(2) {
            prop_assert!(w[0].share > w[1].share || (w[0].share == w[1].share && w[0].dimension < w[1].dimension));
        }
    }

    #[test]
    fn shares_ignore_categorical_relabeling(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let s = space(&[4, 3, 2], DimKind::Categorical);
        let x = s.sample_random(60, seed).unwrap();
        let y: Vec<f64> = x
            .iter()
            .map(|c| ((c[0] as f64 + 1.3).sin() + 0.4 * c[1] as f64 * c[2] as f64 + 0.01 * seed as f64).abs())
            .collect();
        let relabeled: Vec<Configuration> = x.iter().map(|c| vec![perm[c[0]], c[1], c[2]]).collect();
        let p = ForestParams { n_trees: 20, seed, ..Default::default() };
        let a = importance(&Forest::fit(&s, &x, &y, p).unwrap(), 0);
        let b = importance(&Forest::fit(&s, &relabeled, &y, p).unwrap(), 0);
        for name in ["d0", "d1", "d2"] {
            let (sa, sb) = (a.main_share(name).unwrap(), b.main_share(name).unwrap());
            prop_assert!((sa - sb).abs() < 1e-9, "{} {} vs {}", name, sa, sb);
        }
    }
}
