mod common;

use std::collections::BTreeMap;

use frictionlab::market::NodeSpec;
use frictionlab::utility::{
    duality_gap_bound, maximize_utility, utility_upper_bound, verify_foc, ConstraintClass,
    Endowment, UtilityConfig, UtilityProblem, UtilitySpec,
};
use frictionlab::wealth::{market_bound, Market, TradingRatePlan};
use frictionlab::{Error, FrictionSpec, ScenarioTree, TimeGrid};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn utility_for(rng: &mut ChaCha8Rng) -> UtilitySpec {
    if rng.random_bool(0.5) {
        UtilitySpec::Exponential {
            a: rng.random_range(0.3..2.0),
        }
    } else {
        UtilitySpec::NegPower {
            c: rng.random_range(0.3..2.0),
            delta: rng.random_range(1.3..3.0),
        }
    }
}

fn endowment_for(rng: &mut ChaCha8Rng, tree: &ScenarioTree) -> Endowment {
    let vals: BTreeMap<u64, f64> = tree
        .leaves()
        .iter()
        .map(|&l| (tree.node(l).id, rng.random_range(-1.0..1.0)))
        .collect();
    Endowment { leaf_values: vals }
}

fn instance(seed: u64) -> (ScenarioTree, FrictionSpec, UtilitySpec, Endowment, f64) {
    let mut rng = common::rng(seed);
    let steps = rng.random_range(2..=3);
    let d = rng.random_range(1..=2);
    let tree = common::random_tree(&mut rng, steps, d, 9, false);
    let friction =
        FrictionSpec::power_scalar(rng.random_range(0.3..2.0), rng.random_range(1.5..3.0));
    let utility = utility_for(&mut rng);
    let w = endowment_for(&mut rng, &tree);
    let c = rng.random_range(-0.5..0.5);
    (tree, friction, utility, w, c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_is_concave(seed in 0u64..100_000, theta in 0.01..0.99f64, nonneg in any::<bool>()) {
        let (tree, friction, utility, w, c) = instance(seed);
        let class = if nonneg { ConstraintClass::Nonneg } else { ConstraintClass::Flat };
        let p = UtilityProblem::new(&tree, c, &w, utility, &friction, class).unwrap();
        let mut rng = common::rng(seed ^ 0x5eed);
        let n = p.n_vars();
        let mut x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.project(&mut x1);
        p.project(&mut x2);
        let mid: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| theta * a + (1.0 - theta) * b).collect();
        let mut g = vec![0.0; n];
        let f1 = p.objective(&x1, &mut g);
        let f2 = p.objective(&x2, &mut g);
        let fm = p.objective(&mid, &mut g);
        prop_assert!(fm >= theta * f1 + (1.0 - theta) * f2 - 1e-9 * (1.0 + fm.abs()));
    }

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..100_000) {
        let (tree, friction, utility, w, c) = instance(seed);
        let p = UtilityProblem::new(&tree, c, &w, utility, &friction, ConstraintClass::Flat).unwrap();
        let mut rng = common::rng(seed ^ 0xfd);
        let n = p.n_vars();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut g = vec![0.0; n];
        p.objective(&x, &mut g);
        let mut sink = vec![0.0; n];
        for i in 0..n {
            let h = 1e-6 * (1.0 + x[i].abs());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.objective(&xp, &mut sink) - p.objective(&xm, &mut sink)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn random_dual_pairs_bound_every_flat_plan(seed in 0u64..100_000) {
        let (tree, friction, utility, w, c) = instance(seed);
        let mut rng = common::rng(seed ^ 0xb0);
        let p = UtilityProblem::new(&tree, c, &w, utility, &friction, ConstraintClass::Flat).unwrap();
        let (q, z) = random_dual_pair(&mut rng, &tree);
        for _ in 0..4 {
            let x: Vec<f64> = (0..p.n_vars()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let obj = p.objective(&x, &mut vec![0.0; x.len()]);
            for k in -12..=12 {
                let y = (0.5 * k as f64).exp();
                let b = utility_upper_bound(&tree, c, &w, &utility, &friction, &q, &z, y).unwrap();
                prop_assert!(obj <= b + 1e-8 * (1.0 + b.abs()), "y={y}: {obj} > {b}");
            }
            let gap = duality_gap_bound(&tree, c, &w, &utility, &friction, &q, &z, obj).unwrap();
            prop_assert!(gap >= -1e-8);
        }
    }

    #[test]
    fn objective_stays_below_the_market_bound(seed in 0u64..100_000) {
        let (tree, friction, utility, w, c) = instance(seed);
        let bound = market_bound(Market::Tree(&tree), &friction).unwrap();
        let wv = w.indexed(&tree).unwrap();
        let ceiling: f64 =
            tree.leaves().iter().zip(bound.iter().zip(&wv)).map(|(&l, (b, wl))| tree.prob(l) * utility.u(c + b + wl)).sum();
        let p = UtilityProblem::new(&tree, c, &w, utility, &friction, ConstraintClass::Flat).unwrap();
        let mut rng = common::rng(seed ^ 0xce);
        for _ in 0..4 {
            let x: Vec<f64> = (0..p.n_vars()).map(|_| rng.random_range(-2.0..2.0)).collect();
            prop_assert!(p.objective(&x, &mut vec![0.0; x.len()]) <= ceiling + 1e-12);
        }
        let rep = maximize_utility(&tree, c, &w, &utility, &friction, &UtilityConfig::default()).unwrap();
        prop_assert!(rep.primal_value <= ceiling + 1e-12);
    }
}

/// Positive leaf density with unit mean and a positive shadow price that is a
/// `Q`-martingale on every trading node whose children trade.
fn random_dual_pair(
    rng: &mut ChaCha8Rng,
    tree: &ScenarioTree,
) -> (BTreeMap<u64, f64>, BTreeMap<u64, Vec<f64>>) {
    let raw: Vec<f64> = tree
        .leaves()
        .iter()
        .map(|_| rng.random_range(0.2..2.0))
        .collect();
    let mean: f64 = tree
        .leaves()
        .iter()
        .zip(&raw)
        .map(|(&l, v)| tree.prob(l) * v)
        .sum();
    let mut mass = vec![0.0; tree.len()];
    for (&l, v) in tree.leaves().iter().zip(&raw) {
        mass[l] = tree.prob(l) * v / mean;
    }
    for i in (0..tree.len()).rev() {
        if let Some(p) = tree.node(i).parent {
            mass[p] += mass[i];
        }
    }
    let mut z = vec![Vec::new(); tree.len()];
    for i in (0..tree.len()).rev() {
        if tree.is_leaf(i) {
            continue;
        }
        let kids = tree.children(i);
        z[i] = if kids.iter().any(|&k| tree.is_leaf(k)) {
            tree.price(i)
                .iter()
                .map(|s| s * rng.random_range(0.5..1.5))
                .collect()
        } else {
            (0..tree.d())
                .map(|a| kids.iter().map(|&k| mass[k] * z[k][a]).sum::<f64>() / mass[i])
                .collect()
        };
    }
    let q = tree
        .leaves()
        .iter()
        .zip(&raw)
        .map(|(&l, v)| (tree.node(l).id, v / mean))
        .collect();
    let zmap = tree
        .trading_nodes()
        .map(|i| (tree.node(i).id, z[i].clone()))
        .collect();
    (q, zmap)
}

/// Two-step binomial tree with S: 1 -> {u, d} -> {u^2, ud, du, d^2} and
/// equal branch probabilities.
fn two_step(u: f64, d: f64) -> ScenarioTree {
    let mut specs = vec![NodeSpec {
        id: 0,
        parent: None,
        k: 0,
        q: 1.0,
        s: vec![1.0],
    }];
    for (p, k, s) in [(0u64, 1, 1.0), (1, 2, u), (2, 2, d)] {
        let id = specs.len() as u64;
        specs.push(NodeSpec {
            id,
            parent: Some(p),
            k,
            q: 0.5,
            s: vec![s * u],
        });
        specs.push(NodeSpec {
            id: id + 1,
            parent: Some(p),
            k,
            q: 0.5,
            s: vec![s * d],
        });
    }
    ScenarioTree::new(1, TimeGrid::uniform(1.0, 2).unwrap(), specs).unwrap()
}

/// Expected exponential utility when the root buys at rate `x` and both
/// level-1 nodes sell the position back over an equal step, with `G = lambda x^2`.
fn scalar_objective(tree: &ScenarioTree, lambda: f64, x: f64) -> f64 {
    let dt = tree.grid().dt(0);
    let mut total = 0.0;
    for &l in tree.leaves() {
        let mid = tree.node(l).parent.unwrap();
        let (s0, s1) = (tree.price(0)[0], tree.price(mid)[0]);
        let cash = -dt * (x * s0 + lambda * x * x) - dt * (-x * s1 + lambda * x * x);
        total += tree.prob(l) * -(-cash).exp();
    }
    total
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) >= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

#[test]
fn two_step_root_rate_matches_scalar_oracle() {
    let tree = two_step(2.0, 0.5);
    let lambda = 1.0;
    let friction = FrictionSpec::power_scalar(lambda, 2.0);
    let utility = UtilitySpec::Exponential { a: 1.0 };
    let w = Endowment::zero(&tree);
    let rep = maximize_utility(
        &tree,
        0.0,
        &w,
        &utility,
        &friction,
        &UtilityConfig::default(),
    )
    .unwrap();
    let rates = rep.plan.node_rates_indexed(&tree).unwrap();
    let oracle = golden_max(|x| scalar_objective(&tree, lambda, x), -5.0, 5.0);
    assert!(
        (rates[0][0] - oracle).abs() < 1e-6,
        "{} vs {oracle}",
        rates[0][0]
    );
    assert!(oracle.abs() > 1e-3);
    assert!((rep.primal_value - scalar_objective(&tree, lambda, oracle)).abs() < 1e-12);

    let foc = verify_foc(&tree, &rep.plan, 0.0, &w, &utility, &friction, 1e-5).unwrap();
    assert!(
        foc.optimal_certified
            && foc.martingale_residual <= 1e-5
            && foc.orthogonality_residual <= 1e-5
    );
    assert!(foc.duality_gap_bound.abs() <= 1e-6);

    // moving the root rate by 0.1 and unwinding it breaks the shadow martingale
    let mut bumped = rates.clone();
    bumped[0][0] += 0.1;
    for &k in tree.children(0) {
        bumped[k][0] -= 0.1;
    }
    let plan = TradingRatePlan::from_node_rates(&tree, &bumped).unwrap();
    let off = verify_foc(&tree, &plan, 0.0, &w, &utility, &friction, 1e-5).unwrap();
    assert!(
        off.martingale_residual > 10.0 * foc.martingale_residual.max(1e-12),
        "{}",
        off.martingale_residual
    );
    assert!(!off.optimal_certified);
    assert!(off.duality_gap_bound > 0.0);
}

#[test]
fn scaled_density_is_rejected() {
    let tree = two_step(1.3, 0.8);
    let friction = FrictionSpec::power_scalar(1.0, 2.0);
    let utility = UtilitySpec::Exponential { a: 1.0 };
    let w = Endowment::zero(&tree);
    let rep = maximize_utility(
        &tree,
        0.0,
        &w,
        &utility,
        &friction,
        &UtilityConfig::default(),
    )
    .unwrap();
    let foc = verify_foc(&tree, &rep.plan, 0.0, &w, &utility, &friction, 1e-5).unwrap();
    let gap = duality_gap_bound(
        &tree,
        0.0,
        &w,
        &utility,
        &friction,
        &foc.q_density,
        &foc.shadow_price,
        foc.objective,
    )
    .unwrap();
    assert!(gap.abs() <= 1e-6);
    let doubled: BTreeMap<u64, f64> = foc.q_density.iter().map(|(k, v)| (*k, 2.0 * v)).collect();
    let r = duality_gap_bound(
        &tree,
        0.0,
        &w,
        &utility,
        &friction,
        &doubled,
        &foc.shadow_price,
        foc.objective,
    );
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn martingale_markets_are_not_traded() {
    let mut rng = common::rng(51);
    for _ in 0..5 {
        let steps = rng.random_range(2..=3);
        let tree = common::random_tree(&mut rng, steps, 1, 9, true);
        let friction = FrictionSpec::power_scalar(rng.random_range(0.3..2.0), 2.0);
        let utility = UtilitySpec::Exponential { a: 1.0 };
        let c = rng.random_range(-0.5..0.5);
        let w = Endowment::zero(&tree);
        let rep =
            maximize_utility(&tree, c, &w, &utility, &friction, &UtilityConfig::default()).unwrap();
        let rates = rep.plan.node_rates_indexed(&tree).unwrap();
        let largest = rates.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(largest <= 1e-6, "{largest}");
        assert!((rep.primal_value - utility.u(c)).abs() <= 1e-12);

        let zero = TradingRatePlan::zero(&tree);
        let foc = verify_foc(&tree, &zero, c, &w, &utility, &friction, 1e-12).unwrap();
        assert!(foc.optimal_certified);
        assert!(foc.q_density.values().all(|q| (q - 1.0).abs() < 1e-14));
    }
}

#[test]
fn nonneg_class_does_at_least_as_well_as_flat() {
    for seed in 0..6 {
        let (tree, friction, utility, w, c) = instance(600 + seed);
        let flat =
            maximize_utility(&tree, c, &w, &utility, &friction, &UtilityConfig::default()).unwrap();
        let cfg = UtilityConfig {
            constraint_class: ConstraintClass::Nonneg,
            ..Default::default()
        };
        let nonneg = maximize_utility(&tree, c, &w, &utility, &friction, &cfg).unwrap();
        assert!(
            nonneg.primal_value >= flat.primal_value - 1e-9,
            "{} < {}",
            nonneg.primal_value,
            flat.primal_value
        );
    }
}
