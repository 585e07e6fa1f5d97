mod common;

use frictionlab::market::{
    build_binomial_tree, simulate_fbm_price, simulate_gbm, BranchingRule, GbmParams, ScenarioTree,
    TimeGrid,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tree_json_round_trip(seed in 0u64..10_000, steps in 1usize..=4, d in 1usize..=3) {
        let mut rng = common::rng(seed);
        let tree = common::random_tree(&mut rng, steps, d, 24, seed % 2 == 0);
        let text = serde_json::to_string(&tree).unwrap();
        let back: ScenarioTree = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &tree);
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn time_slices_carry_unit_mass(seed in 0u64..10_000, steps in 1usize..=5) {
        let mut rng = common::rng(seed);
        let tree = common::random_tree(&mut rng, steps, 1, 32, false);
        for m in tree.level_mass() {
            prop_assert!((m - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn moment_matched_steps_match_log_mean(mu in -0.3..0.3f64, sigma in 0.05..0.6f64, dt in 0.05..1.0f64) {
        // The two-point law exists only while the drift fits inside one step.
        prop_assume!(((mu - 0.5 * sigma * sigma) * dt).abs() < 0.95 * sigma * dt.sqrt());
        let p = GbmParams::new(1.0, mu, sigma).unwrap();
        let grid = TimeGrid::uniform(dt, 1).unwrap();
        let tree = build_binomial_tree(&p, &grid, BranchingRule::MomentMatched).unwrap();
        let mean = tree.child_mean(0, |c| tree.price(c)[0].ln());
        let second = tree.child_mean(0, |c| tree.price(c)[0].ln().powi(2));
        prop_assert!((mean - (mu - 0.5 * sigma * sigma) * dt).abs() <= 1e-12);
        prop_assert!((second - sigma * sigma * dt).abs() <= 1e-12);
    }
}

#[test]
fn gbm_mean_matches_closed_form() {
    let p = GbmParams::new(1.0, 0.0, 0.3).unwrap();
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let ens = simulate_gbm(&p, &grid, 100_000, 11).unwrap();
    let n = ens.n_paths() as f64;
    let vals: Vec<f64> = (0..ens.n_paths()).map(|i| ens.price(i, 4)[0]).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(
        (mean - p.s0 * (p.mu * 1.0f64).exp()).abs() <= 3.0 * se,
        "{mean} ± {se}"
    );
}

#[test]
fn gbm_is_reproducible_and_thread_independent() {
    let p = GbmParams::new(2.0, 0.1, 0.2).unwrap();
    let grid = TimeGrid::uniform(1.0, 8).unwrap();
    let a = simulate_gbm(&p, &grid, 500, 3).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let b = pool.install(|| simulate_gbm(&p, &grid, 500, 3).unwrap());
    assert_eq!(a.raw(), b.raw());
    let c = simulate_gbm(&p, &grid, 500, 4).unwrap();
    assert_ne!(a.raw(), c.raw());
}

fn log_increments(hurst: f64, steps: usize, paths: usize, seed: u64) -> Vec<Vec<f64>> {
    let grid = TimeGrid::uniform(1.0, steps).unwrap();
    let ens = simulate_fbm_price(hurst, 1.0, 1.0, &grid, paths, seed).unwrap();
    (0..paths)
        .map(|i| {
            (0..steps)
                .map(|k| ens.price(i, k + 1)[0].ln() - ens.price(i, k)[0].ln())
                .collect()
        })
        .collect()
}

#[test]
fn fbm_with_half_hurst_has_uncorrelated_increments() {
    let n = 20_000;
    let inc = log_increments(0.5, 8, n, 5);
    let x: Vec<f64> = inc.iter().map(|r| r[3]).collect();
    let y: Vec<f64> = inc.iter().map(|r| r[4]).collect();
    let (mx, my) = (
        x.iter().sum::<f64>() / n as f64,
        y.iter().sum::<f64>() / n as f64,
    );
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let rho = cov / (vx * vy).sqrt();
    assert!(rho.abs() < 3.0 / (n as f64).sqrt(), "{rho}");
}

#[test]
fn fbm_terminal_variance() {
    let n = 10_000;
    let inc = log_increments(0.75, 16, n, 9);
    let ends: Vec<f64> = inc.iter().map(|r| r.iter().sum()).collect();
    let m = ends.iter().sum::<f64>() / n as f64;
    let var = ends.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    // Var(B^H_T) = T^{2H} with T = 1
    assert!((var - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn binomial_tree_shapes() {
    let p = GbmParams::new(1.0, 0.0, 0.2).unwrap();
    let grid = TimeGrid::uniform(1.0, 3).unwrap();
    let tree = build_binomial_tree(&p, &grid, BranchingRule::MomentMatched).unwrap();
    assert_eq!(tree.len(), 15);
    assert_eq!(tree.leaves().len(), 8);
    let one = build_binomial_tree(
        &p,
        &TimeGrid::uniform(1.0, 1).unwrap(),
        BranchingRule::MomentMatched,
    )
    .unwrap();
    let up = one
        .children(0)
        .iter()
        .copied()
        .find(|&c| one.price(c)[0] > 1.0)
        .unwrap();
    assert!((one.node(up).q - 0.45).abs() < 1e-12);
}
