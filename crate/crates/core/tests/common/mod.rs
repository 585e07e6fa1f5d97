#![allow(dead_code)]

use frictionlab::market::{NodeSpec, ScenarioTree, TimeGrid};
use frictionlab::superhedge::Claim;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree with `steps` levels, at most `max_leaves` leaves, positive
/// prices and random conditional probabilities. When `martingale` is set the
/// child prices are shifted so that every node's price is the conditional mean
/// of its children's prices.
pub fn random_tree(
    rng: &mut ChaCha8Rng,
    steps: usize,
    d: usize,
    max_leaves: usize,
    martingale: bool,
) -> ScenarioTree {
    let horizon = rng.random_range(0.5..2.0);
    let grid = if rng.random_bool(0.5) {
        TimeGrid::uniform(horizon, steps).unwrap()
    } else {
        let mut cuts: Vec<f64> = (0..steps - 1)
            .map(|_| rng.random_range(0.05..0.95) * horizon)
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        if cuts.len() != steps - 1 {
            TimeGrid::uniform(horizon, steps).unwrap()
        } else {
            let mut t = vec![0.0];
            t.extend(cuts);
            t.push(horizon);
            TimeGrid::new(t).unwrap()
        }
    };
    let s0: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut specs = vec![NodeSpec {
        id: 0,
        parent: None,
        k: 0,
        q: 1.0,
        s: s0,
    }];
    let mut frontier = vec![0usize];
    let mut leaves_now = 1;
    for k in 0..steps {
        let mut next = Vec::new();
        for &i in &frontier {
            let budget = max_leaves / leaves_now.max(1);
            let mut b = if budget >= 3 && rng.random_bool(0.3) {
                3
            } else {
                2
            };
            if leaves_now - 1 + b > max_leaves || budget < 2 {
                b = 1;
            }
            let raw: Vec<f64> = (0..b).map(|_| rng.random_range(0.2..1.0)).collect();
            let tot: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|r| r / tot).collect();
            let parent_s = specs[i].s.clone();
            let mut kids: Vec<Vec<f64>> = (0..b)
                .map(|_| {
                    parent_s
                        .iter()
                        .map(|s| s * (rng.random_range(-0.4..0.4f64)).exp())
                        .collect()
                })
                .collect();
            if martingale && b > 1 {
                for a in 0..d {
                    let mean: f64 = kids.iter().zip(&q).map(|(c, qi)| qi * c[a]).sum();
                    let shift = parent_s[a] - mean;
                    kids.iter_mut().for_each(|c| c[a] += shift);
                    // keep prices positive by pulling toward the parent
                    let min = kids.iter().map(|c| c[a]).fold(f64::INFINITY, f64::min);
                    if min <= 0.05 {
                        let lam = (parent_s[a] - 0.05) / (parent_s[a] - min);
                        kids.iter_mut()
                            .for_each(|c| c[a] = parent_s[a] + lam * (c[a] - parent_s[a]));
                    }
                }
            }
            if martingale && b == 1 {
                kids[0] = parent_s.clone();
            }
            for (c, s) in kids.into_iter().enumerate() {
                let id = specs.len() as u64;
                specs.push(NodeSpec {
                    id,
                    parent: Some(i as u64),
                    k: k + 1,
                    q: q[c],
                    s,
                });
                next.push(id as usize);
            }
            leaves_now += b - 1;
        }
        frontier = next;
    }
    ScenarioTree::new(d, grid, specs).unwrap()
}

pub fn random_claim(rng: &mut ChaCha8Rng, tree: &ScenarioTree) -> Claim {
    let vals: Vec<Vec<f64>> = tree
        .leaves()
        .iter()
        .map(|_| {
            (0..=tree.d())
                .map(|_| rng.random_range(-1.0..2.0))
                .collect()
        })
        .collect();
    let pos = |l: usize| tree.leaves().iter().position(|&x| x == l).unwrap();
    Claim::from_leaf_fn(tree, |l| vals[pos(l)].clone())
}
