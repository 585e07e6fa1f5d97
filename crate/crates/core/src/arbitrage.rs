//! Arbitrage of the second kind on scenario trees.
//!
//! An arbitrage of the second kind is a plan that starts from a strictly
//! negative cash amount and still ends with a nonnegative position. It exists
//! exactly when the superhedging price of the zero claim is negative. Its
//! absence is certified by martingales with small friction penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::friction::FrictionSpec;
use crate::market::ScenarioTree;
use crate::superhedge::{
    certificate_penalty, minimize_penalty, superhedge_price, Claim, MartingaleCertificate,
    Settlement, SolverConfig,
};
use crate::wealth::{roll_forward_tree, TradingRatePlan};

/// Cash added to `c_star` when replaying a witness plan.
pub const WITNESS_SLACK: f64 = 1e-6;
/// Largest terminal shortfall tolerated when replaying a witness plan.
pub const WITNESS_TOL: f64 = 1e-7;

const SEARCH_ITER: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Na2Report {
    pub arbitrage_found: bool,
    /// Minimal initial cash from which the zero claim is superhedged.
    pub c_star: f64,
    /// Threshold below which `c_star` counts as arbitrage.
    pub tolerance: f64,
    pub witness_plan: Option<TradingRatePlan>,
    pub certificate: Option<MartingaleCertificate>,
    /// Friction penalty of `certificate`.
    pub penalty: Option<f64>,
    pub epsilon_achieved: f64,
}

/// Outcome of [`na2_certificate_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CertificateSearch {
    Found {
        certificate: MartingaleCertificate,
        penalty: f64,
    },
    NotFound {
        best: MartingaleCertificate,
        best_penalty: f64,
    },
}

impl CertificateSearch {
    pub fn penalty(&self) -> f64 {
        match self {
            CertificateSearch::Found { penalty, .. } => *penalty,
            CertificateSearch::NotFound { best_penalty, .. } => *best_penalty,
        }
    }

    pub fn certificate(&self) -> &MartingaleCertificate {
        match self {
            CertificateSearch::Found { certificate, .. } => certificate,
            CertificateSearch::NotFound { best, .. } => best,
        }
    }

    pub fn is_found(&self) -> bool {
        matches!(self, CertificateSearch::Found { .. })
    }
}

fn check_prices(tree: &ScenarioTree) -> Result<()> {
    for (i, n) in tree.nodes().iter().enumerate() {
        if let Some(&p) = tree.price(i).iter().find(|p| !(**p >= 0.0)) {
            return Err(Error::NegativePrices {
                node: n.id as usize,
                price: p,
            });
        }
    }
    Ok(())
}

/// Replays `plan` from cash `c` and returns the largest terminal shortfall
/// under the given settlement rule.
pub fn witness_shortfall(
    tree: &ScenarioTree,
    plan: &TradingRatePlan,
    friction: &FrictionSpec,
    c: f64,
    settlement: Settlement,
) -> Result<f64> {
    let mut z = vec![0.0; tree.d() + 1];
    z[0] = c;
    let states = roll_forward_tree(tree, &z, plan, friction)?;
    let mut worst = f64::NEG_INFINITY;
    for &l in tree.leaves() {
        let st = &states[l];
        let short = match settlement {
            Settlement::Componentwise => st.v.iter().fold(-st.v0, |m, v| m.max(-v)),
            Settlement::MarkToMarket => {
                -(st.v0
                    + st.v
                        .iter()
                        .zip(tree.price(l))
                        .map(|(v, s)| v * s)
                        .sum::<f64>())
            }
        };
        worst = worst.max(short);
    }
    Ok(worst)
}

/// Superhedges the zero claim. A negative price comes with the plan that
/// realizes it; otherwise the best penalty certificate found is attached.
pub fn detect_na2(
    tree: &ScenarioTree,
    friction: &FrictionSpec,
    cfg: &SolverConfig,
) -> Result<Na2Report> {
    check_prices(tree)?;
    let cfg = SolverConfig {
        initial_assets: None,
        ..cfg.clone()
    };
    let rep = superhedge_price(tree, &Claim::zero(tree), friction, &cfg)?;
    let tolerance = 1e-7 * (1.0 + tree.max_abs_price());
    let c_star = rep.primal_value;
    if c_star < -tolerance {
        let short = witness_shortfall(
            tree,
            &rep.plan,
            friction,
            c_star + WITNESS_SLACK,
            cfg.settlement,
        )?;
        if short > WITNESS_TOL {
            return Err(Error::PlanInfeasibleForClaim {
                leaf: 0,
                shortfall: short,
            });
        }
        let epsilon_achieved = match &rep.certificate {
            Some(c) => certificate_penalty(tree, c, friction)?,
            None => f64::INFINITY,
        };
        return Ok(Na2Report {
            arbitrage_found: true,
            c_star,
            tolerance,
            witness_plan: Some(rep.plan),
            certificate: None,
            penalty: None,
            epsilon_achieved,
        });
    }
    let (cert, pen, _) = minimize_penalty(tree, friction, cfg.settlement, SEARCH_ITER)?;
    let mut best = (cert, pen);
    if let Some(c) = rep.certificate {
        let p = certificate_penalty(tree, &c, friction)?;
        if p < best.1 {
            best = (c, p);
        }
    }
    let best = (best.0, best.1.max(0.0));
    Ok(Na2Report {
        arbitrage_found: false,
        c_star,
        tolerance,
        witness_plan: None,
        certificate: Some(best.0),
        penalty: Some(best.1),
        epsilon_achieved: best.1,
    })
}

/// Looks for a certificate whose friction penalty is at most `epsilon` by
/// minimizing the penalty over all certificates compatible with `settlement`.
/// The multipliers of the zero-claim superhedge serve as a second candidate.
pub fn na2_certificate_search(
    tree: &ScenarioTree,
    friction: &FrictionSpec,
    epsilon: f64,
    settlement: Settlement,
) -> Result<CertificateSearch> {
    check_prices(tree)?;
    let (mut cert, mut penalty, _) = minimize_penalty(tree, friction, settlement, SEARCH_ITER)?;
    if penalty > epsilon {
        let cfg = SolverConfig {
            settlement,
            ..Default::default()
        };
        if let Some(c) = superhedge_price(tree, &Claim::zero(tree), friction, &cfg)?.certificate {
            let p = certificate_penalty(tree, &c, friction)?;
            if p < penalty {
                (cert, penalty) = (c, p);
            }
        }
    }
    let penalty = penalty.max(0.0);
    Ok(if penalty <= epsilon {
        CertificateSearch::Found {
            certificate: cert,
            penalty,
        }
    } else {
        CertificateSearch::NotFound {
            best: cert,
            best_penalty: penalty,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{NodeSpec, TimeGrid};

    fn one_step(up: f64, down: f64) -> ScenarioTree {
        ScenarioTree::new(
            1,
            TimeGrid::uniform(1.0, 1).unwrap(),
            vec![
                NodeSpec {
                    id: 0,
                    parent: None,
                    k: 0,
                    q: 1.0,
                    s: vec![1.0],
                },
                NodeSpec {
                    id: 1,
                    parent: Some(0),
                    k: 1,
                    q: 0.5,
                    s: vec![up],
                },
                NodeSpec {
                    id: 2,
                    parent: Some(0),
                    k: 1,
                    q: 0.5,
                    s: vec![down],
                },
            ],
        )
        .unwrap()
    }

    fn mtm() -> SolverConfig {
        SolverConfig {
            settlement: Settlement::MarkToMarket,
            ..Default::default()
        }
    }

    #[test]
    fn martingale_tree_has_no_arbitrage() {
        let t = one_step(1.5, 0.5);
        let f = FrictionSpec::power_scalar(1.0, 2.0);
        let r = detect_na2(&t, &f, &mtm()).unwrap();
        assert!(!r.arbitrage_found);
        assert!(r.c_star.abs() < 1e-7);
        assert!(r.epsilon_achieved < 1e-12);
    }

    #[test]
    fn rising_price_profit() {
        let t = one_step(2.0, 2.0);
        for lambda in [1.0, 100.0] {
            let f = FrictionSpec::power_scalar(lambda, 2.0);
            let r = detect_na2(&t, &f, &mtm()).unwrap();
            assert!(r.arbitrage_found);
            assert!((r.c_star + 0.25 / lambda).abs() < 1e-8, "{}", r.c_star);
            let plan = r.witness_plan.unwrap();
            assert!(
                witness_shortfall(
                    &t,
                    &plan,
                    &f,
                    r.c_star + WITNESS_SLACK,
                    Settlement::MarkToMarket
                )
                .unwrap()
                    <= 0.0
            );
            let s = na2_certificate_search(&t, &f, 0.5 * r.c_star.abs(), Settlement::MarkToMarket)
                .unwrap();
            assert!(!s.is_found());
            assert!(s.penalty() >= r.c_star.abs() - 1e-8);
        }
    }

    #[test]
    fn negative_prices_rejected() {
        let t = one_step(1.5, -0.5);
        let f = FrictionSpec::power_scalar(1.0, 2.0);
        assert!(matches!(
            detect_na2(&t, &f, &mtm()),
            Err(Error::NegativePrices { node: 2, .. })
        ));
    }
}
