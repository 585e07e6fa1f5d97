//! Wealth dynamics of trading-rate strategies, the execution-price filter,
//! the market bound `B = int G*(-S) dt` and the pathwise volume-bound check.
//!
//! All time integrals are left-endpoint sums: on step `k` the price is `S_k`
//! and the rate is `phi_k`, so
//!
//! ```text
//! v_{k+1}  = v_k  + phi_k dt_k
//! v0_{k+1} = v0_k - (phi_k . S_k + G_k(phi_k)) dt_k
//! ```

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::friction::{FrictionKind, FrictionSpec};
use crate::market::{PathEnsemble, ScenarioTree};

/// Adapted trading rates: one `d`-vector per non-terminal node of a tree, or
/// one per (path, step) of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, try_from = "PlanDoc")]
pub enum TradingRatePlan {
    Tree { node_rates: BTreeMap<u64, Vec<f64>> },
    Paths { path_rates: Vec<Vec<Vec<f64>>> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    node_rates: Option<BTreeMap<u64, Vec<f64>>>,
    path_rates: Option<Vec<Vec<Vec<f64>>>>,
}

impl TryFrom<PlanDoc> for TradingRatePlan {
    type Error = Error;
    fn try_from(doc: PlanDoc) -> Result<Self> {
        match (doc.node_rates, doc.path_rates) {
            (Some(node_rates), None) => Ok(TradingRatePlan::Tree { node_rates }),
            (None, Some(path_rates)) => Ok(TradingRatePlan::Paths { path_rates }),
            _ => Err(Error::ShapeMismatch(
                "plan needs exactly one of node_rates or path_rates".into(),
            )),
        }
    }
}

impl TradingRatePlan {
    /// Tree plan from rates indexed like `tree.nodes()`; leaf entries are ignored.
    pub fn from_node_rates(tree: &ScenarioTree, rates: &[Vec<f64>]) -> Result<Self> {
        if rates.len() != tree.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rate vectors for {} nodes",
                rates.len(),
                tree.len()
            )));
        }
        let node_rates = tree
            .trading_nodes()
            .map(|i| (tree.node(i).id, rates[i].clone()))
            .collect();
        let plan = TradingRatePlan::Tree { node_rates };
        plan.node_rates_indexed(tree)?;
        Ok(plan)
    }

    pub fn zero(tree: &ScenarioTree) -> Self {
        let node_rates = tree
            .trading_nodes()
            .map(|i| (tree.node(i).id, vec![0.0; tree.d()]))
            .collect();
        TradingRatePlan::Tree { node_rates }
    }

    /// Rates indexed like `tree.nodes()`, with zero vectors at the leaves.
    pub fn node_rates_indexed(&self, tree: &ScenarioTree) -> Result<Vec<Vec<f64>>> {
        let TradingRatePlan::Tree { node_rates } = self else {
            return Err(Error::ShapeMismatch(
                "path-form plan used on a scenario tree".into(),
            ));
        };
        let mut out = vec![vec![0.0; tree.d()]; tree.len()];
        let mut seen = 0;
        for (id, r) in node_rates {
            let i = tree.index_of(*id).ok_or_else(|| {
                Error::ShapeMismatch(format!("plan references unknown node {id}"))
            })?;
            if tree.is_leaf(i) {
                return Err(Error::ShapeMismatch(format!(
                    "plan assigns a rate to terminal node {id}"
                )));
            }
            if r.len() != tree.d() || r.iter().any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch(format!(
                    "rate at node {id} must be {} finite values",
                    tree.d()
                )));
            }
            out[i] = r.clone();
            seen += 1;
        }
        let expected = tree.trading_nodes().count();
        if seen != expected {
            return Err(Error::ShapeMismatch(format!(
                "plan covers {seen} of {expected} trading nodes"
            )));
        }
        Ok(out)
    }
}

/// Cash and asset positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthState {
    pub v0: f64,
    pub v: Vec<f64>,
}

/// Either kind of finite market.
#[derive(Debug, Clone, Copy)]
pub enum Market<'a> {
    Tree(&'a ScenarioTree),
    Paths(&'a PathEnsemble),
}

impl<'a> From<&'a ScenarioTree> for Market<'a> {
    fn from(t: &'a ScenarioTree) -> Self {
        Market::Tree(t)
    }
}

impl<'a> From<&'a PathEnsemble> for Market<'a> {
    fn from(e: &'a PathEnsemble) -> Self {
        Market::Paths(e)
    }
}

/// Flattened scenario view: leaves of a tree or paths of an ensemble.
struct Scenarios {
    n: usize,
    m: usize,
    d: usize,
    dts: Vec<f64>,
    prices: Vec<f64>,
    nodes: Option<Vec<usize>>,
}

impl Scenarios {
    fn new(market: Market) -> Self {
        match market {
            Market::Tree(t) => {
                let m = t.steps();
                let d = t.d();
                let mut prices = Vec::with_capacity(t.leaves().len() * (m + 1) * d);
                let mut nodes = Vec::with_capacity(t.leaves().len() * (m + 1));
                for &leaf in t.leaves() {
                    for i in t.ancestry(leaf) {
                        prices.extend_from_slice(t.price(i));
                        nodes.push(i);
                    }
                }
                Scenarios {
                    n: t.leaves().len(),
                    m,
                    d,
                    dts: t.grid().dts(),
                    prices,
                    nodes: Some(nodes),
                }
            }
            Market::Paths(e) => Scenarios {
                n: e.n_paths(),
                m: e.grid().steps(),
                d: e.d(),
                dts: e.grid().dts(),
                prices: e.raw().to_vec(),
                nodes: None,
            },
        }
    }

    fn price(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.m + 1) + k) * self.d;
        &self.prices[off..off + self.d]
    }

    /// Rates as a flat `n x M x d` array.
    fn rates(&self, market: Market, plan: &TradingRatePlan) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n * self.m * self.d);
        match (market, plan) {
            (Market::Tree(t), TradingRatePlan::Tree { .. }) => {
                let by_node = plan.node_rates_indexed(t)?;
                let nodes = self.nodes.as_ref().unwrap();
                for i in 0..self.n {
                    for k in 0..self.m {
                        out.extend_from_slice(&by_node[nodes[i * (self.m + 1) + k]]);
                    }
                }
            }
            (Market::Paths(_), TradingRatePlan::Paths { path_rates }) => {
                if path_rates.len() != self.n {
                    return Err(Error::ShapeMismatch(format!(
                        "{} rate paths for {} price paths",
                        path_rates.len(),
                        self.n
                    )));
                }
                for p in path_rates {
                    if p.len() != self.m {
                        return Err(Error::ShapeMismatch(format!(
                            "rate path has {} steps, grid has {}",
                            p.len(),
                            self.m
                        )));
                    }
                    for r in p {
                        if r.len() != self.d || r.iter().any(|v| !v.is_finite()) {
                            return Err(Error::ShapeMismatch(format!(
                                "rates must be {} finite values",
                                self.d
                            )));
                        }
                        out.extend_from_slice(r);
                    }
                }
            }
            _ => {
                return Err(Error::ShapeMismatch(
                    "plan form does not match the market form".into(),
                ))
            }
        }
        Ok(out)
    }

    fn rate<'r>(&self, rates: &'r [f64], i: usize, k: usize) -> &'r [f64] {
        let off = (i * self.m + k) * self.d;
        &rates[off..off + self.d]
    }

    /// Rebuilds a plan of the same form from a flat rate array.
    fn to_plan(&self, market: Market, rates: &[f64]) -> TradingRatePlan {
        match market {
            Market::Tree(t) => {
                let nodes = self.nodes.as_ref().unwrap();
                let mut node_rates = BTreeMap::new();
                for i in 0..self.n {
                    for k in 0..self.m {
                        let node = nodes[i * (self.m + 1) + k];
                        node_rates
                            .entry(t.node(node).id)
                            .or_insert_with(|| self.rate(rates, i, k).to_vec());
                    }
                }
                TradingRatePlan::Tree { node_rates }
            }
            Market::Paths(_) => TradingRatePlan::Paths {
                path_rates: (0..self.n)
                    .map(|i| {
                        (0..self.m)
                            .map(|k| self.rate(rates, i, k).to_vec())
                            .collect()
                    })
                    .collect(),
            },
        }
    }
}

fn check_z(z: &[f64], d: usize) -> Result<()> {
    if z.len() != d + 1 || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::ShapeMismatch(format!(
            "initial position must have {} finite entries",
            d + 1
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Wealth along every scenario (tree leaf or path) at every time index `0..=M`.
pub fn roll_forward(
    market: Market,
    z: &[f64],
    plan: &TradingRatePlan,
    friction: &FrictionSpec,
) -> Result<Vec<Vec<WealthState>>> {
    friction.validate()?;
    let sc = Scenarios::new(market);
    check_z(z, sc.d)?;
    let rates = sc.rates(market, plan)?;
    (0..sc.n)
        .into_par_iter()
        .map(|i| {
            let mut st = WealthState {
                v0: z[0],
                v: z[1..].to_vec(),
            };
            let mut out = Vec::with_capacity(sc.m + 1);
            out.push(st.clone());
            for k in 0..sc.m {
                let (s, phi, dt) = (sc.price(i, k), sc.rate(&rates, i, k), sc.dts[k]);
                let g = friction.eval_g(s, phi)?;
                st.v0 -= (dot(phi, s) + g) * dt;
                for (v, p) in st.v.iter_mut().zip(phi) {
                    *v += p * dt;
                }
                out.push(st.clone());
            }
            Ok(out)
        })
        .collect()
}

/// Wealth per tree node, indexed like `tree.nodes()`.
pub fn roll_forward_tree(
    tree: &ScenarioTree,
    z: &[f64],
    plan: &TradingRatePlan,
    friction: &FrictionSpec,
) -> Result<Vec<WealthState>> {
    friction.validate()?;
    check_z(z, tree.d())?;
    let rates = plan.node_rates_indexed(tree)?;
    let mut out: Vec<WealthState> = Vec::with_capacity(tree.len());
    for i in 0..tree.len() {
        let st = match tree.node(i).parent {
            None => WealthState {
                v0: z[0],
                v: z[1..].to_vec(),
            },
            Some(p) => {
                let dt = tree.grid().dt(tree.node(p).k);
                let (s, phi) = (tree.price(p), &rates[p]);
                let g = friction.eval_g(s, phi)?;
                let prev = &out[p];
                WealthState {
                    v0: prev.v0 - (dot(phi, s) + g) * dt,
                    v: prev.v.iter().zip(phi).map(|(v, r)| v + r * dt).collect(),
                }
            }
        };
        out.push(st);
    }
    Ok(out)
}

/// Terminal wealth per scenario (tree leaves in `tree.leaves()` order, or paths).
pub fn terminal_wealth(
    market: Market,
    z: &[f64],
    plan: &TradingRatePlan,
    friction: &FrictionSpec,
) -> Result<Vec<WealthState>> {
    Ok(roll_forward(market, z, plan, friction)?
        .into_iter()
        .map(|mut p| p.pop().unwrap())
        .collect())
}

/// Execution price `S + G(phi)/phi` per scenario and step for a single asset;
/// `None` where the rate is zero.
pub fn execution_price_series(
    plan: &TradingRatePlan,
    market: Market,
    friction: &FrictionSpec,
) -> Result<Vec<Vec<Option<f64>>>> {
    friction.validate()?;
    let sc = Scenarios::new(market);
    if sc.d != 1 {
        return Err(Error::RequiresScalarAsset(sc.d));
    }
    let rates = sc.rates(market, plan)?;
    (0..sc.n)
        .map(|i| {
            (0..sc.m)
                .map(|k| {
                    let (s, phi) = (sc.price(i, k), sc.rate(&rates, i, k));
                    if phi[0] == 0.0 {
                        Ok(None)
                    } else {
                        Ok(Some(s[0] + friction.eval_g(s, phi)? / phi[0]))
                    }
                })
                .collect()
        })
        .collect()
}

/// Zeroes every rate whose execution price, net of the participation cost, is
/// negative. Trading at such a rate loses cash and shares at the same time, so
/// the filtered plan dominates the original at every scenario.
pub fn filter_positive_execution(
    plan: &TradingRatePlan,
    market: Market,
    friction: &FrictionSpec,
) -> Result<TradingRatePlan> {
    friction.validate()?;
    let sc = Scenarios::new(market);
    if sc.d != 1 {
        return Err(Error::RequiresScalarAsset(sc.d));
    }
    if let Some(p) = sc.prices.iter().find(|p| **p < 0.0) {
        return Err(Error::Precondition(format!(
            "prices must be nonnegative, found {p}"
        )));
    }
    let mut rates = sc.rates(market, plan)?;
    let k0 = friction.participation_cost;
    for i in 0..sc.n {
        for k in 0..sc.m {
            let off = i * sc.m + k;
            let phi = rates[off];
            if phi == 0.0 {
                continue;
            }
            let s = sc.price(i, k);
            let net = s[0] + (friction.eval_g(s, &[phi])? - k0) / phi;
            if net < 0.0 {
                rates[off] = 0.0;
            }
        }
    }
    Ok(sc.to_plan(market, &rates))
}

/// `B = sum_k G*_k(-S_k) dt_k` per scenario: no plan can earn more cash than
/// this from any starting position.
pub fn market_bound(market: Market, friction: &FrictionSpec) -> Result<Vec<f64>> {
    friction.validate()?;
    let sc = Scenarios::new(market);
    (0..sc.n)
        .into_par_iter()
        .map(|i| {
            let mut b = 0.0;
            for k in 0..sc.m {
                let s = sc.price(i, k);
                let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                b += friction.eval_g_star(s, &neg)?.value * sc.dts[k];
            }
            Ok(b)
        })
        .collect()
}

/// Exponent for the pathwise volume bound; must satisfy `1 < beta < alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeBoundParams {
    pub beta: f64,
}

impl VolumeBoundParams {
    /// Hoelder conjugate of `beta`.
    pub fn gamma(&self) -> f64 {
        self.beta / (self.beta - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeBoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub xi: f64,
    pub m: f64,
    pub ok: bool,
}

/// Pathwise inequality
/// `int |phi|^b (1+|S|)^b <= xi_- + 2^{b/(a-b)} m^{a/(a-b)} + 1`
/// with `xi = -int S.phi - int G(phi)`, evaluated after rescaling the horizon
/// to 1 (`phi' = T phi`, `H' = H T^{1-a}`; `xi` is unchanged).
pub fn volume_bound_check(
    plan: &TradingRatePlan,
    market: Market,
    friction: &FrictionSpec,
    params: VolumeBoundParams,
) -> Result<Vec<VolumeBoundReport>> {
    friction.validate()?;
    let alpha = friction.exponent();
    let beta = params.beta;
    if !(beta > 1.0 && beta < alpha) {
        return Err(Error::BetaOutOfRange { beta, alpha });
    }
    let sc = Scenarios::new(market);
    let rates = sc.rates(market, plan)?;
    let horizon: f64 = sc.dts.iter().sum();
    let h = friction.h_floor * horizon.powf(1.0 - alpha);
    let ab = alpha / (alpha - beta);
    (0..sc.n)
        .into_par_iter()
        .map(|i| {
            let (mut lhs, mut xi, mut m_int) = (0.0, 0.0, 0.0);
            for k in 0..sc.m {
                let (s, phi, dt) = (sc.price(i, k), sc.rate(&rates, i, k), sc.dts[k]);
                let ds = dt / horizon;
                let one_s = 1.0 + norm(s);
                lhs += (horizon * norm(phi)).powf(beta) * one_s.powf(beta) * ds;
                xi -= (dot(s, phi) + friction.eval_g(s, phi)?) * dt;
                m_int += (h.powf(-beta / alpha) * one_s.powf(beta)).powf(ab) * ds;
            }
            let m = m_int.powf(1.0 / ab);
            let rhs = (-xi).max(0.0) + 2f64.powf(beta / (alpha - beta)) * m.powf(ab) + 1.0;
            Ok(VolumeBoundReport {
                lhs,
                rhs,
                xi,
                m,
                ok: lhs <= rhs + 1e-9,
            })
        })
        .collect()
}

/// Buying rate that spends cash at the constant rate `k` under quadratic
/// impact: the positive root of `phi S + (lambda/2) S phi^2 = k`, written as
/// `2k / (S (1 + sqrt(1 + 2 lambda k / S)))` to stay accurate as `lambda -> 0`.
pub fn constant_cashflow_rate(lambda: f64, k: f64, s: f64) -> f64 {
    2.0 * k / (s * (1.0 + (1.0 + 2.0 * lambda * k / s).sqrt()))
}

/// Plan whose cash outflow is exactly `k dt` on every step.
pub fn constant_cashflow_plan(
    market: Market,
    friction: &FrictionSpec,
    k: f64,
) -> Result<TradingRatePlan> {
    friction.validate()?;
    if friction.kind != FrictionKind::QuadraticImpact {
        return Err(Error::InvalidFriction(
            "constant cash-flow plans require QuadraticImpact".into(),
        ));
    }
    if friction.participation_cost != 0.0 {
        return Err(Error::InvalidFriction(
            "constant cash-flow plans require zero participation cost".into(),
        ));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "cash rate k = {k} must be nonnegative"
        )));
    }
    let sc = Scenarios::new(market);
    if sc.d != 1 {
        return Err(Error::RequiresScalarAsset(sc.d));
    }
    if let Some(p) = sc.prices.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::InvalidPrice { price: *p });
    }
    let mut rates = Vec::with_capacity(sc.n * sc.m);
    for i in 0..sc.n {
        for kk in 0..sc.m {
            rates.push(constant_cashflow_rate(
                friction.lambda_coef,
                k,
                sc.price(i, kk)[0],
            ));
        }
    }
    Ok(sc.to_plan(market, &rates))
}
