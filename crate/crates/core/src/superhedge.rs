//! Superhedging on scenario trees and its dual.
//!
//! The primal is the convex program `min c` over an initial cash amount and
//! node-indexed trading rates such that the terminal position dominates the
//! claim at every leaf. The dual ranges over nonnegative `(d+1)`-dimensional
//! martingales `Z` with `Z^0_0 = 1` and value
//!
//! ```text
//! E[Z_T . W] - E sum_k Z^0_k G*_k(Zbar_k - S_k) dt_k,     Zbar = Ztilde / Z^0.
//! ```
//!
//! On a finite tree the two values coincide. The solver computes both sides
//! independently: a feasible plan rolled forward exactly, and a valid
//! certificate evaluated by [`dual_value`].

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::friction::FrictionSpec;
use crate::market::{GbmParams, ScenarioTree};
use crate::optim::{lbfgs_minimize, project_simplex, spg_maximize, LbfgsConfig, SpgConfig};
use crate::wealth::{roll_forward_tree, TradingRatePlan};

/// Terminal target `W = (W^0, W^1, ..., W^d)` per leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub leaf_values: BTreeMap<u64, Vec<f64>>,
}

impl Claim {
    /// Claim built from a function of the leaf's index in `tree.nodes()`.
    pub fn from_leaf_fn(tree: &ScenarioTree, f: impl Fn(usize) -> Vec<f64>) -> Self {
        Claim {
            leaf_values: tree
                .leaves()
                .iter()
                .map(|&l| (tree.node(l).id, f(l)))
                .collect(),
        }
    }

    pub fn zero(tree: &ScenarioTree) -> Self {
        Claim::from_leaf_fn(tree, |_| vec![0.0; tree.d() + 1])
    }

    /// Cash-settled claim `W^0 = payoff(S_T)`.
    pub fn cash(tree: &ScenarioTree, payoff: impl Fn(&[f64]) -> f64) -> Self {
        Claim::from_leaf_fn(tree, |l| {
            let mut w = vec![0.0; tree.d() + 1];
            w[0] = payoff(tree.price(l));
            w
        })
    }

    /// Values in `tree.leaves()` order.
    pub fn indexed(&self, tree: &ScenarioTree) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(tree.leaves().len());
        for &l in tree.leaves() {
            let id = tree.node(l).id;
            let w = self
                .leaf_values
                .get(&id)
                .ok_or_else(|| Error::ShapeMismatch(format!("claim has no value at leaf {id}")))?;
            if w.len() != tree.d() + 1 || w.iter().any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch(format!(
                    "claim at leaf {id} must be {} finite values",
                    tree.d() + 1
                )));
            }
            out.push(w.clone());
        }
        if self.leaf_values.len() != out.len() {
            return Err(Error::ShapeMismatch(
                "claim has values at non-leaf or unknown nodes".into(),
            ));
        }
        Ok(out)
    }
}

/// How terminal positions are compared with the claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Settlement {
    /// `V_T >= W` in every component.
    #[default]
    Componentwise,
    /// Terminal shares are converted to cash at `S_T` without friction:
    /// `V^0_T + V~_T . S_T >= W^0 + W~ . S_T`. Dual certificates then satisfy
    /// `Z~_T = Z^0_T S_T`.
    MarkToMarket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub settlement: Settlement,
    pub unbounded_ceiling: f64,
    /// Initial risky holdings `z~`; zero when absent.
    pub initial_assets: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 5000,
            gap_tol: 1e-6,
            feas_tol: 1e-7,
            settlement: Settlement::Componentwise,
            unbounded_ceiling: 1e9,
            initial_assets: None,
        }
    }
}

/// Nonnegative `(d+1)`-dimensional martingale on the tree, keyed by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCertificate {
    pub node_values: BTreeMap<u64, Vec<f64>>,
}

/// Tolerance for the martingale identity and the root normalization.
pub const CERT_TOL: f64 = 1e-10;

impl MartingaleCertificate {
    /// Martingale generated by terminal values given in `tree.leaves()` order.
    pub fn from_leaf_values(tree: &ScenarioTree, leaf_values: &[Vec<f64>]) -> Result<Self> {
        if leaf_values.len() != tree.leaves().len() {
            return Err(Error::ShapeMismatch(
                "one terminal value per leaf is required".into(),
            ));
        }
        let dim = tree.d() + 1;
        let mut z = vec![vec![0.0; dim]; tree.len()];
        for (pos, &l) in tree.leaves().iter().enumerate() {
            if leaf_values[pos].len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "terminal values must have {dim} entries"
                )));
            }
            z[l] = leaf_values[pos].clone();
        }
        for i in (0..tree.len()).rev() {
            if !tree.is_leaf(i) {
                let mut acc = vec![0.0; dim];
                for &c in tree.children(i) {
                    let q = tree.node(c).q;
                    acc.iter_mut().zip(&z[c]).for_each(|(a, v)| *a += q * v);
                }
                z[i] = acc;
            }
        }
        Ok(MartingaleCertificate::from_indexed(tree, &z))
    }

    fn from_indexed(tree: &ScenarioTree, z: &[Vec<f64>]) -> Self {
        MartingaleCertificate {
            node_values: (0..tree.len())
                .map(|i| (tree.node(i).id, z[i].clone()))
                .collect(),
        }
    }

    /// `Z^0 = 1` and `Z~_n = E[S_T | n]`; the frictionless choice when `S` is a martingale.
    pub fn frictionless(tree: &ScenarioTree) -> Self {
        let leaf: Vec<Vec<f64>> = tree
            .leaves()
            .iter()
            .map(|&l| {
                std::iter::once(1.0)
                    .chain(tree.price(l).iter().copied())
                    .collect()
            })
            .collect();
        MartingaleCertificate::from_leaf_values(tree, &leaf).expect("shapes match by construction")
    }

    /// Values in `tree.nodes()` order.
    pub fn indexed(&self, tree: &ScenarioTree) -> Result<Vec<Vec<f64>>> {
        let dim = tree.d() + 1;
        let mut out = Vec::with_capacity(tree.len());
        for n in tree.nodes() {
            let z = self
                .node_values
                .get(&n.id)
                .ok_or_else(|| Error::CertificateInvalid(format!("no value at node {}", n.id)))?;
            if z.len() != dim || z.iter().any(|v| !v.is_finite()) {
                return Err(Error::CertificateInvalid(format!(
                    "value at node {} must be {dim} finite entries",
                    n.id
                )));
            }
            out.push(z.clone());
        }
        Ok(out)
    }

    /// Checks nonnegativity, the martingale identity, `Z^0_0 = 1` and
    /// `Z^i = 0` wherever `Z^0 = 0`. Returns the values in node order.
    pub fn validate(&self, tree: &ScenarioTree) -> Result<Vec<Vec<f64>>> {
        let z = self.indexed(tree)?;
        let scale = 1.0 + z.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, zi) in z.iter().enumerate() {
            let id = tree.node(i).id;
            if zi.iter().any(|v| *v < 0.0) {
                return Err(Error::CertificateInvalid(format!(
                    "negative component at node {id}"
                )));
            }
            if zi[0] == 0.0 && zi[1..].iter().any(|v| *v != 0.0) {
                return Err(Error::CertificateInvalid(format!(
                    "asset component nonzero where Z^0 = 0 at node {id}"
                )));
            }
            if !tree.is_leaf(i) {
                for a in 0..zi.len() {
                    let m = tree.child_mean(i, |c| z[c][a]);
                    if (m - zi[a]).abs() > CERT_TOL * scale {
                        return Err(Error::CertificateInvalid(format!(
                            "martingale defect {:e} at node {id}",
                            m - zi[a]
                        )));
                    }
                }
            }
        }
        if (z[tree.root()][0] - 1.0).abs() > CERT_TOL {
            return Err(Error::CertificateInvalid(format!(
                "Z^0 at the root is {}, expected 1",
                z[tree.root()][0]
            )));
        }
        Ok(z)
    }
}

/// Perspective penalty `sum_n P(n) dt_n Z^0_n G*(Zbar_n - S_n)` over trading nodes.
pub fn certificate_penalty(
    tree: &ScenarioTree,
    cert: &MartingaleCertificate,
    friction: &FrictionSpec,
) -> Result<f64> {
    friction.validate()?;
    let z = cert.validate(tree)?;
    let mut pen = 0.0;
    for i in tree.trading_nodes() {
        let zi = &z[i];
        if zi[0] == 0.0 {
            continue;
        }
        let s = tree.price(i);
        let y: Vec<f64> = zi[1..]
            .iter()
            .zip(s)
            .map(|(zt, si)| zt / zi[0] - si)
            .collect();
        let dt = tree.grid().dt(tree.node(i).k);
        pen += tree.prob(i) * dt * zi[0] * friction.eval_g_star(s, &y)?.value;
    }
    Ok(pen)
}

/// Dual objective `E[Z_T . W] - E sum Z^0 G*(Zbar - S) dt` of a certificate.
pub fn dual_value(
    tree: &ScenarioTree,
    cert: &MartingaleCertificate,
    claim: &Claim,
    friction: &FrictionSpec,
) -> Result<f64> {
    let w = claim.indexed(tree)?;
    let z = cert.validate(tree)?;
    let linear: f64 = tree
        .leaves()
        .iter()
        .zip(&w)
        .map(|(&l, wl)| tree.prob(l) * z[l].iter().zip(wl).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok(linear - certificate_penalty(tree, cert, friction)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KktResiduals {
    /// Largest constraint violation of the reported plan and cash amount.
    pub primal_infeasibility: f64,
    /// Largest martingale defect of the reported certificate.
    pub certificate_martingale: f64,
    /// `sum_r mu_r |g_r|` between the certificate and the plan's slacks.
    pub complementarity: f64,
    /// Projected-gradient norm of the dual objective at the certificate.
    pub dual_stationarity: f64,
}

/// Result of a tree solve: objective, strategy, certificate and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub primal_value: f64,
    pub plan: TradingRatePlan,
    pub certificate: Option<MartingaleCertificate>,
    pub dual_value: f64,
    pub duality_gap: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    pub wall_time: f64,
}

/// Best certificate found by [`maximize_dual`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub certificate: MartingaleCertificate,
    pub dual_value: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leaf constraint `e . (W_leaf - V_T(leaf)) <= 0`.
struct Row {
    leaf: usize,
    e: Vec<f64>,
}

/// Dense tree program shared by the primal and dual solvers.
struct Program<'a> {
    tree: &'a ScenarioTree,
    friction: &'a FrictionSpec,
    d: usize,
    /// Node index of each trading position.
    trading: Vec<usize>,
    dt: Vec<f64>,
    /// Trading positions on the root-to-parent path of each leaf.
    anc: Vec<Vec<usize>>,
    leaf_node: Vec<usize>,
    leaf_prob: Vec<f64>,
    w: Vec<Vec<f64>>,
    z_assets: Vec<f64>,
    rows: Vec<Row>,
}

impl<'a> Program<'a> {
    fn new(
        tree: &'a ScenarioTree,
        friction: &'a FrictionSpec,
        w: Vec<Vec<f64>>,
        z_assets: Vec<f64>,
        settlement: Settlement,
    ) -> Result<Self> {
        let d = tree.d();
        if z_assets.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "initial assets must have {d} entries"
            )));
        }
        let trading: Vec<usize> = tree.trading_nodes().collect();
        let mut pos = vec![usize::MAX; tree.len()];
        for (p, &i) in trading.iter().enumerate() {
            pos[i] = p;
        }
        let dt = trading
            .iter()
            .map(|&i| tree.grid().dt(tree.node(i).k))
            .collect();
        let leaf_node: Vec<usize> = tree.leaves().to_vec();
        let anc = leaf_node
            .iter()
            .map(|&l| {
                let chain = tree.ancestry(l);
                chain[..chain.len() - 1].iter().map(|&i| pos[i]).collect()
            })
            .collect();
        let leaf_prob = leaf_node.iter().map(|&l| tree.prob(l)).collect();
        let mut rows = Vec::new();
        for (li, &l) in leaf_node.iter().enumerate() {
            match settlement {
                Settlement::Componentwise => {
                    for a in 0..=d {
                        let mut e = vec![0.0; d + 1];
                        e[a] = 1.0;
                        rows.push(Row { leaf: li, e });
                    }
                }
                Settlement::MarkToMarket => {
                    let e = std::iter::once(1.0)
                        .chain(tree.price(l).iter().copied())
                        .collect();
                    rows.push(Row { leaf: li, e });
                }
            }
        }
        Ok(Program {
            tree,
            friction,
            d,
            trading,
            dt,
            anc,
            leaf_node,
            leaf_prob,
            w,
            z_assets,
            rows,
        })
    }

    fn n_phi(&self) -> usize {
        self.trading.len() * self.d
    }

    fn phi<'x>(&self, phi: &'x [f64], p: usize) -> &'x [f64] {
        &phi[p * self.d..(p + 1) * self.d]
    }

    /// Per trading position: cash spent `(phi.S + G(phi)) dt`, and optionally its gradient.
    fn costs(&self, phi: &[f64], grad: Option<&mut [f64]>) -> Result<Vec<f64>> {
        let mut cost = Vec::with_capacity(self.trading.len());
        let mut grad = grad;
        for (p, &i) in self.trading.iter().enumerate() {
            let s = self.tree.price(i);
            let x = self.phi(phi, p);
            let g = self.friction.eval_g(s, x)?;
            cost.push((dot(x, s) + g) * self.dt[p]);
            if let Some(gr) = grad.as_deref_mut() {
                let gp = self.friction.eval_subgradient(s, x)?;
                for a in 0..self.d {
                    gr[p * self.d + a] = (s[a] + gp[a]) * self.dt[p];
                }
            }
        }
        Ok(cost)
    }

    /// Terminal `(V^0, V~)` per leaf for cash `c`.
    fn terminal(&self, c: f64, phi: &[f64], cost: &[f64]) -> Vec<Vec<f64>> {
        self.anc
            .iter()
            .map(|anc| {
                let mut v = Vec::with_capacity(self.d + 1);
                v.push(c - anc.iter().map(|&p| cost[p]).sum::<f64>());
                for a in 0..self.d {
                    v.push(
                        self.z_assets[a]
                            + anc
                                .iter()
                                .map(|&p| phi[p * self.d + a] * self.dt[p])
                                .sum::<f64>(),
                    );
                }
                v
            })
            .collect()
    }

    fn row_values(&self, v: &[Vec<f64>]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| {
                r.e.iter()
                    .zip(&self.w[r.leaf])
                    .zip(&v[r.leaf])
                    .map(|((e, w), x)| e * (w - x))
                    .sum()
            })
            .collect()
    }

    /// Augmented Lagrangian in `x = (c, phi)` for fixed multipliers.
    fn augmented(&self, x: &[f64], grad: &mut [f64], mu: &[f64], rho: f64) -> f64 {
        let (c, phi) = (x[0], &x[1..]);
        let mut dcost = vec![0.0; self.n_phi()];
        let cost = match self.costs(phi, Some(&mut dcost)) {
            Ok(c) => c,
            Err(_) => return f64::INFINITY,
        };
        if cost.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        let v = self.terminal(c, phi, &cost);
        let g = self.row_values(&v);
        grad.iter_mut().for_each(|v| *v = 0.0);
        grad[0] = 1.0;
        let mut val = c;
        for (r, row) in self.rows.iter().enumerate() {
            let wr = (mu[r] + rho * g[r]).max(0.0);
            val += (wr * wr - mu[r] * mu[r]) / (2.0 * rho);
            if wr == 0.0 {
                continue;
            }
            grad[0] -= wr * row.e[0];
            for &p in &self.anc[row.leaf] {
                for a in 0..self.d {
                    let k = p * self.d + a;
                    grad[1 + k] += wr * (row.e[0] * dcost[k] - row.e[1 + a] * self.dt[p]);
                }
            }
        }
        val
    }

    /// Leaf multipliers of the frictionless certificate, used as a starting point.
    fn cold_multipliers(&self) -> Vec<f64> {
        self.density_multipliers(&vec![1.0; self.leaf_node.len()])
    }

    /// Multipliers of `Z^0_T = density`, `Z~_T = density S_T`, one density per leaf.
    fn density_multipliers(&self, density: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| {
                let pl = self.leaf_prob[r.leaf] * density[r.leaf];
                let nz = r.e.iter().position(|e| *e != 0.0).unwrap_or(0);
                if nz == 0 {
                    pl
                } else {
                    pl * self.tree.price(self.leaf_node[r.leaf])[nz - 1].max(0.0)
                }
            })
            .collect()
    }

    fn project(&self, mu: &mut [f64]) {
        let cash: Vec<usize> = (0..self.rows.len())
            .filter(|&r| self.rows[r].e[0] != 0.0)
            .collect();
        let mut sub: Vec<f64> = cash.iter().map(|&r| mu[r]).collect();
        project_simplex(&mut sub, 1.0);
        for (k, &r) in cash.iter().enumerate() {
            mu[r] = sub[k];
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.e[0] == 0.0 {
                mu[r] = mu[r].max(0.0);
            }
        }
    }

    fn leaf_vectors(&self, mu: &[f64]) -> Vec<Vec<f64>> {
        let mut v = vec![vec![0.0; self.d + 1]; self.leaf_node.len()];
        for (r, row) in self.rows.iter().enumerate() {
            for a in 0..=self.d {
                v[row.leaf][a] += mu[r] * row.e[a];
            }
        }
        v
    }

    /// Dual objective in multiplier space, including the `-Z~_0 . z~` term.
    /// Returns `-inf` where a perspective term is infinite.
    fn dual(&self, mu: &[f64], grad: &mut [f64], with_claim: bool) -> f64 {
        let v = self.leaf_vectors(mu);
        let np = self.trading.len();
        let mut ab = vec![vec![0.0; self.d + 1]; np];
        for (li, anc) in self.anc.iter().enumerate() {
            for &p in anc {
                ab[p].iter_mut().zip(&v[li]).for_each(|(x, y)| *x += y);
            }
        }
        let mut val = 0.0;
        let mut gab = vec![vec![0.0; self.d + 1]; np];
        for p in 0..np {
            let s = self.tree.price(self.trading[p]);
            let (a, b) = (ab[p][0], &ab[p][1..]);
            let y: Vec<f64> = if a > 0.0 {
                b.iter().zip(s).map(|(bi, si)| bi / a - si).collect()
            } else if b.iter().all(|x| *x == 0.0) {
                s.iter().map(|si| -si).collect()
            } else {
                return f64::NEG_INFINITY;
            };
            let Ok(ge) = self.friction.eval_g_star(s, &y) else {
                return f64::NEG_INFINITY;
            };
            let xs = &ge.argsup;
            let Ok(gx) = self.friction.eval_g(s, xs) else {
                return f64::NEG_INFINITY;
            };
            val -= self.dt[p] * a * ge.value;
            if a > 0.0 {
                gab[p][0] = -self.dt[p] * (-dot(xs, s) - gx);
            } else {
                gab[p][0] = -self.dt[p] * ge.value;
            }
            for i in 0..self.d {
                gab[p][1 + i] = -self.dt[p] * xs[i];
            }
        }
        let mut gv = vec![vec![0.0; self.d + 1]; self.leaf_node.len()];
        for (li, anc) in self.anc.iter().enumerate() {
            let g = &mut gv[li];
            if with_claim {
                g.copy_from_slice(&self.w[li]);
                val += dot(&v[li], &self.w[li]);
            }
            for a in 0..self.d {
                g[1 + a] -= self.z_assets[a];
            }
            val -= dot(&v[li][1..], &self.z_assets);
            for &p in anc {
                g.iter_mut().zip(&gab[p]).for_each(|(x, y)| *x += y);
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            grad[r] = dot(&row.e, &gv[row.leaf]);
        }
        val
    }

    /// Projected spectral-gradient ascent on the dual from `mu0`.
    fn polish(
        &self,
        mu0: Vec<f64>,
        max_iter: usize,
        with_claim: bool,
    ) -> (Vec<f64>, f64, f64, usize) {
        let mut f = |m: &[f64], g: &mut [f64]| self.dual(m, g, with_claim);
        let proj = |m: &mut [f64]| self.project(m);
        let sol = spg_maximize(
            &mut f,
            &proj,
            mu0,
            SpgConfig {
                max_iter,
                tol: 1e-12,
                memory: 10,
            },
        );
        (sol.x, sol.f, sol.stationarity, sol.iterations)
    }

    /// Certificate from multipliers: `Z_T = v / P(leaf)`. Leaves where the cash
    /// weight vanishes but asset weight does not get a negligible cash weight so
    /// that `Z^i = 0` wherever `Z^0 = 0`.
    fn certificate(&self, mu: &[f64]) -> Result<MartingaleCertificate> {
        let mut v = self.leaf_vectors(mu);
        for vl in v.iter_mut() {
            if vl[0] <= 0.0 {
                vl[0] = 0.0;
                let m = vl[1..].iter().fold(0.0f64, |m, x| m.max(*x));
                if m > 0.0 {
                    vl[0] = 1e-14 * (1.0 + m);
                }
            }
            vl.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        let total: f64 = v.iter().map(|x| x[0]).sum();
        if !(total > 0.0) {
            return Err(Error::CertificateInvalid(
                "multipliers carry no cash weight".into(),
            ));
        }
        let leaf: Vec<Vec<f64>> = v
            .iter()
            .zip(&self.leaf_prob)
            .map(|(vl, p)| vl.iter().map(|x| x / (total * p)).collect())
            .collect();
        MartingaleCertificate::from_leaf_values(self.tree, &leaf)
    }

    /// Smallest cash making `phi` feasible, after closing componentwise asset
    /// shortfalls with extra trading at the last node before each leaf.
    fn feasible_cash(&self, phi: &mut [f64]) -> Result<f64> {
        let cost = self.costs(phi, None)?;
        let v = self.terminal(0.0, phi, &cost);
        let componentwise = self.rows.iter().any(|r| r.e[0] == 0.0);
        if componentwise {
            let mut bump: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (li, anc) in self.anc.iter().enumerate() {
                let Some(&p) = anc.last() else { continue };
                let entry = bump.entry(p).or_insert_with(|| vec![0.0; self.d]);
                for a in 0..self.d {
                    entry[a] = entry[a].max(self.w[li][1 + a] - v[li][1 + a]);
                }
            }
            for (p, sh) in bump {
                for a in 0..self.d {
                    if sh[a] > 0.0 {
                        phi[p * self.d + a] += sh[a] / self.dt[p];
                    }
                }
            }
        }
        let cost = self.costs(phi, None)?;
        let v = self.terminal(0.0, phi, &cost);
        let g = self.row_values(&v);
        // With c = 0 each cash-carrying row needs c >= g / e^0.
        let mut c = f64::NEG_INFINITY;
        for (r, row) in self.rows.iter().enumerate() {
            if row.e[0] != 0.0 {
                c = c.max(g[r] / row.e[0]);
            }
        }
        Ok(c)
    }

    fn max_violation(&self, c: f64, phi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let cost = self.costs(phi, None)?;
        let g = self.row_values(&self.terminal(c, phi, &cost));
        Ok((g.iter().fold(0.0f64, |m, x| m.max(*x)), g))
    }
}

struct TreeSolution {
    c: f64,
    phi: Vec<f64>,
    mu: Vec<f64>,
    dual: f64,
    dual_stationarity: f64,
    iterations: usize,
}

/// Augmented-Lagrangian primal solve followed by dual polishing.
fn solve_program(prog: &Program, cfg: &SolverConfig) -> Result<TreeSolution> {
    let n = 1 + prog.n_phi();
    let mut x = vec![0.0; n];
    let mut zero = vec![0.0; prog.n_phi()];
    x[0] = prog.feasible_cash(&mut zero)?;
    x[1..].copy_from_slice(&zero);
    let scale = 1.0 + x[0].abs() + prog.w.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut mu = prog.cold_multipliers();
    prog.project(&mut mu);
    let mut rho = 10.0 / scale;
    let mut iterations = 0;
    let mut last_viol = f64::INFINITY;
    let lb = LbfgsConfig {
        memory: 12,
        max_iter: cfg.max_iter,
        grad_tol: 1e-11,
    };
    for _ in 0..80 {
        let mut f = |x: &[f64], g: &mut [f64]| prog.augmented(x, g, &mu, rho);
        let sol = lbfgs_minimize(&mut f, x.clone(), lb);
        iterations += sol.iterations;
        x = sol.x;
        if x[0].abs() > cfg.unbounded_ceiling {
            return Err(Error::Unbounded {
                ceiling: cfg.unbounded_ceiling,
            });
        }
        let (viol, g) = prog.max_violation(x[0], &x[1..])?;
        let mut delta: f64 = 0.0;
        for r in 0..mu.len() {
            let new = (mu[r] + rho * g[r]).max(0.0);
            delta = delta.max((new - mu[r]).abs());
            mu[r] = new;
        }
        if viol <= 1e-12 * scale && delta <= 1e-11 {
            break;
        }
        if viol > 0.25 * last_viol && viol > 1e-11 * scale {
            rho = (rho * 5.0).min(1e10);
        }
        last_viol = viol;
    }
    let mut phi = x[1..].to_vec();
    let c = prog.feasible_cash(&mut phi)?;
    if !c.is_finite() || c.abs() > cfg.unbounded_ceiling {
        return Err(Error::Unbounded {
            ceiling: cfg.unbounded_ceiling,
        });
    }
    prog.project(&mut mu);
    let (mu, dual, stat, it) = prog.polish(mu, cfg.max_iter, true);
    if dual > cfg.unbounded_ceiling {
        return Err(Error::Unbounded {
            ceiling: cfg.unbounded_ceiling,
        });
    }
    Ok(TreeSolution {
        c,
        phi,
        mu,
        dual,
        dual_stationarity: stat,
        iterations: iterations + it,
    })
}

fn check_inputs(
    tree: &ScenarioTree,
    claim: &Claim,
    friction: &FrictionSpec,
    cfg: &SolverConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    friction.validate()?;
    if let Some(d) = friction.fixed_dimension() {
        if d != tree.d() {
            return Err(Error::ShapeMismatch(format!(
                "friction is {d}-dimensional, tree has d = {}",
                tree.d()
            )));
        }
    }
    if !(cfg.gap_tol > 0.0 && cfg.feas_tol > 0.0) {
        return Err(Error::InvalidParams("tolerances must be positive".into()));
    }
    let w = claim.indexed(tree)?;
    let z = cfg
        .initial_assets
        .clone()
        .unwrap_or_else(|| vec![0.0; tree.d()]);
    Ok((w, z))
}

fn plan_from_positions(prog: &Program, phi: &[f64]) -> Result<TradingRatePlan> {
    let mut rates = vec![vec![0.0; prog.d]; prog.tree.len()];
    for (p, &i) in prog.trading.iter().enumerate() {
        rates[i] = prog.phi(phi, p).to_vec();
    }
    TradingRatePlan::from_node_rates(prog.tree, &rates)
}

/// Minimal initial cash `c` such that some plan started from `(c, z~)` dominates
/// the claim at every leaf, with a certificate bounding it from below.
pub fn superhedge_price(
    tree: &ScenarioTree,
    claim: &Claim,
    friction: &FrictionSpec,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let start = Instant::now();
    let (w, z) = check_inputs(tree, claim, friction, cfg)?;
    let prog = Program::new(tree, friction, w, z.clone(), cfg.settlement)?;
    let sol = solve_program(&prog, cfg)?;
    let cert = prog.certificate(&sol.mu)?;
    let zc = cert.validate(tree)?;
    let dual = dual_value(tree, &cert, claim, friction)? - dot(&zc[tree.root()][1..], &z);
    let (viol, g) = prog.max_violation(sol.c, &sol.phi)?;
    let complementarity = sol.mu.iter().zip(&g).map(|(m, gi)| m * gi.abs()).sum();
    let gap = sol.c - dual;
    let status = if gap.abs() <= cfg.gap_tol * (1.0 + sol.c.abs()) && viol <= cfg.feas_tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIterations
    };
    let _ = sol.dual;
    Ok(SolveReport {
        status,
        primal_value: sol.c,
        plan: plan_from_positions(&prog, &sol.phi)?,
        certificate: Some(cert),
        dual_value: dual,
        duality_gap: gap,
        kkt_residuals: KktResiduals {
            primal_infeasibility: viol,
            certificate_martingale: 0.0,
            complementarity,
            dual_stationarity: sol.dual_stationarity,
        },
        iterations: sol.iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Best martingale certificate for the claim, warm-started from the primal
/// multipliers and refined by projected spectral-gradient ascent over the
/// leaf values. `dual_value` already subtracts `Z~_0 . z~`.
pub fn maximize_dual(
    tree: &ScenarioTree,
    claim: &Claim,
    friction: &FrictionSpec,
    cfg: &SolverConfig,
) -> Result<DualSolution> {
    let (w, z) = check_inputs(tree, claim, friction, cfg)?;
    let prog = Program::new(tree, friction, w, z.clone(), cfg.settlement)?;
    let sol = solve_program(&prog, cfg)?;
    let certificate = prog.certificate(&sol.mu)?;
    let zc = certificate.validate(tree)?;
    let dual = dual_value(tree, &certificate, claim, friction)? - dot(&zc[tree.root()][1..], &z);
    Ok(DualSolution {
        certificate,
        dual_value: dual,
        converged: sol.dual_stationarity <= 1e-6,
        iterations: sol.iterations,
    })
}

/// Certificate minimizing the friction penalty alone, started from `Z^0 = 1`,
/// `Z~_T = S_T`. Returns the certificate, its penalty and whether the ascent converged.
pub(crate) fn minimize_penalty(
    tree: &ScenarioTree,
    friction: &FrictionSpec,
    settlement: Settlement,
    max_iter: usize,
) -> Result<(MartingaleCertificate, f64, bool)> {
    friction.validate()?;
    let w = vec![vec![0.0; tree.d() + 1]; tree.leaves().len()];
    let prog = Program::new(tree, friction, w, vec![0.0; tree.d()], settlement)?;
    let mut best: Option<(MartingaleCertificate, f64, bool)> = None;
    for density in [None, tilted_density(tree)] {
        let mut mu = match &density {
            Some(d) => prog.density_multipliers(d),
            None => prog.cold_multipliers(),
        };
        prog.project(&mut mu);
        let (mu, _, stat, _) = prog.polish(mu, max_iter, false);
        let cert = prog.certificate(&mu)?;
        let pen = certificate_penalty(tree, &cert, friction)?;
        if best.as_ref().is_none_or(|b| pen < b.1) {
            best = Some((cert, pen, stat <= 1e-8));
        }
    }
    Ok(best.expect("at least one start"))
}

/// Leaf densities (in `tree.leaves()` order) of the measure obtained by
/// exponentially tilting each node's conditional law so that the child prices
/// average to the parent price. Nodes where no such tilt exists keep `P`.
/// `None` when no node needed a tilt.
fn tilted_density(tree: &ScenarioTree) -> Option<Vec<f64>> {
    let d = tree.d();
    let mut node_density = vec![1.0; tree.len()];
    let mut tilted = false;
    for i in 0..tree.len() {
        if tree.is_leaf(i) {
            continue;
        }
        let kids = tree.children(i);
        let s = tree.price(i);
        let x: Vec<Vec<f64>> = kids
            .iter()
            .map(|&c| tree.price(c).iter().zip(s).map(|(a, b)| a - b).collect())
            .collect();
        let q: Vec<f64> = kids.iter().map(|&c| tree.node(c).q).collect();
        let scale = 1.0 + s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(w) = martingale_tilt(&q, &x, d, 1e-13 * scale) {
            tilted |= w.iter().zip(&q).any(|(a, b)| (a - b).abs() > 0.0);
            for (&c, (wc, qc)) in kids.iter().zip(w.iter().zip(&q)) {
                node_density[c] = wc / qc;
            }
        }
    }
    if !tilted {
        return None;
    }
    for i in 0..tree.len() {
        if let Some(p) = tree.node(i).parent {
            node_density[i] *= node_density[p];
        }
    }
    Some(tree.leaves().iter().map(|&l| node_density[l]).collect())
}

/// Probabilities `q_j e^{theta . x_j} / sum` with zero mean of `x`, found by
/// Newton's method on the convex `theta -> ln sum q_j e^{theta . x_j}`.
fn martingale_tilt(q: &[f64], x: &[Vec<f64>], d: usize, tol: f64) -> Option<Vec<f64>> {
    let mut theta = nalgebra::DVector::<f64>::zeros(d);
    let weights = |theta: &nalgebra::DVector<f64>| {
        let e: Vec<f64> = x
            .iter()
            .map(|xj| xj.iter().zip(theta.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let top = e.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let w: Vec<f64> = q
            .iter()
            .zip(&e)
            .map(|(qj, ej)| qj * (ej - top).exp())
            .collect();
        let tot: f64 = w.iter().sum();
        w.into_iter().map(|v| v / tot).collect::<Vec<f64>>()
    };
    let log_partition = |theta: &nalgebra::DVector<f64>| {
        let e: Vec<f64> = x
            .iter()
            .map(|xj| xj.iter().zip(theta.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let top = e.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        top + q
            .iter()
            .zip(&e)
            .map(|(qj, ej)| qj * (ej - top).exp())
            .sum::<f64>()
            .ln()
    };
    for _ in 0..100 {
        let w = weights(&theta);
        let mut grad = nalgebra::DVector::<f64>::zeros(d);
        for (wj, xj) in w.iter().zip(x) {
            grad += nalgebra::DVector::from_column_slice(xj) * *wj;
        }
        if grad.amax() <= tol {
            return Some(w);
        }
        let mut hess = nalgebra::DMatrix::<f64>::identity(d, d) * 1e-14;
        for (wj, xj) in w.iter().zip(x) {
            let c = nalgebra::DVector::from_column_slice(xj) - &grad;
            hess += &c * c.transpose() * *wj;
        }
        let step = hess.lu().solve(&grad)?;
        let f0 = log_partition(&theta);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            if log_partition(&cand) <= f0 - 1e-4 * t * slope {
                theta = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return None;
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakDualityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// If the plan started from `z` dominates the claim, `Z_0 . z` is at least the
/// certificate's dual value.
pub fn verify_weak_duality(
    tree: &ScenarioTree,
    z: &[f64],
    plan: &TradingRatePlan,
    claim: &Claim,
    cert: &MartingaleCertificate,
    friction: &FrictionSpec,
) -> Result<WeakDualityCheck> {
    let w = claim.indexed(tree)?;
    let states = roll_forward_tree(tree, z, plan, friction)?;
    for (pos, &l) in tree.leaves().iter().enumerate() {
        let v = std::iter::once(states[l].v0).chain(states[l].v.iter().copied());
        for (vi, wi) in v.zip(&w[pos]) {
            let shortfall = wi - vi;
            if shortfall > 1e-9 * (1.0 + wi.abs()) {
                return Err(Error::PlanInfeasibleForClaim {
                    leaf: tree.node(l).id as usize,
                    shortfall,
                });
            }
        }
    }
    let zc = cert.validate(tree)?;
    let lhs = dot(&zc[tree.root()], z);
    let rhs = dual_value(tree, cert, claim, friction)?;
    Ok(WeakDualityCheck {
        lhs,
        rhs,
        ok: lhs >= rhs - 1e-8,
    })
}

/// Closed-form value of the exponential-martingale certificate family for
/// GBM with quadratic impact `G_t(x) = (lambda/2) S_t x^2` and the cash claim
/// `W^0 = S_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example1Value {
    pub n: f64,
    pub x: f64,
    /// `E[Z^0_T S_T]`.
    pub terminal_moment: f64,
    /// `(1/2 lambda) int_0^T (E[S0^2 Z^0_t/S_t] - 2 S0 + E[Z^0_t S_t]) dt`.
    pub penalty: f64,
    pub value: f64,
}

/// `int_0^h e^{r t} dt`, accurate for small `r h`.
fn exp_integral(r: f64, h: f64) -> f64 {
    if r == 0.0 {
        h
    } else {
        (r * h).exp_m1() / r
    }
}

/// `Z^0` has volatility `-sigma` on `[0, T - 1/n]` and `x - sigma` afterwards,
/// `Z^1 = S0 Z^0`; every moment is an exponential in `t`, so the time integral
/// is exact.
pub fn example1_dual_family(
    params: &GbmParams,
    lambda: f64,
    horizon: f64,
    n: f64,
    x: f64,
) -> Result<Example1Value> {
    params.validate()?;
    if !(lambda > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParams("lambda and T must be positive".into()));
    }
    if !(n > 1.0 / horizon) || !(x > 0.0) {
        return Err(Error::InvalidParams("requires n > 1/T and x > 0".into()));
    }
    let GbmParams { s0, mu, sigma } = *params;
    let tau = horizon - 1.0 / n;
    let u = 1.0 / n;
    let r1 = mu - sigma * sigma;
    let r1_late = mu - sigma * sigma + x * sigma;
    let r2 = 2.0 * sigma * sigma - mu;
    let r2_late = -x * sigma + 2.0 * sigma * sigma - mu;
    let int_zs = s0 * (exp_integral(r1, tau) + (r1 * tau).exp() * exp_integral(r1_late, u));
    let int_inv = s0 * (exp_integral(r2, tau) + (r2 * tau).exp() * exp_integral(r2_late, u));
    let terminal_moment = s0 * (r1 * tau + r1_late * u).exp();
    let penalty = (int_inv - 2.0 * s0 * horizon + int_zs) / (2.0 * lambda);
    Ok(Example1Value {
        n,
        x,
        terminal_moment,
        penalty,
        value: terminal_moment - penalty,
    })
}

/// Closed-form `E[Z^0_t S_t]` and `E[S0^2 Z^0_t / S_t]` at a single time.
pub fn example1_moments(params: &GbmParams, horizon: f64, n: f64, x: f64, t: f64) -> (f64, f64) {
    let GbmParams { s0, mu, sigma } = *params;
    let tau = horizon - 1.0 / n;
    let (early, late) = (t.min(tau), (t - tau).max(0.0));
    let zs = s0 * ((mu - sigma * sigma) * early + (mu - sigma * sigma + x * sigma) * late).exp();
    let inv = s0
        * ((2.0 * sigma * sigma - mu) * early + (-x * sigma + 2.0 * sigma * sigma - mu) * late)
            .exp();
    (zs, inv)
}
