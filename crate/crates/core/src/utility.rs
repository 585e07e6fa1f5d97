//! Expected-utility maximization of terminal cash with flat (or long-only)
//! terminal asset positions, and certification of optimality through the
//! shadow price `Z = S + G'(phi)`.
//!
//! At an optimum of the flat problem, `y* dQ/dP = U'(V^0_T + W)` defines a
//! measure under which `Z` is a martingale and `E_Q sum phi . Z dt = 0`. For
//! any such pair the expected utility of every admissible plan is bounded by
//!
//! ```text
//! E U~(y dQ/dP) + y (c + E_Q[sum G*(Z - S) dt + W]),     y > 0,
//! ```
//!
//! with equality at `y = y*`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::friction::FrictionSpec;
use crate::market::ScenarioTree;
use crate::optim::{golden_section_min, lbfgs_minimize, spg_maximize, LbfgsConfig, SpgConfig};
use crate::superhedge::{KktResiduals, SolveReport, SolveStatus};
use crate::wealth::{roll_forward_tree, TradingRatePlan};

/// Concave utility of terminal cash.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    /// `U(x) = -exp(-a x)`.
    Exponential { a: f64 },
    /// `U(x) = c (1 - (1 - x)^delta)` for `x <= 0`, continued by
    /// `c delta (1 - exp(-x))` for `x > 0`.
    NegPower { c: f64, delta: f64 },
}

impl UtilitySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UtilitySpec::Exponential { a } if a > 0.0 && a.is_finite() => Ok(()),
            UtilitySpec::NegPower { c, delta }
                if c > 0.0 && c.is_finite() && delta > 1.0 && delta.is_finite() =>
            {
                Ok(())
            }
            UtilitySpec::Exponential { .. } => Err(Error::InvalidUtility(
                "exponential utility needs a > 0".into(),
            )),
            UtilitySpec::NegPower { .. } => Err(Error::InvalidUtility(
                "power utility needs C > 0 and delta > 1".into(),
            )),
        }
    }

    pub fn u(&self, x: f64) -> f64 {
        match *self {
            UtilitySpec::Exponential { a } => -(-a * x).exp(),
            UtilitySpec::NegPower { c, delta } => {
                if x <= 0.0 {
                    c * (1.0 - (1.0 - x).powf(delta))
                } else {
                    -c * delta * (-x).exp_m1()
                }
            }
        }
    }

    pub fn u_prime(&self, x: f64) -> f64 {
        match *self {
            UtilitySpec::Exponential { a } => a * (-a * x).exp(),
            UtilitySpec::NegPower { c, delta } => {
                if x <= 0.0 {
                    c * delta * (1.0 - x).powf(delta - 1.0)
                } else {
                    c * delta * (-x).exp()
                }
            }
        }
    }

    /// Convex conjugate `U~(y) = sup_x U(x) - x y` for `y >= 0`.
    pub fn conjugate(&self, y: f64) -> f64 {
        if y < 0.0 {
            return f64::INFINITY;
        }
        match *self {
            UtilitySpec::Exponential { a } => {
                if y == 0.0 {
                    0.0
                } else {
                    (y / a) * ((y / a).ln() - 1.0)
                }
            }
            UtilitySpec::NegPower { c, delta } => {
                let knee = c * delta;
                if y >= knee {
                    let r = (y / knee).powf(1.0 / (delta - 1.0));
                    c * (1.0 - r.powf(delta)) - (1.0 - r) * y
                } else if y == 0.0 {
                    knee
                } else {
                    knee - y + y * (y / knee).ln()
                }
            }
        }
    }

    /// `(C, delta)` with `U(x) <= -C |x|^delta` for all `x <= 0`.
    pub fn declared_growth(&self) -> (f64, f64) {
        match *self {
            // min_{t > 0} exp(a t) / t^2 = (a e / 2)^2, halved for margin.
            UtilitySpec::Exponential { a } => (0.5 * (a * std::f64::consts::E / 2.0).powi(2), 2.0),
            UtilitySpec::NegPower { c, delta } => (c, delta),
        }
    }

    /// Checks monotonicity, concavity, the growth bound and the Fenchel
    /// identity `U~(U'(x)) = U(x) - x U'(x)` on a probe grid.
    pub fn check_properties(&self) -> Result<()> {
        self.validate()?;
        let xs: Vec<f64> = (0..=400).map(|i| -10.0 + 0.05 * i as f64).collect();
        let (cg, delta) = self.declared_growth();
        for w in xs.windows(2) {
            let (u0, u1) = (self.u(w[0]), self.u(w[1]));
            let (d0, d1) = (self.u_prime(w[0]), self.u_prime(w[1]));
            if u1 < u0 || !(d1 < d0) || d1 <= 0.0 {
                return Err(Error::InvalidUtility(format!(
                    "not increasing and strictly concave near x = {}",
                    w[0]
                )));
            }
        }
        for &x in &xs {
            let u = self.u(x);
            if x <= 0.0 && u > -cg * x.abs().powf(delta) + 1e-12 {
                return Err(Error::InvalidUtility(format!(
                    "growth bound fails at x = {x}"
                )));
            }
            let fenchel = self.conjugate(self.u_prime(x)) - (u - x * self.u_prime(x));
            if fenchel.abs() > 1e-9 * (1.0 + u.abs() + (x * self.u_prime(x)).abs()) {
                return Err(Error::InvalidUtility(format!(
                    "Fenchel identity off by {fenchel:e} at x = {x}"
                )));
            }
        }
        Ok(())
    }
}

/// Terminal restriction on the risky positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintClass {
    /// `V^i_T = 0`.
    #[default]
    Flat,
    /// `V^i_T >= 0`.
    Nonneg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityConfig {
    pub max_iter: usize,
    /// Infinity-norm target for the (projected) objective gradient.
    pub grad_tol: f64,
    pub constraint_class: ConstraintClass,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig {
            max_iter: 5000,
            grad_tol: 1e-9,
            constraint_class: ConstraintClass::Flat,
        }
    }
}

/// Bounded cash endowment `W` received at the horizon, keyed by leaf id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endowment {
    pub leaf_values: BTreeMap<u64, f64>,
}

impl Endowment {
    pub fn from_leaf_fn(tree: &ScenarioTree, f: impl Fn(usize) -> f64) -> Self {
        Endowment {
            leaf_values: tree
                .leaves()
                .iter()
                .map(|&l| (tree.node(l).id, f(l)))
                .collect(),
        }
    }

    pub fn zero(tree: &ScenarioTree) -> Self {
        Endowment::from_leaf_fn(tree, |_| 0.0)
    }

    /// Values in `tree.leaves()` order.
    pub fn indexed(&self, tree: &ScenarioTree) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tree.leaves().len());
        for &l in tree.leaves() {
            let id = tree.node(l).id;
            match self.leaf_values.get(&id) {
                Some(w) if w.is_finite() => out.push(*w),
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "endowment needs a finite value at leaf {id}"
                    )))
                }
            }
        }
        if self.leaf_values.len() != out.len() {
            return Err(Error::ShapeMismatch(
                "endowment has values at non-leaf or unknown nodes".into(),
            ));
        }
        Ok(out)
    }
}

/// The utility program in reduced coordinates.
///
/// Rates at the last trading level are eliminated through the terminal
/// constraint: `phi_m dt_m = s_m - sum_{ancestors} phi dt`, with `s = 0` for
/// [`ConstraintClass::Flat`] and `s >= 0` an extra variable for
/// [`ConstraintClass::Nonneg`]. The variables are the rates at the earlier
/// trading nodes followed by the slacks.
pub struct UtilityProblem<'a> {
    tree: &'a ScenarioTree,
    friction: &'a FrictionSpec,
    utility: UtilitySpec,
    c: f64,
    w: Vec<f64>,
    class: ConstraintClass,
    d: usize,
    trading: Vec<usize>,
    /// Variable slot of each trading position at earlier levels.
    slot: Vec<Option<usize>>,
    /// Trading positions at the last trading level.
    last: Vec<usize>,
    /// Strict trading ancestors of each position in `last`.
    last_anc: Vec<Vec<usize>>,
    dt: Vec<f64>,
}

impl<'a> UtilityProblem<'a> {
    pub fn new(
        tree: &'a ScenarioTree,
        c: f64,
        endowment: &Endowment,
        utility: UtilitySpec,
        friction: &'a FrictionSpec,
        class: ConstraintClass,
    ) -> Result<Self> {
        utility.validate()?;
        friction.validate()?;
        if let Some(d) = friction.fixed_dimension() {
            if d != tree.d() {
                return Err(Error::ShapeMismatch(format!(
                    "friction is {d}-dimensional, tree has d = {}",
                    tree.d()
                )));
            }
        }
        if !c.is_finite() {
            return Err(Error::InvalidParams("initial cash must be finite".into()));
        }
        let w = endowment.indexed(tree)?;
        let d = tree.d();
        let trading: Vec<usize> = tree.trading_nodes().collect();
        let mut pos = vec![usize::MAX; tree.len()];
        for (p, &i) in trading.iter().enumerate() {
            pos[i] = p;
        }
        let last_level = tree.steps() - 1;
        let mut slot = vec![None; trading.len()];
        let mut next = 0;
        let mut last = Vec::new();
        for (p, &i) in trading.iter().enumerate() {
            if tree.node(i).k == last_level {
                last.push(p);
            } else {
                slot[p] = Some(next);
                next += 1;
            }
        }
        let last_anc = last
            .iter()
            .map(|&p| {
                let chain = tree.ancestry(trading[p]);
                chain[..chain.len() - 1].iter().map(|&i| pos[i]).collect()
            })
            .collect();
        let dt = trading
            .iter()
            .map(|&i| tree.grid().dt(tree.node(i).k))
            .collect();
        Ok(UtilityProblem {
            tree,
            friction,
            utility,
            c,
            w,
            class,
            d,
            trading,
            slot,
            last,
            last_anc,
            dt,
        })
    }

    fn n_free(&self) -> usize {
        (self.trading.len() - self.last.len()) * self.d
    }

    pub fn n_vars(&self) -> usize {
        match self.class {
            ConstraintClass::Flat => self.n_free(),
            ConstraintClass::Nonneg => self.n_free() + self.last.len() * self.d,
        }
    }

    /// Clips the slack variables at zero.
    pub fn project(&self, x: &mut [f64]) {
        let nf = self.n_free();
        x[nf..].iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Full rate vector, `d` entries per trading position.
    pub fn rates(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut phi = vec![0.0; self.trading.len() * d];
        for (p, s) in self.slot.iter().enumerate() {
            if let Some(s) = s {
                phi[p * d..(p + 1) * d].copy_from_slice(&x[s * d..(s + 1) * d]);
            }
        }
        let nf = self.n_free();
        for (j, &m) in self.last.iter().enumerate() {
            for a in 0..d {
                let mut held: f64 = self.last_anc[j]
                    .iter()
                    .map(|&p| phi[p * d + a] * self.dt[p])
                    .sum();
                if self.class == ConstraintClass::Nonneg {
                    held -= x[nf + j * d + a];
                }
                phi[m * d + a] = -held / self.dt[m];
            }
        }
        phi
    }

    pub fn plan(&self, x: &[f64]) -> Result<TradingRatePlan> {
        let phi = self.rates(x);
        let mut rates = vec![vec![0.0; self.d]; self.tree.len()];
        for (p, &i) in self.trading.iter().enumerate() {
            rates[i] = phi[p * self.d..(p + 1) * self.d].to_vec();
        }
        TradingRatePlan::from_node_rates(self.tree, &rates)
    }

    /// Terminal cash `V^0_T + W` per leaf for full rates `phi`.
    fn terminal_cash(&self, phi: &[f64], dcost: Option<&mut [f64]>) -> Result<Vec<f64>> {
        let d = self.d;
        let mut cost = vec![0.0; self.trading.len()];
        let mut dcost = dcost;
        for (p, &i) in self.trading.iter().enumerate() {
            let s = self.tree.price(i);
            let x = &phi[p * d..(p + 1) * d];
            let g = self.friction.eval_g(s, x)?;
            cost[p] = (x.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() + g) * self.dt[p];
            if let Some(dc) = dcost.as_deref_mut() {
                let gp = self.friction.eval_subgradient(s, x)?;
                for a in 0..d {
                    dc[p * d + a] = (s[a] + gp[a]) * self.dt[p];
                }
            }
        }
        // Cumulative cost down the tree.
        let mut spent = vec![0.0; self.tree.len()];
        let mut pos = vec![usize::MAX; self.tree.len()];
        for (p, &i) in self.trading.iter().enumerate() {
            pos[i] = p;
        }
        for i in 0..self.tree.len() {
            if let Some(par) = self.tree.node(i).parent {
                spent[i] = spent[par] + cost[pos[par]];
            }
        }
        Ok(self
            .tree
            .leaves()
            .iter()
            .zip(&self.w)
            .map(|(&l, w)| self.c - spent[l] + w)
            .collect())
    }

    /// Expected utility at `x` and its gradient. Returns `-inf` where the
    /// friction or the utility is not finite.
    pub fn objective(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.d;
        let phi = self.rates(x);
        let mut dcost = vec![0.0; phi.len()];
        let Ok(xt) = self.terminal_cash(&phi, Some(&mut dcost)) else {
            return f64::NEG_INFINITY;
        };
        let mut val = 0.0;
        // weight[i] = sum over leaves below node i of P(leaf) U'(X_leaf)
        let mut weight = vec![0.0; self.tree.len()];
        for (&l, xl) in self.tree.leaves().iter().zip(&xt) {
            let p = self.tree.prob(l);
            val += p * self.utility.u(*xl);
            weight[l] = p * self.utility.u_prime(*xl);
        }
        if !val.is_finite() {
            return f64::NEG_INFINITY;
        }
        for i in (0..self.tree.len()).rev() {
            if let Some(par) = self.tree.node(i).parent {
                weight[par] += weight[i];
            }
        }
        let mut g_full = vec![0.0; phi.len()];
        for (p, &i) in self.trading.iter().enumerate() {
            for a in 0..d {
                g_full[p * d + a] = -weight[i] * dcost[p * d + a];
            }
        }
        grad.iter_mut().for_each(|v| *v = 0.0);
        for (p, s) in self.slot.iter().enumerate() {
            if let Some(s) = s {
                grad[s * d..(s + 1) * d].copy_from_slice(&g_full[p * d..(p + 1) * d]);
            }
        }
        let nf = self.n_free();
        for (j, &m) in self.last.iter().enumerate() {
            for a in 0..d {
                let gm = g_full[m * d + a] / self.dt[m];
                for &p in &self.last_anc[j] {
                    let s = self.slot[p].expect("ancestors are free positions");
                    grad[s * d + a] -= gm * self.dt[p];
                }
                if self.class == ConstraintClass::Nonneg {
                    grad[nf + j * d + a] = gm;
                }
            }
        }
        val
    }
}

/// Maximizes `E U(V^0_T + W)` from initial cash `c` with no initial shares.
/// The report carries the objective as `primal_value` and, for
/// differentiable frictions, the certified upper bound as `dual_value`.
pub fn maximize_utility(
    tree: &ScenarioTree,
    c: f64,
    endowment: &Endowment,
    utility: &UtilitySpec,
    friction: &FrictionSpec,
    cfg: &UtilityConfig,
) -> Result<SolveReport> {
    let start = Instant::now();
    if !friction.is_differentiable() {
        return Err(Error::NotDifferentiable(friction.kind.name()));
    }
    let prob = UtilityProblem::new(tree, c, endowment, *utility, friction, cfg.constraint_class)?;
    let n = prob.n_vars();
    let x0 = vec![0.0; n];
    let mut g = vec![0.0; n];
    if !prob.objective(&x0, &mut g).is_finite() {
        return Err(Error::NonIntegrableUtility);
    }
    let sol = match cfg.constraint_class {
        ConstraintClass::Flat => {
            let mut f = |x: &[f64], g: &mut [f64]| {
                let v = prob.objective(x, g);
                g.iter_mut().for_each(|v| *v = -*v);
                -v
            };
            let lb = LbfgsConfig {
                memory: 12,
                max_iter: cfg.max_iter,
                grad_tol: cfg.grad_tol,
            };
            let mut s = lbfgs_minimize(&mut f, x0, lb);
            s.f = -s.f;
            s
        }
        ConstraintClass::Nonneg => {
            let mut f = |x: &[f64], g: &mut [f64]| prob.objective(x, g);
            let proj = |x: &mut [f64]| prob.project(x);
            spg_maximize(
                &mut f,
                &proj,
                x0,
                SpgConfig {
                    max_iter: cfg.max_iter,
                    tol: cfg.grad_tol,
                    memory: 10,
                },
            )
        }
    };
    let plan = prob.plan(&sol.x)?;
    let foc = foc_residuals(
        tree,
        &plan,
        c,
        endowment,
        utility,
        friction,
        cfg.constraint_class,
    )?;
    let objective = sol.f;
    let status = if sol.stationarity <= cfg.grad_tol || sol.converged {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIterations
    };
    Ok(SolveReport {
        status,
        primal_value: objective,
        plan,
        certificate: None,
        dual_value: objective + foc.duality_gap_bound,
        duality_gap: -foc.duality_gap_bound,
        kkt_residuals: KktResiduals {
            primal_infeasibility: foc.terminal_position,
            certificate_martingale: foc.martingale_residual,
            complementarity: foc.orthogonality_residual,
            dual_stationarity: sol.stationarity,
        },
        iterations: sol.iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Terminal asset positions above this are not flat.
pub const FLAT_TOL: f64 = 1e-8;

/// First-order optimality diagnostics of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocReport {
    pub y_star: f64,
    /// `dQ/dP` per leaf id.
    pub q_density: BTreeMap<u64, f64>,
    /// `Z = S + G'(phi)` per trading node id.
    pub shadow_price: BTreeMap<u64, Vec<f64>>,
    pub martingale_residual: f64,
    pub orthogonality_residual: f64,
    pub duality_gap_bound: f64,
    pub objective: f64,
    /// Largest `|V^i_T|` over leaves and assets.
    pub terminal_position: f64,
    pub optimal_certified: bool,
    /// Growth constants `(C, delta)` with `U(x) <= -C |x|^delta` on `x <= 0`.
    pub growth_c: f64,
    pub growth_delta: f64,
    /// Hoelder conjugate `delta / (delta - 1)`.
    pub eta: f64,
}

/// Computes `y*`, `dQ/dP`, the shadow price and the residuals of the
/// optimality conditions for a flat plan.
pub fn verify_foc(
    tree: &ScenarioTree,
    plan: &TradingRatePlan,
    c: f64,
    endowment: &Endowment,
    utility: &UtilitySpec,
    friction: &FrictionSpec,
    tol: f64,
) -> Result<FocReport> {
    let mut rep = foc_residuals(
        tree,
        plan,
        c,
        endowment,
        utility,
        friction,
        ConstraintClass::Flat,
    )?;
    rep.optimal_certified = rep.martingale_residual <= tol && rep.orthogonality_residual <= tol;
    Ok(rep)
}

fn foc_residuals(
    tree: &ScenarioTree,
    plan: &TradingRatePlan,
    c: f64,
    endowment: &Endowment,
    utility: &UtilitySpec,
    friction: &FrictionSpec,
    class: ConstraintClass,
) -> Result<FocReport> {
    utility.validate()?;
    let d = tree.d();
    let w = endowment.indexed(tree)?;
    let mut z0 = vec![0.0; d + 1];
    z0[0] = c;
    let states = roll_forward_tree(tree, &z0, plan, friction)?;
    let mut terminal_position: f64 = 0.0;
    for &l in tree.leaves() {
        for &v in &states[l].v {
            let bad = match class {
                ConstraintClass::Flat => v.abs(),
                ConstraintClass::Nonneg => -v,
            };
            terminal_position = terminal_position.max(bad);
        }
    }
    if terminal_position > FLAT_TOL {
        return Err(Error::PlanNotFlat(terminal_position));
    }
    let xt: Vec<f64> = tree
        .leaves()
        .iter()
        .zip(&w)
        .map(|(&l, wl)| states[l].v0 + wl)
        .collect();
    let objective: f64 = tree
        .leaves()
        .iter()
        .zip(&xt)
        .map(|(&l, x)| tree.prob(l) * utility.u(*x))
        .sum();
    let y_star: f64 = tree
        .leaves()
        .iter()
        .zip(&xt)
        .map(|(&l, x)| tree.prob(l) * utility.u_prime(*x))
        .sum();
    if !(y_star > 0.0 && y_star.is_finite()) {
        return Err(Error::NonIntegrableUtility);
    }
    let q: Vec<f64> = xt.iter().map(|x| utility.u_prime(*x) / y_star).collect();
    let rates = plan.node_rates_indexed(tree)?;
    let mut z = vec![Vec::new(); tree.len()];
    for i in tree.trading_nodes() {
        let s = tree.price(i);
        let gp = friction.eval_g_prime(s, &rates[i])?;
        z[i] = s.iter().zip(&gp).map(|(a, b)| a + b).collect();
    }
    let qm = node_mass(tree, &q);
    let mut martingale_residual: f64 = 0.0;
    for i in tree.trading_nodes() {
        let kids = tree.children(i);
        if kids.iter().any(|&k| tree.is_leaf(k)) {
            continue;
        }
        for a in 0..d {
            let m: f64 = kids.iter().map(|&k| qm[k] * z[k][a]).sum::<f64>() / qm[i];
            martingale_residual = martingale_residual.max((m - z[i][a]).abs());
        }
    }
    let orth: f64 = tree
        .trading_nodes()
        .map(|i| {
            let dt = tree.grid().dt(tree.node(i).k);
            qm[i]
                * dt
                * rates[i]
                    .iter()
                    .zip(&z[i])
                    .map(|(p, zi)| p * zi)
                    .sum::<f64>()
        })
        .sum();
    let q_density: BTreeMap<u64, f64> = tree
        .leaves()
        .iter()
        .zip(&q)
        .map(|(&l, v)| (tree.node(l).id, *v))
        .collect();
    let shadow_price: BTreeMap<u64, Vec<f64>> = tree
        .trading_nodes()
        .map(|i| (tree.node(i).id, z[i].clone()))
        .collect();
    let gap = duality_gap_bound_unchecked(
        tree,
        c,
        &w,
        utility,
        friction,
        &q,
        &z,
        objective,
        Some(y_star),
    )?;
    let (growth_c, growth_delta) = utility.declared_growth();
    Ok(FocReport {
        y_star,
        q_density,
        shadow_price,
        martingale_residual,
        orthogonality_residual: orth.abs(),
        duality_gap_bound: gap,
        objective,
        terminal_position,
        optimal_certified: false,
        growth_c,
        growth_delta,
        eta: growth_delta / (growth_delta - 1.0),
    })
}

/// `Q(n)` for every node from leaf densities in `tree.leaves()` order.
fn node_mass(tree: &ScenarioTree, q: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; tree.len()];
    for (&l, ql) in tree.leaves().iter().zip(q) {
        m[l] = tree.prob(l) * ql;
    }
    for i in (0..tree.len()).rev() {
        if let Some(p) = tree.node(i).parent {
            m[p] += m[i];
        }
    }
    m
}

/// Density tolerance `|E_P dQ/dP - 1|`.
pub const DENSITY_TOL: f64 = 1e-10;
/// Martingale tolerance for the shadow price, relative to `1 + max |Z|`.
pub const SHADOW_MARTINGALE_TOL: f64 = 1e-5;

/// Right side of the utility upper bound at a single `y > 0`.
#[allow(clippy::too_many_arguments)]
pub fn utility_upper_bound(
    tree: &ScenarioTree,
    c: f64,
    endowment: &Endowment,
    utility: &UtilitySpec,
    friction: &FrictionSpec,
    q_density: &BTreeMap<u64, f64>,
    shadow_price: &BTreeMap<u64, Vec<f64>>,
    y: f64,
) -> Result<f64> {
    let (w, q, z) = check_dual_pair(tree, endowment, utility, q_density, shadow_price)?;
    let lin = dual_linear_term(tree, &w, friction, &q, &z)?;
    Ok(bound_at(tree, utility, &q, c + lin, y))
}

/// Minimum over `y > 0` of the utility upper bound built from `(Q, Z)`,
/// minus `objective`. Rejects pairs where `dQ/dP` is not a positive density
/// or `Z` is not a `Q`-martingale on the trading nodes.
#[allow(clippy::too_many_arguments)]
pub fn duality_gap_bound(
    tree: &ScenarioTree,
    c: f64,
    endowment: &Endowment,
    utility: &UtilitySpec,
    friction: &FrictionSpec,
    q_density: &BTreeMap<u64, f64>,
    shadow_price: &BTreeMap<u64, Vec<f64>>,
    objective: f64,
) -> Result<f64> {
    let (w, q, z) = check_dual_pair(tree, endowment, utility, q_density, shadow_price)?;
    duality_gap_bound_unchecked(tree, c, &w, utility, friction, &q, &z, objective, None)
}

type DualPair = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

fn check_dual_pair(
    tree: &ScenarioTree,
    endowment: &Endowment,
    utility: &UtilitySpec,
    q_density: &BTreeMap<u64, f64>,
    shadow_price: &BTreeMap<u64, Vec<f64>>,
) -> Result<DualPair> {
    utility.validate()?;
    let w = endowment.indexed(tree)?;
    let mut q = Vec::with_capacity(tree.leaves().len());
    for &l in tree.leaves() {
        let id = tree.node(l).id;
        match q_density.get(&id) {
            Some(v) if *v > 0.0 && v.is_finite() => q.push(*v),
            _ => {
                return Err(Error::Precondition(format!(
                    "density must be positive and finite at leaf {id}"
                )))
            }
        }
    }
    let mean: f64 = tree
        .leaves()
        .iter()
        .zip(&q)
        .map(|(&l, v)| tree.prob(l) * v)
        .sum();
    if (mean - 1.0).abs() > DENSITY_TOL {
        return Err(Error::Precondition(format!(
            "density has mean {mean}, expected 1"
        )));
    }
    let mut z = vec![Vec::new(); tree.len()];
    for i in tree.trading_nodes() {
        let id = tree.node(i).id;
        match shadow_price.get(&id) {
            Some(v) if v.len() == tree.d() && v.iter().all(|x| x.is_finite()) => z[i] = v.clone(),
            _ => {
                return Err(Error::Precondition(format!(
                    "shadow price needs {} finite values at node {id}",
                    tree.d()
                )))
            }
        }
    }
    let scale = 1.0 + z.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let qm = node_mass(tree, &q);
    for i in tree.trading_nodes() {
        let kids = tree.children(i);
        if kids.iter().any(|&k| tree.is_leaf(k)) {
            continue;
        }
        for a in 0..tree.d() {
            let m: f64 = kids.iter().map(|&k| qm[k] * z[k][a]).sum::<f64>() / qm[i];
            if (m - z[i][a]).abs() > SHADOW_MARTINGALE_TOL * scale {
                return Err(Error::Precondition(format!(
                    "shadow price is not a Q-martingale at node {}",
                    tree.node(i).id
                )));
            }
        }
    }
    Ok((w, q, z))
}

/// `E_Q[sum G*(Z - S) dt + W]`.
fn dual_linear_term(
    tree: &ScenarioTree,
    w: &[f64],
    friction: &FrictionSpec,
    q: &[f64],
    z: &[Vec<f64>],
) -> Result<f64> {
    let qm = node_mass(tree, q);
    let mut lin: f64 = tree.leaves().iter().zip(w).map(|(&l, wl)| qm[l] * wl).sum();
    for i in tree.trading_nodes() {
        let s = tree.price(i);
        let y: Vec<f64> = z[i].iter().zip(s).map(|(a, b)| a - b).collect();
        lin += qm[i] * tree.grid().dt(tree.node(i).k) * friction.eval_g_star(s, &y)?.value;
    }
    Ok(lin)
}

fn bound_at(tree: &ScenarioTree, utility: &UtilitySpec, q: &[f64], shift: f64, y: f64) -> f64 {
    let e: f64 = tree
        .leaves()
        .iter()
        .zip(q)
        .map(|(&l, ql)| tree.prob(l) * utility.conjugate(y * ql))
        .sum();
    e + y * shift
}

#[allow(clippy::too_many_arguments)]
fn duality_gap_bound_unchecked(
    tree: &ScenarioTree,
    c: f64,
    w: &[f64],
    utility: &UtilitySpec,
    friction: &FrictionSpec,
    q: &[f64],
    z: &[Vec<f64>],
    objective: f64,
    hint: Option<f64>,
) -> Result<f64> {
    let shift = c + dual_linear_term(tree, w, friction, q, z)?;
    let mut f = |ly: f64| bound_at(tree, utility, q, shift, ly.exp());
    let mut grid: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.25).collect();
    if let Some(y) = hint {
        grid.push(y.ln());
        grid.sort_by(|a, b| a.total_cmp(b));
    }
    let vals: Vec<f64> = grid.iter().map(|&ly| f(ly)).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .expect("grid is not empty");
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (_, refined) = golden_section_min(&mut f, lo, hi, 1e-12);
    Ok(refined.min(vals[best]) - objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{NodeSpec, TimeGrid};

    fn two_step() -> ScenarioTree {
        let mut specs = vec![NodeSpec {
            id: 0,
            parent: None,
            k: 0,
            q: 1.0,
            s: vec![1.0],
        }];
        let lvl1 = [(1, 1.3), (2, 0.8)];
        for (id, s) in lvl1 {
            specs.push(NodeSpec {
                id,
                parent: Some(0),
                k: 1,
                q: 0.5,
                s: vec![s],
            });
        }
        let mut id = 3;
        for (pid, s) in lvl1 {
            for f in [1.2, 0.9] {
                specs.push(NodeSpec {
                    id,
                    parent: Some(pid),
                    k: 2,
                    q: 0.5,
                    s: vec![s * f],
                });
                id += 1;
            }
        }
        ScenarioTree::new(1, TimeGrid::uniform(1.0, 2).unwrap(), specs).unwrap()
    }

    #[test]
    fn utility_kinds_pass_their_checks() {
        UtilitySpec::Exponential { a: 1.0 }
            .check_properties()
            .unwrap();
        UtilitySpec::Exponential { a: 0.3 }
            .check_properties()
            .unwrap();
        UtilitySpec::NegPower { c: 1.0, delta: 2.0 }
            .check_properties()
            .unwrap();
        UtilitySpec::NegPower { c: 0.5, delta: 1.3 }
            .check_properties()
            .unwrap();
        assert!(UtilitySpec::NegPower { c: 1.0, delta: 1.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = two_step();
        let f = FrictionSpec::power_scalar(0.7, 2.5);
        let w = Endowment::from_leaf_fn(&t, |l| 0.1 * l as f64);
        for class in [ConstraintClass::Flat, ConstraintClass::Nonneg] {
            let p =
                UtilityProblem::new(&t, 0.2, &w, UtilitySpec::Exponential { a: 1.5 }, &f, class)
                    .unwrap();
            let x: Vec<f64> = (0..p.n_vars())
                .map(|i| 0.3 - 0.2 * i as f64)
                .map(f64::abs)
                .collect();
            let mut g = vec![0.0; x.len()];
            p.objective(&x, &mut g);
            for i in 0..x.len() {
                let h = 1e-6;
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let mut sink = vec![0.0; x.len()];
                let fd = (p.objective(&xp, &mut sink) - p.objective(&xm, &mut sink)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-7 * (1.0 + g[i].abs()),
                    "{class:?} {i}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn solver_output_is_certified() {
        let t = two_step();
        let f = FrictionSpec::power_scalar(1.0, 2.0);
        let u = UtilitySpec::Exponential { a: 1.0 };
        let w = Endowment::zero(&t);
        let r = maximize_utility(&t, 0.0, &w, &u, &f, &UtilityConfig::default()).unwrap();
        let foc = verify_foc(&t, &r.plan, 0.0, &w, &u, &f, 1e-6).unwrap();
        assert!(foc.optimal_certified, "{foc:?}");
        assert!(
            foc.duality_gap_bound.abs() < 1e-8,
            "{}",
            foc.duality_gap_bound
        );
        assert!((foc.objective - r.primal_value).abs() < 1e-12);
    }

    #[test]
    fn unflat_plan_is_rejected() {
        let t = two_step();
        let f = FrictionSpec::power_scalar(1.0, 2.0);
        let rates: Vec<Vec<f64>> = (0..t.len()).map(|_| vec![0.1]).collect();
        let plan = TradingRatePlan::from_node_rates(&t, &rates).unwrap();
        let r = verify_foc(
            &t,
            &plan,
            0.0,
            &Endowment::zero(&t),
            &UtilitySpec::Exponential { a: 1.0 },
            &f,
            1e-6,
        );
        assert!(matches!(r, Err(Error::PlanNotFlat(_))));
    }
}
