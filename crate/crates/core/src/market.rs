//! Finite market representations: time grids, scenario trees with adapted
//! prices, and Monte Carlo path ensembles (GBM and fractional Brownian motion).
//!
//! Prices are treated as constant on `[t_k, t_{k+1})`, so every time integral
//! along a path is the left-endpoint sum over the grid steps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing times `0 = t_0 < ... < t_M = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(times: Vec<f64>) -> Result<Self> {
        TimeGrid::new(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid("need at least two time points".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid("first time must be 0".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid(
                "times must be finite and strictly increasing".into(),
            ));
        }
        Ok(TimeGrid { times })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::InvalidGrid(
                "horizon must be positive and steps >= 1".into(),
            ));
        }
        let mut times: Vec<f64> = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        times[steps] = horizon;
        TimeGrid::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn dts(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.horizon() / self.steps() as f64;
        self.dts().iter().all(|d| (d - h).abs() <= 1e-9 * h)
    }
}

/// Geometric Brownian motion `S_t = s0 exp((mu - sigma^2/2) t + sigma W_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub s0: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl GbmParams {
    pub fn new(s0: f64, mu: f64, sigma: f64) -> Result<Self> {
        let p = GbmParams { s0, mu, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(Error::InvalidParams("s0 must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParams("sigma must be positive".into()));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidParams("mu must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BranchingRule {
    /// Log-returns `+-sigma sqrt(dt)`, with the up-probability fixing the
    /// log-mean at `(mu - sigma^2/2) dt`; the raw second moment is `sigma^2 dt`.
    MomentMatched,
    /// Fixed multipliers per step.
    Multipliers { u: f64, d: f64, p: f64 },
}

/// Node as supplied by the caller or read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u64,
    #[serde(default)]
    pub parent: Option<u64>,
    pub k: usize,
    pub q: f64,
    #[serde(rename = "S")]
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeDoc {
    d: usize,
    grid: TimeGrid,
    nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: u64,
    pub parent: Option<usize>,
    pub k: usize,
    /// Conditional probability given the parent.
    pub q: f64,
    pub s: Vec<f64>,
}

/// Finite filtered market: a rooted tree whose level `k` holds the states at
/// time `t_k`. Nodes are stored level by level, so parents precede children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeDoc", into = "TreeDoc")]
pub struct ScenarioTree {
    d: usize,
    grid: TimeGrid,
    nodes: Vec<Node>,
    children: Vec<Vec<usize>>,
    prob: Vec<f64>,
    leaves: Vec<usize>,
    levels: Vec<Vec<usize>>,
    index_of: HashMap<u64, usize>,
}

impl TryFrom<TreeDoc> for ScenarioTree {
    type Error = Error;
    fn try_from(doc: TreeDoc) -> Result<Self> {
        ScenarioTree::new(doc.d, doc.grid, doc.nodes)
    }
}

impl From<ScenarioTree> for TreeDoc {
    fn from(t: ScenarioTree) -> Self {
        let nodes = t
            .nodes
            .iter()
            .map(|n| NodeSpec {
                id: n.id,
                parent: n.parent.map(|p| t.nodes[p].id),
                k: n.k,
                q: n.q,
                s: n.s.clone(),
            })
            .collect();
        TreeDoc {
            d: t.d,
            grid: t.grid,
            nodes,
        }
    }
}

/// Tolerance on conditional probability sums for externally supplied trees.
pub const PROB_SUM_TOL: f64 = 1e-9;

impl ScenarioTree {
    pub fn new(d: usize, grid: TimeGrid, specs: Vec<NodeSpec>) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidTree(m));
        if d == 0 {
            return bad("asset count d must be positive".into());
        }
        let m = grid.steps();
        let mut id_pos: HashMap<u64, usize> = HashMap::new();
        for (i, n) in specs.iter().enumerate() {
            if id_pos.insert(n.id, i).is_some() {
                return bad(format!("duplicate node id {}", n.id));
            }
            if n.s.len() != d || n.s.iter().any(|v| !v.is_finite()) {
                return bad(format!("node {} must carry {d} finite prices", n.id));
            }
            if n.k > m {
                return bad(format!(
                    "node {} has time index {} beyond the grid",
                    n.id, n.k
                ));
            }
        }
        let roots: Vec<&NodeSpec> = specs.iter().filter(|n| n.parent.is_none()).collect();
        if roots.len() != 1 {
            return bad(format!("expected exactly one root, found {}", roots.len()));
        }
        if roots[0].k != 0 {
            return bad("root must have time index 0".into());
        }
        // Order level by level, keeping input order inside a level.
        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.sort_by_key(|&i| specs[i].k);
        let mut index_of = HashMap::new();
        for (new, &old) in order.iter().enumerate() {
            index_of.insert(specs[old].id, new);
        }
        let mut nodes = Vec::with_capacity(specs.len());
        for &old in &order {
            let sp = &specs[old];
            let parent = match sp.parent {
                None => None,
                Some(pid) => {
                    let Some(&p) = index_of.get(&pid) else {
                        return bad(format!("node {} references missing parent {pid}", sp.id));
                    };
                    if specs[order[p]].k + 1 != sp.k {
                        return bad(format!("node {} is not one level below its parent", sp.id));
                    }
                    Some(p)
                }
            };
            let q = if parent.is_none() { 1.0 } else { sp.q };
            if parent.is_none() && (sp.q - 1.0).abs() > PROB_SUM_TOL {
                return bad("root probability must be 1".into());
            }
            if !(q > 0.0 && q <= 1.0 + PROB_SUM_TOL) {
                return bad(format!(
                    "node {} has conditional probability {q} outside (0, 1]",
                    sp.id
                ));
            }
            nodes.push(Node {
                id: sp.id,
                parent,
                k: sp.k,
                q,
                s: sp.s.clone(),
            });
        }
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                children[p].push(i);
            }
        }
        for (i, n) in nodes.iter().enumerate() {
            if children[i].is_empty() {
                if n.k != m {
                    return bad(format!(
                        "leaf {} sits at level {} instead of {m}",
                        n.id, n.k
                    ));
                }
            } else {
                let sum: f64 = children[i].iter().map(|&c| nodes[c].q).sum();
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::TreeProbabilitySum {
                        node: n.id as usize,
                        sum,
                    });
                }
            }
        }
        let mut prob = vec![0.0; nodes.len()];
        for i in 0..nodes.len() {
            prob[i] = match nodes[i].parent {
                None => 1.0,
                Some(p) => prob[p] * nodes[i].q,
            };
        }
        let mut levels = vec![Vec::new(); m + 1];
        for (i, n) in nodes.iter().enumerate() {
            levels[n.k].push(i);
        }
        let leaves = levels[m].clone();
        Ok(ScenarioTree {
            d,
            grid,
            nodes,
            children,
            prob,
            leaves,
            levels,
            index_of,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    /// Unconditional probability of reaching node `i`.
    pub fn prob(&self, i: usize) -> f64 {
        self.prob[i]
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn level(&self, k: usize) -> &[usize] {
        &self.levels[k]
    }

    /// Indices of nodes at levels `0..M` (the trading nodes).
    pub fn trading_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| !self.is_leaf(i))
    }

    pub fn price(&self, i: usize) -> &[f64] {
        &self.nodes[i].s
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    /// Root-to-node index chain, one entry per level `0..=k`.
    pub fn ancestry(&self, i: usize) -> Vec<usize> {
        let mut chain = vec![i];
        let mut cur = i;
        while let Some(p) = self.nodes[cur].parent {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    /// Sum of unconditional probabilities per level.
    pub fn level_mass(&self) -> Vec<f64> {
        self.levels
            .iter()
            .map(|l| l.iter().map(|&i| self.prob[i]).sum())
            .collect()
    }

    /// Conditional expectation of a per-node quantity from its children.
    pub fn child_mean(&self, i: usize, f: impl Fn(usize) -> f64) -> f64 {
        self.children[i]
            .iter()
            .map(|&c| self.nodes[c].q * f(c))
            .sum()
    }

    pub fn max_abs_price(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|n| n.s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Whether the prices form a martingale under the tree's own probabilities.
    pub fn martingale_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in self.trading_nodes() {
            for a in 0..self.d {
                let m = self.child_mean(i, |c| self.nodes[c].s[a]);
                worst = worst.max((m - self.nodes[i].s[a]).abs());
            }
        }
        worst
    }

    /// Tree with the same structure and new prices.
    pub fn with_prices(&self, prices: impl Fn(usize) -> Vec<f64>) -> Result<Self> {
        let mut t = self.clone();
        for i in 0..t.nodes.len() {
            let s = prices(i);
            if s.len() != t.d || s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidTree(
                    "replacement prices must be finite d-vectors".into(),
                ));
            }
            t.nodes[i].s = s;
        }
        Ok(t)
    }

    /// Path-distinct tree built level by level from a branching function that
    /// maps a node's root-to-node price history to `(conditional probability,
    /// price)` pairs for its children.
    pub fn from_branching(
        d: usize,
        grid: TimeGrid,
        root_price: Vec<f64>,
        mut branch: impl FnMut(&[Vec<f64>]) -> Vec<(f64, Vec<f64>)>,
    ) -> Result<Self> {
        let m = grid.steps();
        let mut specs = vec![NodeSpec {
            id: 0,
            parent: None,
            k: 0,
            q: 1.0,
            s: root_price,
        }];
        let mut histories: Vec<Vec<Vec<f64>>> = vec![vec![specs[0].s.clone()]];
        let mut frontier = vec![0usize];
        for k in 0..m {
            let mut next = Vec::new();
            for &i in &frontier {
                let hist = histories[i].clone();
                for (q, s) in branch(&hist) {
                    let id = specs.len() as u64;
                    let mut h = hist.clone();
                    h.push(s.clone());
                    specs.push(NodeSpec {
                        id,
                        parent: Some(i as u64),
                        k: k + 1,
                        q,
                        s,
                    });
                    histories.push(h);
                    next.push(id as usize);
                }
            }
            frontier = next;
        }
        ScenarioTree::new(d, grid, specs)
    }
}

/// Binomial GBM discretization with `2^M` path-distinct leaves.
pub fn build_binomial_tree(
    params: &GbmParams,
    grid: &TimeGrid,
    rule: BranchingRule,
) -> Result<ScenarioTree> {
    params.validate()?;
    let m = grid.steps();
    let mut steps = Vec::with_capacity(m);
    for k in 0..m {
        let dt = grid.dt(k);
        let (u, d, p) = match rule {
            BranchingRule::MomentMatched => {
                let a = params.sigma * dt.sqrt();
                let mean = (params.mu - 0.5 * params.sigma * params.sigma) * dt;
                ((a).exp(), (-a).exp(), (mean + a) / (2.0 * a))
            }
            BranchingRule::Multipliers { u, d, p } => (u, d, p),
        };
        if !(d > 0.0) || !u.is_finite() || !(u > d) {
            return Err(Error::ExplosiveStep(format!(
                "multipliers u = {u}, d = {d} at step {k}"
            )));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::ExplosiveStep(format!(
                "up-probability {p} outside (0, 1) at step {k}"
            )));
        }
        steps.push((u, d, p));
    }
    ScenarioTree::from_branching(1, grid.clone(), vec![params.s0], |hist| {
        let k = hist.len() - 1;
        let s = hist[k][0];
        let (u, d, p) = steps[k];
        vec![(p, vec![s * u]), (1.0 - p, vec![s * d])]
    })
}

/// Neumaier summation.
fn compensated_sum(v: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in v {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Metadata describing how an ensemble was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub model: String,
    pub parameters: BTreeMap<String, f64>,
    pub seed: u64,
}

/// `N` price paths on a common grid, stored path-major as `[path][step][asset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    n_paths: usize,
    d: usize,
    grid: TimeGrid,
    data: Vec<f64>,
    weights: Vec<f64>,
    pub meta: GeneratorMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleSidecar {
    n_paths: usize,
    steps: usize,
    d: usize,
    grid: TimeGrid,
    weights: Vec<f64>,
    generator_meta: GeneratorMeta,
}

impl PathEnsemble {
    pub fn new(
        d: usize,
        grid: TimeGrid,
        data: Vec<f64>,
        weights: Vec<f64>,
        meta: GeneratorMeta,
    ) -> Result<Self> {
        let n = weights.len();
        let per_path = (grid.steps() + 1) * d;
        if d == 0 || n == 0 || data.len() != n * per_path {
            return Err(Error::InvalidEnsemble(format!(
                "data has {} values, expected {n} x {} x {d}",
                data.len(),
                grid.steps() + 1
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEnsemble("prices must be finite".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (compensated_sum(&weights) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidEnsemble(
                "weights must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(PathEnsemble {
            n_paths: n,
            d,
            grid,
            data,
            weights,
            meta,
        })
    }

    /// Equal-weight ensemble from per-path price sequences.
    pub fn from_paths(
        d: usize,
        grid: TimeGrid,
        paths: Vec<Vec<Vec<f64>>>,
        meta: GeneratorMeta,
    ) -> Result<Self> {
        let n = paths.len();
        let data: Vec<f64> = paths.into_iter().flatten().flatten().collect();
        let w = vec![1.0 / n.max(1) as f64; n];
        let mut ens = PathEnsemble::new(d, grid, data, w, meta)?;
        // Equal weights may miss the sum by an ulp for awkward n.
        let s = compensated_sum(&ens.weights);
        ens.weights.iter_mut().for_each(|w| *w /= s);
        Ok(ens)
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn price(&self, path: usize, k: usize) -> &[f64] {
        let m1 = self.grid.steps() + 1;
        let off = (path * m1 + k) * self.d;
        &self.data[off..off + self.d]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Writes the price matrix as little-endian `f64` plus a JSON sidecar.
    pub fn save(&self, bin_path: &Path, json_path: &Path) -> std::io::Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(bin_path, bytes)?;
        let side = EnsembleSidecar {
            n_paths: self.n_paths,
            steps: self.grid.steps(),
            d: self.d,
            grid: self.grid.clone(),
            weights: self.weights.clone(),
            generator_meta: self.meta.clone(),
        };
        fs::write(
            json_path,
            serde_json::to_string_pretty(&side).expect("sidecar serializes"),
        )
    }

    pub fn load(bin_path: &Path, json_path: &Path) -> Result<Self> {
        let io = |e: std::io::Error| Error::InvalidEnsemble(e.to_string());
        let side: EnsembleSidecar = serde_json::from_slice(&fs::read(json_path).map_err(io)?)
            .map_err(|e| Error::InvalidEnsemble(e.to_string()))?;
        let bytes = fs::read(bin_path).map_err(io)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidEnsemble(
                "binary file length is not a multiple of 8".into(),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if side.grid.steps() != side.steps || side.weights.len() != side.n_paths {
            return Err(Error::InvalidEnsemble(
                "sidecar fields are inconsistent".into(),
            ));
        }
        PathEnsemble::new(side.d, side.grid, data, side.weights, side.generator_meta)
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Exact log-Euler sampling of GBM at the grid times. Each path draws from its
/// own counter-based stream, so output does not depend on the worker count.
pub fn simulate_gbm(
    params: &GbmParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    params.validate()?;
    if n_paths == 0 {
        return Err(Error::InvalidParams("n_paths must be at least 1".into()));
    }
    let dts = grid.dts();
    let drift = params.mu - 0.5 * params.sigma * params.sigma;
    let paths: Vec<Vec<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p);
            let mut log_s = params.s0.ln();
            let mut out = Vec::with_capacity(dts.len() + 1);
            out.push(vec![params.s0]);
            for &dt in &dts {
                let z: f64 = StandardNormal.sample(&mut rng);
                log_s += drift * dt + params.sigma * dt.sqrt() * z;
                out.push(vec![log_s.exp()]);
            }
            out
        })
        .collect();
    let meta = GeneratorMeta {
        model: "gbm".into(),
        parameters: BTreeMap::from([
            ("s0".to_string(), params.s0),
            ("mu".to_string(), params.mu),
            ("sigma".to_string(), params.sigma),
        ]),
        seed,
    };
    PathEnsemble::from_paths(1, grid.clone(), paths, meta)
}

/// Autocovariance of fractional Gaussian noise with step `dt` at lag `k`.
pub fn fgn_autocovariance(hurst: f64, dt: f64, k: usize) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * dt.powf(h2) * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

/// How fractional Gaussian noise is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgnMethod {
    CirculantEmbedding,
    Cholesky,
}

enum FgnSampler {
    Circulant { sqrt_eig: Vec<f64> },
    Cholesky { lower: DMatrix<f64> },
}

impl FgnSampler {
    fn new(hurst: f64, dt: f64, n: usize, force_cholesky: bool) -> Result<Self> {
        if !force_cholesky {
            let m = 2 * n;
            let mut row: Vec<Complex<f64>> = (0..m)
                .map(|j| {
                    let lag = if j <= n { j } else { m - j };
                    Complex::new(fgn_autocovariance(hurst, dt, lag), 0.0)
                })
                .collect();
            FftPlanner::new().plan_fft_forward(m).process(&mut row);
            let max = row.iter().fold(0.0f64, |a, c| a.max(c.re.abs()));
            if row.iter().all(|c| c.re >= -1e-10 * max) {
                let sqrt_eig = row
                    .iter()
                    .map(|c| (c.re.max(0.0) / m as f64).sqrt())
                    .collect();
                return Ok(FgnSampler::Circulant { sqrt_eig });
            }
        }
        let cov = DMatrix::from_fn(n, n, |i, j| fgn_autocovariance(hurst, dt, i.abs_diff(j)));
        let chol = cov.cholesky().ok_or_else(|| {
            Error::InvalidParams("fGn covariance is not positive definite".into())
        })?;
        Ok(FgnSampler::Cholesky { lower: chol.l() })
    }

    fn method(&self) -> FgnMethod {
        match self {
            FgnSampler::Circulant { .. } => FgnMethod::CirculantEmbedding,
            FgnSampler::Cholesky { .. } => FgnMethod::Cholesky,
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            FgnSampler::Circulant { sqrt_eig } => {
                let mut w: Vec<Complex<f64>> = sqrt_eig
                    .iter()
                    .map(|s| {
                        let a: f64 = StandardNormal.sample(rng);
                        let b: f64 = StandardNormal.sample(rng);
                        Complex::new(s * a, s * b)
                    })
                    .collect();
                FftPlanner::new().plan_fft_forward(w.len()).process(&mut w);
                w.iter().take(n).map(|c| c.re).collect()
            }
            FgnSampler::Cholesky { lower } => {
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                (lower * z).iter().copied().collect()
            }
        }
    }
}

/// Exact fractional Gaussian noise increments on a uniform grid, one vector per path.
pub fn simulate_fgn(
    hurst: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    method: FgnMethod,
) -> Result<(Vec<Vec<f64>>, FgnMethod)> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::InvalidParams(format!(
            "hurst {hurst} outside (0, 1)"
        )));
    }
    if !grid.is_uniform() {
        return Err(Error::InvalidGrid(
            "fractional Brownian motion requires a uniform grid".into(),
        ));
    }
    if n_paths == 0 {
        return Err(Error::InvalidParams("n_paths must be at least 1".into()));
    }
    let n = grid.steps();
    let dt = grid.horizon() / n as f64;
    let sampler = FgnSampler::new(hurst, dt, n, method == FgnMethod::Cholesky)?;
    let used = sampler.method();
    let incs = (0..n_paths)
        .into_par_iter()
        .map(|p| sampler.sample(n, &mut path_rng(seed, p)))
        .collect();
    Ok((incs, used))
}

/// `S = s0 exp(sigma B^H)` with exact-covariance fractional Brownian motion.
/// Circulant embedding is used when its eigenvalues are nonnegative, with a
/// Cholesky factorization of the increment covariance as fallback.
pub fn simulate_fbm_price(
    hurst: f64,
    s0: f64,
    sigma: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if !(s0 > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidParams("s0 and sigma must be positive".into()));
    }
    let (incs, used) = simulate_fgn(hurst, grid, n_paths, seed, FgnMethod::CirculantEmbedding)?;
    let paths = incs
        .into_iter()
        .map(|inc| {
            let mut b = 0.0;
            let mut out = vec![vec![s0]];
            for x in inc {
                b += x;
                out.push(vec![s0 * (sigma * b).exp()]);
            }
            out
        })
        .collect();
    let meta = GeneratorMeta {
        model: match used {
            FgnMethod::CirculantEmbedding => "fbm/circulant".into(),
            FgnMethod::Cholesky => "fbm/cholesky".into(),
        },
        parameters: BTreeMap::from([
            ("hurst".to_string(), hurst),
            ("s0".to_string(), s0),
            ("sigma".to_string(), sigma),
        ]),
        seed,
    };
    PathEnsemble::from_paths(1, grid.clone(), paths, meta)
}

/// Scenario tree approximating `s0 exp(sigma B^H)`: at each node the next
/// fractional Gaussian increment is Gaussian given the node's history, and is
/// replaced by a 2-point (mean +- sd) or 3-point Gauss-Hermite quantization of
/// that conditional law. This is an approximation of the continuous model.
pub fn build_fbm_tree(
    hurst: f64,
    s0: f64,
    sigma: f64,
    grid: &TimeGrid,
    branches: usize,
) -> Result<ScenarioTree> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::InvalidParams(format!(
            "hurst {hurst} outside (0, 1)"
        )));
    }
    if !(branches == 2 || branches == 3) {
        return Err(Error::InvalidParams("branches must be 2 or 3".into()));
    }
    if !grid.is_uniform() {
        return Err(Error::InvalidGrid(
            "fractional Brownian motion requires a uniform grid".into(),
        ));
    }
    let n = grid.steps();
    let dt = grid.horizon() / n as f64;
    let gamma = |k: usize| fgn_autocovariance(hurst, dt, k);
    // Regression weights and residual variance of increment k on increments 0..k.
    let mut regress: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    for k in 0..n {
        if k == 0 {
            regress.push((Vec::new(), gamma(0)));
            continue;
        }
        let cov = DMatrix::from_fn(k, k, |i, j| gamma(i.abs_diff(j)));
        let c = DVector::from_fn(k, |i, _| gamma(k - i));
        let chol = cov.cholesky().ok_or_else(|| {
            Error::InvalidParams("fGn covariance is not positive definite".into())
        })?;
        let w = chol.solve(&c);
        let var = (gamma(0) - c.dot(&w)).max(0.0);
        regress.push((w.iter().copied().collect(), var));
    }
    let points: Vec<(f64, f64)> = if branches == 2 {
        vec![(0.5, 1.0), (0.5, -1.0)]
    } else {
        let r3 = 3f64.sqrt();
        vec![(1.0 / 6.0, r3), (2.0 / 3.0, 0.0), (1.0 / 6.0, -r3)]
    };
    ScenarioTree::from_branching(1, grid.clone(), vec![s0], |hist| {
        let k = hist.len() - 1;
        let b: Vec<f64> = hist.iter().map(|s| (s[0] / s0).ln() / sigma).collect();
        let past: Vec<f64> = b.windows(2).map(|w| w[1] - w[0]).collect();
        let (w, var) = &regress[k];
        let mean: f64 = w.iter().zip(&past).map(|(a, x)| a * x).sum();
        let sd = var.sqrt();
        points
            .iter()
            .map(|&(q, z)| (q, vec![s0 * (sigma * (b[k] + mean + sd * z)).exp()]))
            .collect()
    })
}
