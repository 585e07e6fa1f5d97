use std::path::{Path, PathBuf};

use frictionlab::arbitrage::detect_na2;
use frictionlab::market::{
    build_binomial_tree, build_fbm_tree, simulate_fbm_price, simulate_gbm, GeneratorMeta,
};
use frictionlab::superhedge::{
    certificate_penalty, dual_value, example1_dual_family, superhedge_price, Claim, Example1Value,
    MartingaleCertificate, SolveStatus, SolverConfig,
};
use frictionlab::utility::{
    maximize_utility, verify_foc, ConstraintClass, Endowment, UtilityConfig, UtilitySpec,
};
use frictionlab::wealth::{
    constant_cashflow_plan, market_bound, roll_forward, Market, TradingRatePlan,
};
use frictionlab::{BranchingRule, FrictionSpec, GbmParams, PathEnsemble, TimeGrid};
use serde::Serialize;
use serde_json::json;

use crate::io::{emit, Inputs};
use crate::{
    ArbitrageArgs, CliError, Command, DualEvalArgs, Example1Args, Example2Args, Form,
    MarketBoundArgs, Model, SimulateArgs, SolverArgs, SuperhedgeArgs, UtilityArgs, ValidateArgs,
};

/// Outcome of a command that produced its report.
pub struct Done {
    summary: String,
    /// The report went to a file, so stdout is free for the summary.
    to_file: bool,
    /// Set when the report was written but the exit status must still signal failure.
    pub status: Option<CliError>,
}

impl Done {
    fn new(summary: String, out: Option<&PathBuf>) -> Self {
        Done {
            summary,
            to_file: out.is_some(),
            status: None,
        }
    }

    pub fn print(&self) {
        if self.to_file {
            println!("{}", self.summary);
        } else {
            eprintln!("{}", self.summary);
        }
    }
}

pub fn run(cmd: Command) -> Result<Done, CliError> {
    match cmd {
        Command::Superhedge(a) => superhedge(a),
        Command::MaximizeUtility(a) => utility(a),
        Command::DetectArbitrage(a) => arbitrage(a),
        Command::MarketBound(a) => bound(a),
        Command::DualEval(a) => dual_eval(a),
        Command::Simulate(a) => simulate(a),
        Command::ReproduceExample1(a) => example1(a),
        Command::ReproduceExample2(a) => example2(a),
        Command::Validate(a) => validate(a),
    }
}

fn check_tolerances(s: &SolverArgs) -> Result<(), CliError> {
    if !(s.gap_tol > 0.0 && s.feas_tol > 0.0) || s.max_iter == 0 {
        return Err(CliError::Usage(
            "tolerances and --max-iter must be positive".into(),
        ));
    }
    Ok(())
}

fn solver_config(s: &SolverArgs) -> SolverConfig {
    SolverConfig {
        max_iter: s.max_iter,
        gap_tol: s.gap_tol,
        feas_tol: s.feas_tol,
        settlement: s.settlement.into(),
        ..Default::default()
    }
}

fn max_iterations(iterations: usize) -> CliError {
    CliError::MaxIterations(format!(
        "solver stopped after {iterations} iterations without meeting tolerance"
    ))
}

#[derive(Serialize)]
struct SuperhedgeResult {
    #[serde(flatten)]
    report: frictionlab::superhedge::SolveReport,
    /// Whether the cash in `--z` covers the price, when `--z` is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    feasible_from_z: Option<bool>,
}

fn superhedge(a: SuperhedgeArgs) -> Result<Done, CliError> {
    check_tolerances(&a.solver)?;
    let mut inputs = Inputs::default();
    let tree = inputs.tree(&a.tree)?;
    let claim: Claim = inputs.json("claim", &a.claim)?;
    let friction: FrictionSpec = inputs.json("friction", &a.friction)?;
    let mut cfg = solver_config(&a.solver);
    if let Some(z) = &a.z {
        if z.len() != tree.d() + 1 {
            return Err(CliError::Usage(format!(
                "--z needs {} entries, got {}",
                tree.d() + 1,
                z.len()
            )));
        }
        cfg.initial_assets = Some(z[1..].to_vec());
    }
    inputs.parameters(&json!({ "solver": &cfg, "z": &a.z }));
    let report = superhedge_price(&tree, &claim, &friction, &cfg)?;
    let feasible_from_z =
        a.z.as_ref()
            .map(|z| z[0] >= report.primal_value - cfg.feas_tol);
    let mut summary = format!(
        "superhedge: price {:.10} dual {:.10} gap {:.3e} status {:?}",
        report.primal_value, report.dual_value, report.duality_gap, report.status
    );
    if let Some(f) = feasible_from_z {
        summary.push_str(&format!(" feasible_from_z {f}"));
    }
    let (status, iterations) = (report.status, report.iterations);
    emit(
        "superhedge",
        &inputs,
        &SuperhedgeResult {
            report,
            feasible_from_z,
        },
        a.out.as_ref(),
    )?;
    let mut done = Done::new(summary, a.out.as_ref());
    if status == SolveStatus::MaxIterations {
        done.status = Some(max_iterations(iterations));
    }
    Ok(done)
}

fn utility(a: UtilityArgs) -> Result<Done, CliError> {
    if !(a.grad_tol > 0.0 && a.foc_tol > 0.0) || a.max_iter == 0 {
        return Err(CliError::Usage(
            "tolerances and --max-iter must be positive".into(),
        ));
    }
    let mut inputs = Inputs::default();
    let tree = inputs.tree(&a.tree)?;
    let friction: FrictionSpec = inputs.json("friction", &a.friction)?;
    let utility: UtilitySpec = inputs.json("utility", &a.utility)?;
    let endowment: Endowment = match &a.endowment {
        Some(p) => inputs.json("endowment", p)?,
        None => Endowment::zero(&tree),
    };
    let class: ConstraintClass = a.constraint_class.into();
    let cfg = UtilityConfig {
        max_iter: a.max_iter,
        grad_tol: a.grad_tol,
        constraint_class: class,
    };
    inputs.parameters(&json!({ "cash": a.cash, "config": &cfg, "foc_tol": a.foc_tol }));
    let report = maximize_utility(&tree, a.cash, &endowment, &utility, &friction, &cfg)?;
    let foc = match class {
        ConstraintClass::Flat => Some(verify_foc(
            &tree,
            &report.plan,
            a.cash,
            &endowment,
            &utility,
            &friction,
            a.foc_tol,
        )?),
        ConstraintClass::Nonneg => None,
    };
    let mut summary = format!(
        "maximize-utility: objective {:.10} status {:?}",
        report.primal_value, report.status
    );
    if let Some(f) = &foc {
        summary.push_str(&format!(
            " martingale {:.3e} orthogonality {:.3e} certified {}",
            f.martingale_residual, f.orthogonality_residual, f.optimal_certified
        ));
    }
    let (status, iterations) = (report.status, report.iterations);
    emit(
        "maximize-utility",
        &inputs,
        &json!({ "report": report, "foc": foc }),
        a.out.as_ref(),
    )?;
    let mut done = Done::new(summary, a.out.as_ref());
    if status == SolveStatus::MaxIterations {
        done.status = Some(max_iterations(iterations));
    }
    Ok(done)
}

fn arbitrage(a: ArbitrageArgs) -> Result<Done, CliError> {
    check_tolerances(&a.solver)?;
    let mut inputs = Inputs::default();
    let tree = inputs.tree(&a.tree)?;
    let friction: FrictionSpec = inputs.json("friction", &a.friction)?;
    let cfg = solver_config(&a.solver);
    inputs.parameters(&json!({ "solver": &cfg }));
    let report = detect_na2(&tree, &friction, &cfg)?;
    let summary = format!(
        "detect-arbitrage: arbitrage {} c_star {:.10} penalty {}",
        report.arbitrage_found,
        report.c_star,
        report
            .penalty
            .map_or("n/a".to_string(), |p| format!("{p:.3e}"))
    );
    emit("detect-arbitrage", &inputs, &report, a.out.as_ref())?;
    Ok(Done::new(summary, a.out.as_ref()))
}

#[derive(Serialize)]
struct BoundResult {
    /// Per leaf (tree leaves in storage order) or per path.
    bounds: Vec<f64>,
    min: f64,
    max: f64,
    /// Probability-weighted mean.
    mean: f64,
}

fn bound(a: MarketBoundArgs) -> Result<Done, CliError> {
    let mut inputs = Inputs::default();
    let friction: FrictionSpec = inputs.json("friction", &a.friction)?;
    let (bounds, weights) = match (&a.tree, &a.paths, &a.meta) {
        (Some(t), _, _) => {
            let tree = inputs.tree(t)?;
            let w: Vec<f64> = tree.leaves().iter().map(|&l| tree.prob(l)).collect();
            (market_bound(Market::Tree(&tree), &friction)?, w)
        }
        (None, Some(p), Some(m)) => {
            let ens = inputs.ensemble(p, m)?;
            (
                market_bound(Market::Paths(&ens), &friction)?,
                ens.weights().to_vec(),
            )
        }
        _ => {
            return Err(CliError::Usage(
                "market-bound needs --tree or --paths with --meta".into(),
            ))
        }
    };
    let min = bounds.iter().copied().fold(f64::INFINITY, f64::min);
    let max = bounds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = bounds.iter().zip(&weights).map(|(b, w)| b * w).sum();
    let summary = format!(
        "market-bound: {} scenarios, min {min:.10} max {max:.10} mean {mean:.10}",
        bounds.len()
    );
    emit(
        "market-bound",
        &inputs,
        &BoundResult {
            bounds,
            min,
            max,
            mean,
        },
        a.out.as_ref(),
    )?;
    Ok(Done::new(summary, a.out.as_ref()))
}

fn dual_eval(a: DualEvalArgs) -> Result<Done, CliError> {
    let mut inputs = Inputs::default();
    let tree = inputs.tree(&a.tree)?;
    let cert: MartingaleCertificate = inputs.json("certificate", &a.certificate)?;
    let claim: Claim = inputs.json("claim", &a.claim)?;
    let friction: FrictionSpec = inputs.json("friction", &a.friction)?;
    cert.validate(&tree)?;
    let penalty = certificate_penalty(&tree, &cert, &friction)?;
    let value = dual_value(&tree, &cert, &claim, &friction)?;
    let summary = format!("dual-eval: value {value:.10} penalty {penalty:.10}");
    emit(
        "dual-eval",
        &inputs,
        &json!({ "dual_value": value, "penalty": penalty }),
        a.out.as_ref(),
    )?;
    Ok(Done::new(summary, a.out.as_ref()))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn simulate(a: SimulateArgs) -> Result<Done, CliError> {
    let mut inputs = Inputs::default();
    inputs.parameters(&a);
    let grid = TimeGrid::uniform(a.horizon, a.steps)?;
    let io_err = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
    let (summary, written) = match a.form {
        Form::Paths => {
            let ens = match a.model {
                Model::Gbm => simulate_gbm(
                    &GbmParams::new(a.s0, a.mu, a.sigma)?,
                    &grid,
                    a.n_paths,
                    a.seed,
                )?,
                Model::Fbm => simulate_fbm_price(a.hurst, a.s0, a.sigma, &grid, a.n_paths, a.seed)?,
            };
            let meta = a.meta.clone().unwrap_or_else(|| sidecar_path(&a.out));
            ens.save(&a.out, &meta).map_err(|e| io_err(&a.out, e))?;
            (
                format!(
                    "simulate: {} paths x {} steps ({})",
                    ens.n_paths(),
                    a.steps,
                    ens.meta.model
                ),
                json!({ "paths": a.out.display().to_string(), "meta": meta.display().to_string(),
                        "n_paths": ens.n_paths(), "steps": a.steps, "generator": ens.meta.model }),
            )
        }
        Form::Tree => {
            let tree = match a.model {
                Model::Gbm => build_binomial_tree(
                    &GbmParams::new(a.s0, a.mu, a.sigma)?,
                    &grid,
                    BranchingRule::MomentMatched,
                )?,
                Model::Fbm => build_fbm_tree(a.hurst, a.s0, a.sigma, &grid, a.branches)?,
            };
            let text = serde_json::to_string_pretty(&tree).expect("trees serialize");
            std::fs::write(&a.out, text + "\n").map_err(|e| io_err(&a.out, e))?;
            (
                format!(
                    "simulate: tree with {} nodes, {} leaves",
                    tree.len(),
                    tree.leaves().len()
                ),
                json!({ "tree": a.out.display().to_string(), "nodes": tree.len(), "leaves": tree.leaves().len() }),
            )
        }
    };
    emit("simulate", &inputs, &written, None)?;
    Ok(Done::new(summary, None))
}

#[derive(Serialize)]
struct Example1Result {
    rows: Vec<Example1Value>,
    strictly_increasing: bool,
}

fn example1(a: Example1Args) -> Result<Done, CliError> {
    let mut inputs = Inputs::default();
    inputs.parameters(&a);
    if a.n.is_empty() {
        return Err(CliError::Usage("--n needs at least one value".into()));
    }
    let params = GbmParams::new(a.s0, a.mu, a.sigma)?;
    let rows =
        a.n.iter()
            .map(|&n| {
                let x = a.x.unwrap_or(n * n.ln() / a.sigma);
                example1_dual_family(&params, a.lambda, a.horizon, n, x)
            })
            .collect::<Result<Vec<_>, _>>()?;
    let strictly_increasing = rows.windows(2).all(|w| w[1].value > w[0].value);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("n={} value={:.6}", r.n, r.value))
        .collect();
    let summary = format!(
        "reproduce-example1: {} increasing={strictly_increasing}",
        table.join(" ")
    );
    emit(
        "reproduce-example1",
        &inputs,
        &Example1Result {
            rows,
            strictly_increasing,
        },
        a.out.as_ref(),
    )?;
    Ok(Done::new(summary, a.out.as_ref()))
}

enum PriceModel {
    Const(f64),
    Gbm(GbmParams),
}

fn parse_price_model(s: &str) -> Result<PriceModel, CliError> {
    let bad = || CliError::Usage(format!("--s expects const:S or gbm:s0,mu,sigma, got '{s}'"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    let vals = crate::io::parse_list(rest).map_err(|_| bad())?;
    match (kind, vals.as_slice()) {
        ("const", [v]) if *v > 0.0 && v.is_finite() => Ok(PriceModel::Const(*v)),
        ("gbm", [s0, mu, sigma]) => Ok(PriceModel::Gbm(GbmParams::new(*s0, *mu, *sigma)?)),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct Example2Result {
    /// Probability-weighted terminal shares.
    shares: f64,
    /// `(1/lambda) sum (sqrt(1 + 2 k lambda / S) - 1) dt`, weighted the same way.
    shares_closed_form: f64,
    /// Largest per-scenario difference between the two.
    max_share_error: f64,
    cash_spent: f64,
    /// Largest `|cash outflow - k dt|` over steps and scenarios.
    max_cashflow_error: f64,
    n_scenarios: usize,
}

fn example2(a: Example2Args) -> Result<Done, CliError> {
    let mut inputs = Inputs::default();
    inputs.parameters(&a);
    let grid = TimeGrid::uniform(a.horizon, a.steps)?;
    let ens = match parse_price_model(&a.s)? {
        PriceModel::Const(s) => {
            let meta = GeneratorMeta {
                model: "constant".into(),
                parameters: [("S".to_string(), s)].into(),
                seed: a.seed,
            };
            PathEnsemble::from_paths(1, grid.clone(), vec![vec![vec![s]; a.steps + 1]], meta)?
        }
        PriceModel::Gbm(p) => simulate_gbm(&p, &grid, a.n_paths, a.seed)?,
    };
    let min_s = ens.raw().iter().copied().fold(f64::INFINITY, f64::min);
    let friction = FrictionSpec::quadratic_impact(a.lambda, 0.5 * a.lambda * min_s);
    let plan: TradingRatePlan = constant_cashflow_plan(Market::Paths(&ens), &friction, a.k)?;
    let states = roll_forward(Market::Paths(&ens), &[0.0, 0.0], &plan, &friction)?;
    let dts = grid.dts();
    let (mut shares, mut closed, mut cash) = (0.0, 0.0, 0.0);
    let (mut share_err, mut flow_err) = (0.0f64, 0.0f64);
    for (i, path) in states.iter().enumerate() {
        let w = ens.weights()[i];
        let exact: f64 = (0..a.steps)
            .map(|k| {
                ((1.0 + 2.0 * a.k * a.lambda / ens.price(i, k)[0]).sqrt() - 1.0) / a.lambda * dts[k]
            })
            .sum();
        let last = path.last().expect("paths have a terminal state");
        shares += w * last.v[0];
        closed += w * exact;
        cash += w * -last.v0;
        share_err = share_err.max((last.v[0] - exact).abs());
        for (k, pair) in path.windows(2).enumerate() {
            flow_err = flow_err.max((pair[0].v0 - pair[1].v0 - a.k * dts[k]).abs());
        }
    }
    let res = Example2Result {
        shares,
        shares_closed_form: closed,
        max_share_error: share_err,
        cash_spent: cash,
        max_cashflow_error: flow_err,
        n_scenarios: ens.n_paths(),
    };
    let summary = format!(
        "reproduce-example2: shares {:.12} closed form {:.12} cash spent {:.12} max cash-flow error {:.3e}",
        res.shares, res.shares_closed_form, res.cash_spent, res.max_cashflow_error
    );
    emit("reproduce-example2", &inputs, &res, a.out.as_ref())?;
    Ok(Done::new(summary, a.out.as_ref()))
}

fn validate(a: ValidateArgs) -> Result<Done, CliError> {
    let mut inputs = Inputs::default();
    let mut checked = Vec::new();
    let tree = match &a.tree {
        Some(p) => {
            checked.push("tree");
            Some(inputs.tree(p)?)
        }
        None => None,
    };
    if let Some(p) = &a.friction {
        let f: FrictionSpec = inputs.json("friction", p)?;
        f.validate()?;
        if let (Some(t), Some(d)) = (&tree, f.fixed_dimension()) {
            if t.d() != d {
                return Err(frictionlab::Error::ShapeMismatch(format!(
                    "friction is {d}-dimensional, tree has d = {}",
                    t.d()
                ))
                .into());
            }
        }
        checked.push("friction");
    }
    if let Some(p) = &a.utility {
        let u: UtilitySpec = inputs.json("utility", p)?;
        u.check_properties()?;
        checked.push("utility");
    }
    if let Some(t) = &tree {
        if let Some(p) = &a.claim {
            let c: Claim = inputs.json("claim", p)?;
            c.indexed(t)?;
            checked.push("claim");
        }
        if let Some(p) = &a.endowment {
            let e: Endowment = inputs.json("endowment", p)?;
            e.indexed(t)?;
            checked.push("endowment");
        }
        if let Some(p) = &a.certificate {
            let c: MartingaleCertificate = inputs.json("certificate", p)?;
            c.validate(t)?;
            checked.push("certificate");
        }
        if let Some(p) = &a.plan {
            let plan: TradingRatePlan = inputs.json("plan", p)?;
            plan.node_rates_indexed(t)?;
            checked.push("plan");
        }
    }
    if let (Some(p), Some(m)) = (&a.paths, &a.meta) {
        inputs.ensemble(p, m)?;
        checked.push("paths");
    }
    if checked.is_empty() {
        return Err(CliError::Usage(
            "validate needs at least one document".into(),
        ));
    }
    let summary = format!("validate: ok ({})", checked.join(", "));
    emit(
        "validate",
        &inputs,
        &json!({ "valid": true, "checked": checked }),
        a.out.as_ref(),
    )?;
    Ok(Done::new(summary, a.out.as_ref()))
}
