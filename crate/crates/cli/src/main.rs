mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use frictionlab::superhedge::Settlement;
use frictionlab::utility::ConstraintClass;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "frictionlab",
    version,
    about = "Superhedging, arbitrage and utility maximization under trading frictions"
)]
struct Cli {
    /// Worker threads; defaults to FRICTIONLAB_THREADS, then to all cores.
    #[arg(long, global = true, env = "FRICTIONLAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimal initial cash that superhedges a claim, with a dual certificate.
    Superhedge(SuperhedgeArgs),
    /// Expected-utility maximization with first-order diagnostics.
    MaximizeUtility(UtilityArgs),
    /// Arbitrage of the second kind, or a small-penalty certificate of its absence.
    DetectArbitrage(ArbitrageArgs),
    /// Per-scenario market bound `sum G*(-S) dt`.
    MarketBound(MarketBoundArgs),
    /// Dual value of a martingale certificate for a claim.
    DualEval(DualEvalArgs),
    /// Simulates price paths or builds a scenario tree.
    Simulate(SimulateArgs),
    /// Closed-form values of the divergent GBM certificate family.
    ReproduceExample1(Example1Args),
    /// Constant cash-flow buying plan under quadratic impact.
    ReproduceExample2(Example2Args),
    /// Parses and checks input documents.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, value_enum, default_value_t = SettlementArg::Componentwise)]
    settlement: SettlementArg,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    gap_tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    feas_tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettlementArg {
    Componentwise,
    MarkToMarket,
}

impl From<SettlementArg> for Settlement {
    fn from(s: SettlementArg) -> Self {
        match s {
            SettlementArg::Componentwise => Settlement::Componentwise,
            SettlementArg::MarkToMarket => Settlement::MarkToMarket,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Flat,
    Nonneg,
}

impl From<ClassArg> for ConstraintClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Flat => ConstraintClass::Flat,
            ClassArg::Nonneg => ConstraintClass::Nonneg,
        }
    }
}

#[derive(Args)]
struct SuperhedgeArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    claim: PathBuf,
    #[arg(long)]
    friction: PathBuf,
    /// Initial position "c,z1,...,zd"; the asset part is held from the start
    /// and the report states whether cash c suffices.
    #[arg(long, value_parser = io::parse_list)]
    z: Option<io::NumList>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UtilityArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    friction: PathBuf,
    #[arg(long)]
    utility: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    cash: f64,
    #[arg(long)]
    endowment: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClassArg::Flat)]
    constraint_class: ClassArg,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    grad_tol: f64,
    /// Residual level below which the first-order conditions certify optimality.
    #[arg(long, default_value_t = 1e-5)]
    foc_tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ArbitrageArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    friction: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MarketBoundArgs {
    #[arg(long, conflicts_with = "paths", required_unless_present = "paths")]
    tree: Option<PathBuf>,
    /// Binary path matrix; the JSON sidecar is given by --meta.
    #[arg(long, requires = "meta")]
    paths: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    friction: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DualEvalArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    certificate: PathBuf,
    #[arg(long)]
    claim: PathBuf,
    #[arg(long)]
    friction: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Model {
    Gbm,
    Fbm,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Form {
    Paths,
    Tree,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    model: Model,
    #[arg(long, value_enum, default_value_t = Form::Paths)]
    form: Form,
    #[arg(long, default_value_t = 1.0)]
    s0: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    hurst: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long)]
    steps: usize,
    /// Number of paths (path form).
    #[arg(long = "n-paths", default_value_t = 1000)]
    n_paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Children per node (fBM tree form).
    #[arg(long, default_value_t = 2)]
    branches: usize,
    /// Tree JSON, or the binary path matrix in path form.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Sidecar for path form; defaults to the output path with `.json` appended.
    #[arg(long)]
    #[serde(skip)]
    meta: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct Example1Args {
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    s0: f64,
    #[arg(long)]
    lambda: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, value_parser = io::parse_list)]
    n: io::NumList,
    /// Late-period drift; defaults to n ln n / sigma for each n.
    #[arg(long)]
    x: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct Example2Args {
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    k: f64,
    /// Price model: "const:S" or "gbm:s0,mu,sigma".
    #[arg(long, default_value = "const:1")]
    s: String,
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long)]
    steps: usize,
    #[arg(long = "n-paths", default_value_t = 1000)]
    n_paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long)]
    friction: Option<PathBuf>,
    #[arg(long, requires = "tree")]
    claim: Option<PathBuf>,
    #[arg(long)]
    utility: Option<PathBuf>,
    #[arg(long, requires = "tree")]
    endowment: Option<PathBuf>,
    #[arg(long, requires = "tree")]
    certificate: Option<PathBuf>,
    #[arg(long, requires = "tree")]
    plan: Option<PathBuf>,
    #[arg(long, requires = "meta")]
    paths: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Parse(String),
    Io(String),
    Domain(frictionlab::Error),
    /// A computed result violates an invariant the command checks.
    Invariant {
        code: &'static str,
        message: String,
    },
    /// The solver stopped early; the report was still written.
    MaxIterations(String),
}

impl From<frictionlab::Error> for CliError {
    fn from(e: frictionlab::Error) -> Self {
        CliError::Domain(e)
    }
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "USAGE",
            CliError::Parse(_) => "PARSE",
            CliError::Io(_) => "IO",
            CliError::Domain(e) => e.code(),
            CliError::Invariant { code, .. } => code,
            CliError::MaxIterations(_) => "MAX_ITERATIONS",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m)
            | CliError::Parse(m)
            | CliError::Io(m)
            | CliError::MaxIterations(m) => m.clone(),
            CliError::Domain(e) => e.to_string(),
            CliError::Invariant { message, .. } => message.clone(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Parse(_) | CliError::Io(_) => 1,
            CliError::Domain(frictionlab::Error::Unbounded { .. }) => 2,
            CliError::Domain(frictionlab::Error::MaxIterations { .. })
            | CliError::MaxIterations(_) => 3,
            CliError::Domain(_) | CliError::Invariant { .. } => 4,
        }
    }
}

#[derive(Serialize)]
struct ErrorDoc<'a> {
    code: &'a str,
    message: String,
}

fn fail(err: &CliError) -> ExitCode {
    let doc = ErrorDoc {
        code: err.code(),
        message: err.message(),
    };
    eprintln!(
        "{}",
        serde_json::to_string(&doc).expect("error document serializes")
    );
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim().to_string())),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(&CliError::Usage("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            return fail(&CliError::Usage(e.to_string()));
        }
    }
    match commands::run(cli.command) {
        Ok(done) => {
            done.print();
            match &done.status {
                Some(e) => fail(e),
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => fail(&e),
    }
}
