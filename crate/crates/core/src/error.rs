use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid friction specification: {0}")]
    InvalidFriction(String),
    #[error("tabulated friction is not convex near x = {x}")]
    NonConvexTabulation { x: f64 },
    #[error("invalid price {price}: this friction requires strictly positive prices")]
    InvalidPrice { price: f64 },
    #[error("conjugate did not stabilize: maximizer sits on the tabulation boundary at x = {x}")]
    ConjugateDiverged { x: f64 },
    #[error("friction kind {0} has no gradient")]
    NotDifferentiable(&'static str),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("children of node {node} have probabilities summing to {sum}")]
    TreeProbabilitySum { node: usize, sum: f64 },
    #[error("invalid scenario tree: {0}")]
    InvalidTree(String),
    #[error("invalid path ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("branching rule produces a non-positive or explosive step: {0}")]
    ExplosiveStep(String),
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("beta = {beta} must lie in (1, {alpha})")]
    BetaOutOfRange { beta: f64, alpha: f64 },
    #[error("operation requires a single risky asset, got d = {0}")]
    RequiresScalarAsset(usize),

    #[error("invalid martingale certificate: {0}")]
    CertificateInvalid(String),
    #[error("plan does not superhedge the claim at leaf {leaf} (shortfall {shortfall:e})")]
    PlanInfeasibleForClaim { leaf: usize, shortfall: f64 },
    #[error("claim is not superreplicable: dual value exceeded {ceiling:e}")]
    Unbounded { ceiling: f64 },
    #[error("solver stopped after {iterations} iterations without meeting tolerance")]
    MaxIterations { iterations: usize },
    #[error("asset prices must be nonnegative (found {price} at node {node})")]
    NegativePrices { node: usize, price: f64 },

    #[error("invalid utility specification: {0}")]
    InvalidUtility(String),
    #[error("expected utility is not finite at the zero plan")]
    NonIntegrableUtility,
    #[error("plan is not flat at the horizon (max terminal position {0:e})")]
    PlanNotFlat(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    /// Stable machine-readable code for structured error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidFriction(_) => "FRICTION_INVALID",
            Error::NonConvexTabulation { .. } => "FRICTION_NONCONVEX",
            Error::InvalidPrice { .. } => "INVALID_PRICE",
            Error::ConjugateDiverged { .. } => "CONJUGATE_DIVERGED",
            Error::NotDifferentiable(_) => "NOT_DIFFERENTIABLE",
            Error::InvalidGrid(_) => "GRID_INVALID",
            Error::TreeProbabilitySum { .. } => "TREE_PROB_SUM",
            Error::InvalidTree(_) => "TREE_INVALID",
            Error::InvalidEnsemble(_) => "ENSEMBLE_INVALID",
            Error::ExplosiveStep(_) => "EXPLOSIVE_STEP",
            Error::InvalidParams(_) => "PARAMS_INVALID",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::BetaOutOfRange { .. } => "BETA_OUT_OF_RANGE",
            Error::RequiresScalarAsset(_) => "REQUIRES_SCALAR_ASSET",
            Error::CertificateInvalid(_) => "CERTIFICATE_INVALID",
            Error::PlanInfeasibleForClaim { .. } => "PLAN_INFEASIBLE",
            Error::Unbounded { .. } => "UNBOUNDED",
            Error::MaxIterations { .. } => "MAX_ITERATIONS",
            Error::NegativePrices { .. } => "NEGATIVE_PRICES",
            Error::InvalidUtility(_) => "UTILITY_INVALID",
            Error::NonIntegrableUtility => "NON_INTEGRABLE_UTILITY",
            Error::PlanNotFlat(_) => "PLAN_NOT_FLAT",
            Error::Precondition(_) => "PRECONDITION",
        }
    }
}
