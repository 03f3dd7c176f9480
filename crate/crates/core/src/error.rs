use thiserror::Error;

/// Errors raised by model construction and the numerical engines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{context}: probabilities sum to {sum} instead of 1")]
    NonStochastic { context: String, sum: f64 },

    #[error("{context}: offspring law puts mass {mass} on zero children")]
    ZeroOffspringMass { context: String, mass: f64 },

    #[error("{context}: invalid probability {value}")]
    InvalidProbability { context: String, value: f64 },

    #[error("environment is not supercritical: E[log m] = {mu}")]
    Subcritical { mu: f64 },

    #[error("environment has no states")]
    EmptyModel,

    #[error("offspring support {support} exceeds the configured limit {limit}")]
    SupportTooLarge { support: usize, limit: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("kernel cap {cap} is smaller than the required {required}")]
    CapTooSmall { cap: usize, required: usize },

    #[error("degenerate denominator gamma_k - p(j,j) = {denominator:e} at j = {j}")]
    DegenerateDenominator { j: usize, denominator: f64 },

    #[error("sequence decreased at n = {n}: {previous} -> {current}")]
    NonMonotone { n: usize, previous: f64, current: f64 },

    #[error("critical exponent r_k is infinite (p_1 = 0 almost surely)")]
    InfiniteCritical,

    #[error("r = {r} is outside the {expected} regime (r_k = {r_k})")]
    RegimeMismatch { r: f64, r_k: f64, expected: &'static str },

    #[error("environment path has {len} states but {needed} are required")]
    PathTooShort { needed: usize, len: usize },

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("sample size j = {j} exceeds the exact-convolution limit {limit}")]
    JTooLarge { j: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// True for failures of numerical guards (as opposed to invalid input).
    pub fn is_numeric_guard(&self) -> bool {
        matches!(
            self,
            Error::DegenerateDenominator { .. }
                | Error::NonMonotone { .. }
                | Error::InfiniteCritical
                | Error::HypothesisViolated(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
