use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// The model itself has no solution (too many users, interference too strong, ...).
    Infeasible,
    /// A numerical or scheduling invariant broke; this indicates a bug.
    Fault,
    /// Bad input: malformed configuration, out-of-range indices, unreadable files.
    Usage,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network instance: {0}")]
    InvalidInstance(String),

    #[error("user {index} out of range for {users} users")]
    UserOutOfRange { index: usize, users: usize },

    #[error("user {0} is silent; only transmitting users sense and signal")]
    SilentUser(usize),

    #[error("quadrature did not converge on [{a}, {b}]")]
    Quadrature { a: f64, b: f64 },

    #[error("slot {t}: user {user} power {power} W is outside its power set")]
    PowerOutOfSet { t: usize, user: usize, power: f64 },

    #[error("slot {t}: {count} simultaneous transmitters under a TDMA policy")]
    NotTdma { t: usize, count: usize },

    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),

    #[error("user {user} needs {power} W for rate {rate}, above its grid maximum {max} W")]
    RateInfeasible {
        user: usize,
        rate: f64,
        power: f64,
        max: f64,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("bisection stalled at lambda = {lambda} with residual {residual:e}")]
    Stalled { lambda: f64, residual: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("slot {t}: user {user} is {gap:e} from its target, bound {bound:e}")]
    BoundViolation {
        t: usize,
        user: usize,
        gap: f64,
        bound: f64,
    },

    #[error("search too large: {0}")]
    TooLarge(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Infeasible(_) | Error::RateInfeasible { .. } => ErrorClass::Infeasible,
            Error::Invariant(_)
            | Error::BoundViolation { .. }
            | Error::NotTdma { .. }
            | Error::PowerOutOfSet { .. }
            | Error::Stalled { .. }
            | Error::Quadrature { .. } => ErrorClass::Fault,
            _ => ErrorClass::Usage,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        self.class() == ErrorClass::Infeasible
    }
}
