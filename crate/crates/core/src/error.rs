use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is numerically singular (condition estimate {cond:.3e})")]
    SingularMatrix { cond: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point {re} + {im}i lies on the real axis")]
    RealAxisPoint { re: f64, im: f64 },

    #[error("point is outside the resolvent set: {0}")]
    OutsideResolvent(String),

    #[error("unsupported evaluation point: {0}")]
    UnsupportedPoint(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("iterate left the certified ball (distance {distance:.3e}, radius {radius:.3e})")]
    LeftCertifiedBall { distance: f64, radius: f64 },

    #[error("derivative is singular (condition estimate {cond:.3e}); cannot certify")]
    DerivativeSingular { cond: f64 },

    #[error("block identity requires ||B^-1|| < 1, got {norm}")]
    BNotDominant { norm: f64 },

    #[error("Neumann series not dominant: q = {q}")]
    NotDominant { q: f64 },

    #[error("free mode needs Cauchy-family laws; variable {var} has law {law}")]
    FreeModeUnsupportedLaw { var: usize, law: String },

    #[error("margin violation: {0}")]
    MarginViolation(String),

    #[error("diagonal block {block} has imaginary part of the wrong sign")]
    WrongPattern { block: usize },

    #[error("perturbation norm {norm} exceeds block margin {margin}")]
    PerturbationTooLarge { norm: f64, margin: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Variant name, stable across releases; used in machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SingularMatrix { .. } => "SingularMatrix",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::RealAxisPoint { .. } => "RealAxisPoint",
            Error::OutsideResolvent(_) => "OutsideResolvent",
            Error::UnsupportedPoint(_) => "UnsupportedPoint",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::LeftCertifiedBall { .. } => "LeftCertifiedBall",
            Error::DerivativeSingular { .. } => "DerivativeSingular",
            Error::BNotDominant { .. } => "BNotDominant",
            Error::NotDominant { .. } => "NotDominant",
            Error::FreeModeUnsupportedLaw { .. } => "FreeModeUnsupportedLaw",
            Error::MarginViolation(_) => "MarginViolation",
            Error::WrongPattern { .. } => "WrongPattern",
            Error::PerturbationTooLarge { .. } => "PerturbationTooLarge",
            Error::Invalid(_) => "Invalid",
            Error::Parse(_) => "Parse",
        }
    }
}
