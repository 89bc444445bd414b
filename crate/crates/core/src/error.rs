//! Error types shared by all modules.

use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

/// Errors surfaced by the numerical operations.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Point lies outside the domain of the requested chart.
    ChartDomain { chart: &'static str, detail: &'static str },
    /// Target chart does not cover the point.
    ChartCoverage { chart: &'static str },
    /// Step-size controller underflowed the minimum step.
    StepFailure { t: f64 },
    /// Shooting/Newton iteration failed to converge.
    ShootingFailure { best_missmatch: f64, iterations: usize },
    /// Trajectory exceeded the time cap without escaping (potential trapping).
    TimeCapExceeded { t_cap: f64 },
    /// Tangent frame too ill-conditioned to evaluate.
    DegenerateFrame { cond: f64 },
    /// Transport solve hit a caustic (nonpositive spreading determinant).
    CausticHit { r: f64 },
    /// Quadrature failed its self-consistency (grid-doubling) check.
    QuadratureResolution { rel_change: f64 },
    /// Requested weight exponents violate the stated inequalities.
    WeightCondition { detail: &'static str },
    /// Richardson extrapolation corrections grew instead of shrinking.
    ExtrapolationDiverged,
    /// Requested sample lies outside the covered(s, x) range.
    OutOfRange { detail: &'static str },
    /// CFL number of the requested wave grid exceeds the stability bound.
    CflViolation { cfl: f64 },
    /// Norm fell below the quadrature floor; fitted quantities unreliable.
    BelowFloor { floor: f64 },
    /// Not enough samples to perform the requested fit.
    InsufficientData { needed: usize, got: usize },
    /// Operation is not implemented for this metric/dimension combination.
    Unsupported { detail: &'static str },
    /// Invalid argument.
    InvalidArgument { detail: &'static str },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ChartDomain { chart, detail } => {
                write!(f, "point outside {chart} chart domain: {detail}")
            }
            CoreError::ChartCoverage { chart } => {
                write!(f, "target chart {chart} does not cover the point")
            }
            CoreError::StepFailure { t } => write!(f, "step controller underflow at t = {t}"),
            CoreError::ShootingFailure { best_missmatch, iterations } => write!(
                f,
                "shooting failed to converge after {iterations} iterations (best mismatch {best_missmatch:.3e})"
            ),
            CoreError::TimeCapExceeded { t_cap } => {
                write!(f, "trajectory did not escape before t_cap = {t_cap} (potential trapping)")
            }
            CoreError::DegenerateFrame { cond } => {
                write!(f, "tangent frame condition number {cond:.3e} too large")
            }
            CoreError::CausticHit { r } => {
                write!(f, "caustic encountered at r = {r} (spreading determinant nonpositive)")
            }
            CoreError::QuadratureResolution { rel_change } => write!(
                f,
                "quadrature not converged: doubling the grid changed the result by {rel_change:.3e}"
            ),
            CoreError::WeightCondition { detail } => write!(f, "weight condition violated: {detail}"),
            CoreError::ExtrapolationDiverged => write!(f, "extrapolation corrections grew"),
            CoreError::OutOfRange { detail } => write!(f, "out of covered range: {detail}"),
            CoreError::CflViolation { cfl } => write!(f, "CFL number {cfl:.3} exceeds stability bound"),
            CoreError::BelowFloor { floor } => {
                write!(f, "values at numerical floor ({floor:.3e}); fit unreliable")
            }
            CoreError::InsufficientData { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            CoreError::Unsupported { detail } => write!(f, "unsupported: {detail}"),
            CoreError::InvalidArgument { detail } => write!(f, "invalid argument: {detail}"),
        }
    }
}
