use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhError {
    #[error("log map is ambiguous: a coordinate difference is exactly 1/2")]
    AmbiguousLog,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("frame is degenerate")]
    DegenerateFrame,
    #[error("no closed-form inverse; Newton fallback diverged")]
    NoClosedForm,
    #[error("splitting did not converge (residual {0:.3e})")]
    NotConverged(f64),
    #[error("domination fails: certificate {0:.6} >= 1")]
    DominationFailure(f64),
    #[error("adapted metric ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("center direction nearly tangent to E^s+E^u")]
    NearTangency,
    #[error("graph transform is not contracting")]
    NotContracting,
    #[error("iterate left the chart")]
    BoxEscape,
    #[error("splitting field unavailable at a required point")]
    FieldGap,
    #[error("plaque self-intersection detected")]
    SelfIntersection,
    #[error("local product solve did not converge")]
    NoIntersection,
    #[error("point outside the chart")]
    OutOfChart,
    #[error("sampling inconclusive near the inclusion boundary")]
    SamplingInconclusive,
    #[error("no near return found within budget")]
    NoReturnFound,
    #[error("holonomy fixed point not found")]
    HolonomyFixedPointNotFound,
    #[error("connecting center segment too long ({0:.3e})")]
    SegmentTooLong(f64),
    #[error("window exhausted while building the family")]
    WindowExhausted,
    #[error("center segments converge to a periodic point")]
    ConvergenceToPeriodicPoint,
    #[error("curve not invariant after iteration budget (residual {0:.3e})")]
    NotInvariant(f64),
    #[error("orientation undefined")]
    OrientationUndefined,
    #[error("chart too small")]
    ChartTooSmall,
    #[error("no positively transverse closing bridge")]
    NoClosingBridge,
    #[error("tube overlaps itself")]
    TubeOverlap,
    #[error("coverage gap: all summands vanish at a grid point")]
    CoverageGap,
    #[error("lifted map escaped the chart")]
    ChartEscape,
    #[error("invariant section did not converge (change {0:.3e})")]
    SectionNotConverged(f64),
    #[error("lost normal hyperbolicity (contraction estimate {0:.3})")]
    LostNormalHyperbolicity(f64),
    #[error("su intersection is not unique")]
    NonUniqueIntersection,
    #[error("su foliation transversality margin too small")]
    FoliationGap,
    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),
    #[error("degree zero where nonzero degree was expected")]
    DegreeZeroUnexpected,
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error("no periodic center family found")]
    FamilyNotFound,
    #[error("bisection bracket has no sign change (g(lo)={0:.3e}, g(hi)={1:.3e})")]
    BisectionBracketFailure(f64, f64),
    #[error("perturbation budget exceeded")]
    BudgetExceeded,
    #[error("a return reverses the local center orientation")]
    OrientationViolation,
    #[error("unstable holonomy undefined")]
    HolonomyUndefined,
    #[error("field is not divergence free (max divergence {0:.3e})")]
    NotDivergenceFree(f64),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
}

pub type PhResult<T> = Result<T, PhError>;
