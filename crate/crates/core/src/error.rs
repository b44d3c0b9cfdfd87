use thiserror::Error;

use crate::lattice::LatticeIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter `{name}` out of domain: {value}")]
    ParameterDomain { name: &'static str, value: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("epsilon for step {n} underflows and no eps_surrogate is set")]
    EpsilonUnset { n: u32 },

    #[error("quasimomentum level {found} does not match cell level {expected}")]
    LevelMismatch { expected: u32, found: u32 },

    #[error("shift ({p1}, {p2}) outside 0..{n}")]
    ShiftOutOfRange { p1: i64, p2: i64, n: i64 },

    #[error("refinement factor must be >= 1, got {0}")]
    InvalidRefinement(i64),

    #[error("harmonic at index 0 on level {level}")]
    ZeroHarmonic { level: u32 },

    #[error("potential level {level} missing")]
    MissingLevel { level: u32 },

    #[error("trunc_radius {radius} is below 2k = {min}")]
    TruncationTooSmall { radius: f64, min: f64 },

    #[error("eigenvalue gap {gap:e} below the degeneracy tolerance")]
    NearDegenerate { gap: f64 },

    #[error("resonant denominator {value:e} at offset {offset:?}")]
    ResonantDenominator { offset: LatticeIndex, value: f64 },

    #[error("reference eigenvalue within {distance:e} of the contour")]
    ContourThroughSpectrum { distance: f64 },

    #[error("contour encloses {count} reference eigenvalues, expected 1")]
    ContourEnclosure { count: usize },

    #[error("point is outside the non-resonance set")]
    NonResonanceViolation,

    #[error("finite-difference stencil leaves the non-resonance region")]
    StencilLeavesRegion,

    #[error("no root in bracket at phi = {phi}")]
    NoRootInBracket { phi: f64 },

    #[error("{failed} of {total} curve points failed")]
    CurveFailures { failed: usize, total: usize },

    #[error("domain is empty")]
    EmptyDomain,

    #[error("normalizer factor {value:e} is numerically singular")]
    SingularNormalizer { value: f64 },

    #[error("function vanishes on the contour (min |f| = {min:e})")]
    ZeroOnContour { min: f64 },

    #[error("winding number {value} is not close to an integer")]
    NonIntegerWinding { value: f64 },

    #[error("disk count {count} exceeds bound {bound}")]
    DiskBoundViolation { count: usize, bound: f64 },

    #[error("overlap {overlap:e} too small to fix the phase")]
    PhaseUndetermined { overlap: f64 },

    #[error("waves were assembled at different points")]
    MismatchedKappa,

    #[error("resonance set entered at step {step}")]
    ResonanceEntered { step: u32 },

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("quadrature doubling moved the result by {change:e} (limit {limit:e})")]
    RefinementUnstable { change: f64, limit: f64 },

    #[error("linear algebra: {0}")]
    Linalg(String),
}

pub type Result<T> = std::result::Result<T, Error>;
