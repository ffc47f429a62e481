use thiserror::Error;

/// Errors surfaced by the numerical engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("kernel is not Hermitian: deviation {0:.3e}")]
    NonHermitian(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("norm drift {drift:.3e} exceeds tolerance {tol:.3e} (dt too large?)")]
    NormDrift { drift: f64, tol: f64 },
    #[error("canonical identity violated: residual {0:.3e}")]
    CanonicalIdentity(f64),
    #[error("Moebius denominator ill-conditioned: cond {0:.3e}")]
    SingularMoebius(f64),
    #[error("pairing operator norm {0} >= 1: germ series diverges")]
    PairingNorm(f64),
    #[error("Fock truncation overflow: needed rank {needed}, hard cap {cap}")]
    TruncationOverflow { needed: usize, cap: usize },
    #[error("particle number {n} below Fock truncation order {n_max}")]
    TooFewParticles { n: usize, n_max: usize },
    #[error("basis dimension {dim} exceeds cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("order index {0} out of range for the 1/sqrt(N) expansion")]
    OrderOutOfRange(usize),
    #[error("source not expressible over the creation-monomial basis: residual {0:.3e}")]
    BasisMatch(f64),
    #[error("spectral gap {gap:.3e} below gap_min {gap_min:.3e}: branch collision")]
    GapCollapse { gap: f64, gap_min: f64 },
    #[error("finite-difference residual did not stabilize under step refinement")]
    NonConvergentStencil,
    #[error("imaginary residue {0:.3e} exceeds tolerance")]
    ImaginaryResidue(f64),
    #[error("grid under-resolves the packet width: {points_per_width:.1} points per width")]
    UnderResolvedGrid { points_per_width: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
