//! Numerical tolerances shared by the whole crate.
//!
//! Every threshold used to accept or reject an input, or to declare an
//! iteration converged, lives here.

/// Maximum relative anti-Hermitian part accepted by the eigensolver.
pub const HERMITIAN: f64 = 1e-10;

/// Hermitian symmetry required of correlation matrices read from disk.
pub const HERMITIAN_FILE: f64 = 1e-9;

/// Unit-diagonal check on correlation matrices.
pub const UNIT_DIAGONAL: f64 = 1e-6;

/// Largest relative trace error silently repaired by rescaling.
pub const TRACE_RESCALE: f64 = 1e-2;

/// Eigenvalues above `-PSD_SLACK * n` are treated as zero rather than negative.
pub const PSD_SLACK: f64 = 1e-9;

/// Singular-value ratio below which a matrix counts as rank deficient.
pub const RANK: f64 = 1e-10;

/// Unitarity target for retractions and precoder mixers.
pub const UNITARY: f64 = 1e-9;

/// Power-constraint target for normalized precoders.
pub const POWER: f64 = 1e-9;

/// Smallest eigenvalue of a correlation matrix that still counts as invertible.
pub const INVERTIBLE: f64 = 1e-12;

/// Default fixed-point tolerance on `|dγ| + |dψ|`.
pub const FIXED_POINT: f64 = 1e-9;

/// Maximum number of Picard sweeps before giving up.
pub const FIXED_POINT_MAX_ITER: usize = 2000;

/// Default enumeration cap on product constellations (`M^N`).
pub const ENUMERATION_CAP: u64 = 1 << 20;
