//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A constructor precondition failed (grid shape, monotonicity, signs).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Spatial grid cannot resolve a requested mode function.
    #[error("grid too small for mode {mode}: weighted norm {norm:.6e} deviates from 1 beyond {tol:.1e}")]
    GridTooSmall { mode: usize, norm: f64, tol: f64 },

    /// Tabulated spectrum file is malformed.
    #[error("spectrum table: {0}")]
    SpectrumTable(String),

    /// Mismatched dimensions between basis, rates, and state.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Adaptive integrator could not continue.
    #[error("step size underflow at t = {time:.6e} ps (h = {step:.3e}); system too stiff for the explicit integrator")]
    Stiffness { time: f64, step: f64 },

    /// Steady-state iteration did not reach the requested residual.
    #[error("no steady state within t = {max_time:.3e} ps: residual {residual:.3e} THz > tol {tol:.1e} (history: {history:?})")]
    Convergence {
        max_time: f64,
        residual: f64,
        tol: f64,
        history: Vec<f64>,
    },

    /// A state or trajectory violated a structural invariant.
    #[error("state invariant violated: {0}")]
    Invariant(String),

    /// Eigen-propagation and direct integration disagree.
    #[error("propagation paths disagree: relative max-norm {0:.3e} > {1:.1e}")]
    PropagationMismatch(f64, f64),

    /// Analytic spectrum and transform of the sampled trajectory disagree.
    #[error("spectrum cross-check failed for mode {mode}: relative peak difference {diff:.3e} > {tol:.1e}")]
    SpectrumMismatch { mode: usize, diff: f64, tol: f64 },

    /// Correlation envelope never crossed 1/e on the sampled grid.
    #[error("no 1/e crossing for mode {mode} within {span:.3e} ps; propagate over a longer window")]
    NoCoherenceCrossing { mode: usize, span: f64 },

    /// Fock cutoff too small for the requested state.
    #[error("Fock truncation: population {population:.3e} at cutoff n_max = {cutoff} exceeds {bound:.1e} of total")]
    Truncation {
        cutoff: usize,
        population: f64,
        bound: f64,
    },

    /// Exact solver would exceed its configured memory bound.
    #[error("memory bound exceeded: {required} bytes required, {bound} allowed")]
    MemoryBound { required: usize, bound: usize },

    /// Liouvillian null space is not one-dimensional.
    #[error("degenerate stationary space: {0}")]
    Degenerate(String),

    /// Closed-form coefficient algebra disagrees with the direct action.
    #[error("verification breach in {term}: residual {residual:.3e} at stripe {stripe:?}, photons {occupation:?}, spins {spins:#b}")]
    Verification {
        term: String,
        residual: f64,
        stripe: Vec<i32>,
        occupation: Vec<u32>,
        spins: u64,
    },

    /// LAPACK failure.
    #[error(transparent)]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}
