//! Dynamics and temporal coherence of multimode photon gases in a dye-filled
//! microcavity.
//!
//! The crate is organised around one pipeline:
//!
//! 1. [`modes`] builds a ladder of cavity modes and their overlaps with the
//!    molecular medium sampled on a spatial grid.
//! 2. [`rates`] turns an emission profile into per-mode emission/absorption
//!    rates tied together by the Kennard-Stepanov relation.
//! 3. [`semiclassical`] integrates the coupled rate equations for the photon
//!    correlation matrix `n` and the molecular excitation fractions `f`, and
//!    finds their steady state.
//! 4. [`correlation`] linearises the dynamics about the steady state into a
//!    generator for the two-time correlation `c_pq(t) = <a_p†(t) a_q(0)>`,
//!    propagates it, and extracts emission spectra and coherence times.
//! 5. [`exact`] solves the full Lindblad master equation on a truncated
//!    Fock ⊗ spin basis for small instances, providing an independent check
//!    of both the coefficient algebra and the semiclassical approximation.
//!
//! All frequencies and rates are angular THz (rad/ps); times are ps.
//!
//! Core math is generic over the real scalar via [`Real`]; concrete aliases
//! for the `f32`/`f64` instantiations live at the crate root. Operations that
//! go through LAPACK additionally bound the complex scalar, e.g.
//! `Complex<T>: Lapack`.

use std::fmt;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

pub mod correlation;
pub mod error;
pub mod exact;
pub mod integrate;
pub mod modes;
pub mod rates;
pub mod scenario;
pub mod semiclassical;

pub use error::{CoreError, Result};

/// Real scalar backing all physics computations: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` literal into the working scalar.
///
/// Panics only if the literal does not fit, which for f32/f64 means never at
/// the magnitudes used here.
#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Complex number with zero imaginary part.
#[inline]
pub(crate) fn re<T: Real>(x: T) -> Complex<T> {
    Complex::new(x, T::zero())
}

extern "C" {
    fn openblas_set_num_threads(num: i32);
}

static BLAS_INIT: std::sync::Once = std::sync::Once::new();

/// Pin OpenBLAS to one thread. Parallelism belongs to the sweep-level worker
/// pool; OpenBLAS's own threaded LU also recurses deeply enough to overflow
/// small thread stacks.
pub(crate) fn serial_blas() {
    BLAS_INIT.call_once(|| unsafe { openblas_set_num_threads(1) });
}

pub type SpatialGrid32 = modes::SpatialGrid<f32>;
pub type SpatialGrid64 = modes::SpatialGrid<f64>;
pub type ModeBasis32 = modes::ModeBasis<f32>;
pub type ModeBasis64 = modes::ModeBasis<f64>;
pub type RateSet32 = rates::RateSet<f32>;
pub type RateSet64 = rates::RateSet<f64>;
pub type SystemState32 = semiclassical::SystemState<f32>;
pub type SystemState64 = semiclassical::SystemState<f64>;
pub type PumpProfile32 = semiclassical::PumpProfile<f32>;
pub type PumpProfile64 = semiclassical::PumpProfile<f64>;
pub type CorrelationGenerator32 = correlation::CorrelationGenerator<f32>;
pub type CorrelationGenerator64 = correlation::CorrelationGenerator<f64>;
pub type CorrelationTrajectory32 = correlation::CorrelationTrajectory<f32>;
pub type CorrelationTrajectory64 = correlation::CorrelationTrajectory<f64>;
pub type SpectralResult32 = correlation::SpectralResult<f32>;
pub type SpectralResult64 = correlation::SpectralResult<f64>;
pub type ExactModel32 = exact::ExactModel<f32>;
pub type ExactModel64 = exact::ExactModel<f64>;
pub type Scenario32 = scenario::Scenario<f32>;
pub type Scenario64 = scenario::Scenario<f64>;
