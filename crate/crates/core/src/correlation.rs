//! Two-time photon correlations: generator, propagation, spectra, coherence
//! times.

pub struct CorrelationGenerator<T> {
    _marker: std::marker::PhantomData<T>,
}
pub struct CorrelationTrajectory<T> {
    _marker: std::marker::PhantomData<T>,
}
pub struct SpectralResult<T> {
    _marker: std::marker::PhantomData<T>,
}
