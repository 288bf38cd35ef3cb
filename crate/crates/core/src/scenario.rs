//! End-to-end parameter bundles and the coherence pipeline.

pub struct Scenario<T> {
    _marker: std::marker::PhantomData<T>,
}
