//! Exact small-instance solver for the full master equation.

pub struct ExactModel<T> {
    _marker: std::marker::PhantomData<T>,
}
