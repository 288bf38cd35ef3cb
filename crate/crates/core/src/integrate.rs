//! Adaptive embedded Runge-Kutta integration (Dormand-Prince 5(4)) on flat
//! complex state vectors.
//!
//! The state is an `Array1<Complex<T>>`; callers flatten whatever structure
//! they carry (Hermitian matrices, real occupation vectors) and restore it in
//! a `post_step` hook, which runs after every accepted step and may project
//! the state back onto its invariant manifold (e.g. re-hermitise). The hook
//! returns the size of its adjustment so drift can be tracked.

use ndarray::Array1;
use num_complex::Complex;

use crate::{lit, CoreError, Real, Result};

#[derive(Debug, Clone)]
pub struct OdeOptions<T> {
    /// Relative tolerance on the embedded error estimate.
    pub rtol: T,
    /// Absolute tolerance floor.
    pub atol: T,
    /// Initial step; estimated from the first derivative when `None`.
    pub h_init: Option<T>,
    /// Hard upper bound on the step.
    pub h_max: Option<T>,
    /// Step underflow threshold; defaults to `1e-12 · span`.
    pub h_min: Option<T>,
    pub max_steps: usize,
}

impl<T: Real> OdeOptions<T> {
    pub fn with_tolerance(rtol: T) -> Self {
        Self {
            rtol,
            atol: rtol * lit::<T>(1e-4),
            h_init: None,
            h_max: None,
            h_min: None,
            max_steps: 50_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OdeStats<T> {
    pub steps: usize,
    pub rejected: usize,
    /// Largest adjustment reported by the post-step hook.
    pub max_projection: T,
}

impl<T: Real> Default for OdeStats<T> {
    fn default() -> Self {
        Self {
            steps: 0,
            rejected: 0,
            max_projection: T::zero(),
        }
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrate from `t0` to `t_end`, invoking `observer(t, y)` after every
/// accepted (and projected) step. Returns the final state and step counts.
pub fn integrate_with<T, F, P, O>(
    mut rhs: F,
    y0: &Array1<Complex<T>>,
    t0: T,
    t_end: T,
    opts: &OdeOptions<T>,
    mut post_step: P,
    mut observer: O,
) -> Result<(Array1<Complex<T>>, OdeStats<T>)>
where
    T: Real,
    F: FnMut(T, &Array1<Complex<T>>) -> Array1<Complex<T>>,
    P: FnMut(&mut Array1<Complex<T>>) -> T,
    O: FnMut(T, &Array1<Complex<T>>),
{
    let span = t_end - t0;
    if span <= T::zero() {
        return Err(CoreError::InvalidInput("integration span must be positive".into()));
    }
    let h_min = opts.h_min.unwrap_or(span * lit::<T>(1e-12));
    let h_max = opts.h_max.unwrap_or(span);

    let mut y = y0.clone();
    let mut t = t0;
    let mut stats = OdeStats::<T>::default();

    let mut h = match opts.h_init {
        Some(h) => h,
        None => initial_step(&mut rhs, &y, t, span, opts).min(h_max),
    };

    let mut k: Vec<Array1<Complex<T>>> = Vec::with_capacity(7);
    while t < t_end {
        if stats.steps + stats.rejected > opts.max_steps {
            return Err(CoreError::Stiffness {
                time: t.to_f64().unwrap_or(f64::NAN),
                step: h.to_f64().unwrap_or(f64::NAN),
            });
        }
        h = h.min(h_max).min(t_end - t);
        if h < h_min && t + h < t_end {
            return Err(CoreError::Stiffness {
                time: t.to_f64().unwrap_or(f64::NAN),
                step: h.to_f64().unwrap_or(f64::NAN),
            });
        }

        k.clear();
        k.push(rhs(t, &y));
        for s in 0..6 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = lit::<T>(A[s][j]);
                if a != T::zero() {
                    ys.zip_mut_with(kj, |yi, ki| *yi += ki * Complex::new(a * h, T::zero()));
                }
            }
            k.push(rhs(t + lit::<T>(C[s]) * h, &ys));
        }

        let mut y5 = y.clone();
        for (j, kj) in k.iter().enumerate() {
            let b = lit::<T>(B5[j]);
            if b != T::zero() {
                y5.zip_mut_with(kj, |yi, ki| *yi += ki * Complex::new(b * h, T::zero()));
            }
        }
        let mut err = T::zero();
        for i in 0..y.len() {
            let mut e = Complex::new(T::zero(), T::zero());
            for (j, kj) in k.iter().enumerate() {
                let d = lit::<T>(B5[j] - B4[j]);
                if d != T::zero() {
                    e += kj[i] * Complex::new(d * h, T::zero());
                }
            }
            let scale = opts.atol + opts.rtol * y[i].norm().max(y5[i].norm());
            err = err.max(e.norm() / scale);
        }

        if err <= T::one() || h <= h_min {
            t = t + h;
            y = y5;
            let adj = post_step(&mut y);
            if adj > stats.max_projection {
                stats.max_projection = adj;
            }
            observer(t, &y);
            stats.steps += 1;
            let factor = if err > T::zero() {
                (lit::<T>(0.9) * err.powf(lit::<T>(-0.2))).min(lit::<T>(5.0))
            } else {
                lit::<T>(5.0)
            };
            h = h * factor.max(lit::<T>(0.2));
        } else {
            stats.rejected += 1;
            let factor = (lit::<T>(0.9) * err.powf(lit::<T>(-0.2))).max(lit::<T>(0.1));
            h = h * factor;
        }
    }
    Ok((y, stats))
}

/// Integrate and return the state at each requested time.
///
/// `times` must be non-decreasing and start at or after `t0`; steps are
/// clamped so each target is hit exactly. `times[0] == t0` yields the
/// initial state unchanged.
pub fn integrate_at<T, F, P>(
    mut rhs: F,
    y0: &Array1<Complex<T>>,
    t0: T,
    times: &[T],
    opts: &OdeOptions<T>,
    mut post_step: P,
) -> Result<(Vec<Array1<Complex<T>>>, OdeStats<T>)>
where
    T: Real,
    F: FnMut(T, &Array1<Complex<T>>) -> Array1<Complex<T>>,
    P: FnMut(&mut Array1<Complex<T>>) -> T,
{
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(CoreError::InvalidInput("sample times must be non-decreasing".into()));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut stats = OdeStats::<T>::default();
    let mut y = y0.clone();
    let mut t = t0;
    for &target in times {
        if target < t0 {
            return Err(CoreError::InvalidInput("sample time precedes t0".into()));
        }
        if target > t {
            let (y_new, s) = integrate_with(&mut rhs, &y, t, target, opts, &mut post_step, |_, _| {})?;
            y = y_new;
            t = target;
            stats.steps += s.steps;
            stats.rejected += s.rejected;
            if s.max_projection > stats.max_projection {
                stats.max_projection = s.max_projection;
            }
        }
        out.push(y.clone());
    }
    Ok((out, stats))
}

fn initial_step<T, F>(
    rhs: &mut F,
    y: &Array1<Complex<T>>,
    t: T,
    span: T,
    opts: &OdeOptions<T>,
) -> T
where
    T: Real,
    F: FnMut(T, &Array1<Complex<T>>) -> Array1<Complex<T>>,
{
    let f = rhs(t, y);
    let ynorm = y.iter().map(|v| v.norm()).fold(T::zero(), T::max);
    let fnorm = f.iter().map(|v| v.norm()).fold(T::zero(), T::max);
    let floor = span * lit::<T>(1e-8);
    if fnorm <= T::zero() {
        return span * lit::<T>(1e-3);
    }
    let scale = opts.atol + opts.rtol * ynorm;
    (lit::<T>(0.01) * (scale / fnorm).max(ynorm / fnorm * lit::<T>(0.01)))
        .max(floor)
        .min(span * lit::<T>(0.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let kappa = 0.2;
        let opts = OdeOptions::with_tolerance(1e-10);
        let y0 = array![c(1.0, 0.0)];
        let rhs = |_t: f64, y: &Array1<Complex<f64>>| y * c(-kappa / 2.0, 0.0);
        let (y, _) = integrate_with(rhs, &y0, 0.0, 30.0, &opts, |_| 0.0, |_, _| {}).unwrap();
        assert_abs_diff_eq!(y[0].re, (-kappa / 2.0 * 30.0f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(y[0].im, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn complex_rotation_preserves_modulus() {
        let opts = OdeOptions::with_tolerance(1e-10);
        let y0 = array![c(1.0, 0.0)];
        let g = c(-0.05, 3.0);
        let rhs = move |_t: f64, y: &Array1<Complex<f64>>| y * g;
        let (y, _) = integrate_with(rhs, &y0, 0.0, 10.0, &opts, |_| 0.0, |_, _| {}).unwrap();
        let expected = (g * 10.0).exp();
        assert_abs_diff_eq!(y[0].re, expected.re, epsilon = 1e-8);
        assert_abs_diff_eq!(y[0].im, expected.im, epsilon = 1e-8);
    }

    #[test]
    fn integrate_at_hits_targets() {
        let opts = OdeOptions::with_tolerance(1e-9);
        let y0 = array![c(2.0, 0.0)];
        let rhs = |_t: f64, y: &Array1<Complex<f64>>| y * c(-1.0, 0.0);
        let times = [0.0, 0.5, 1.0, 2.5];
        let (samples, _) = integrate_at(rhs, &y0, 0.0, &times, &opts, |_| 0.0).unwrap();
        assert_eq!(samples.len(), 4);
        for (k, &t) in times.iter().enumerate() {
            assert_abs_diff_eq!(samples[k][0].re, 2.0 * (-t).exp(), epsilon = 1e-7);
        }
    }

    #[test]
    fn post_step_projection_is_applied_and_tracked() {
        let opts = OdeOptions::with_tolerance(1e-8);
        let y0 = array![c(1.0, 0.0)];
        let rhs = |_t: f64, y: &Array1<Complex<f64>>| y * c(-0.3, 0.0);
        // Project the imaginary part to zero; it should already be zero.
        let (y, stats) = integrate_with(
            rhs,
            &y0,
            0.0,
            5.0,
            &opts,
            |y: &mut Array1<Complex<f64>>| {
                let drift = y[0].im.abs();
                y[0] = c(y[0].re, 0.0);
                drift
            },
            |_, _| {},
        )
        .unwrap();
        assert!(stats.max_projection < 1e-14);
        assert!(y[0].im == 0.0);
    }

    #[test]
    fn step_underflow_reports_stiffness() {
        let mut opts = OdeOptions::with_tolerance(1e-12);
        opts.h_min = Some(0.5);
        opts.h_init = Some(0.5);
        // A fast rate makes h = 0.5 wildly inaccurate, forcing rejections
        // below h_min.
        let y0 = array![c(1.0, 0.0)];
        let rhs = |_t: f64, y: &Array1<Complex<f64>>| y * c(-2.0e3, 0.0);
        let err = integrate_with(rhs, &y0, 0.0, 10.0, &opts, |_| 0.0, |_, _| {}).unwrap_err();
        match err {
            CoreError::Stiffness { .. } => {}
            other => panic!("expected stiffness diagnostic, got {other}"),
        }
    }

    #[test]
    fn observer_sees_monotone_times() {
        let opts = OdeOptions::with_tolerance(1e-8);
        let y0 = array![c(1.0, 0.0)];
        let rhs = |_t: f64, y: &Array1<Complex<f64>>| y * c(-1.0, 0.5);
        let mut last = 0.0;
        integrate_with(
            rhs,
            &y0,
            0.0,
            3.0,
            &opts,
            |_| 0.0,
            |t, _| {
                assert!(t > last);
                last = t;
            },
        )
        .unwrap();
        assert_abs_diff_eq!(last, 3.0, epsilon = 1e-12);
    }
}
