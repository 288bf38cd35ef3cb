//! Coupled rate equations for the photon correlation matrix `n` and the
//! molecular excitation fractions `f`, and their steady state.
//!
//! The photon sector evolves as
//!
//! ```text
//! dn/dt = [(iΩ − κ/2) n + f⁺ E (n + 1) − f⁻ A n] + h.c.
//! ```
//!
//! with Ω, E, A diagonal in the mode index and f± the excitation-weighted
//! overlap sums. Each molecular site relaxes as
//!
//! ```text
//! df_i/dt = −(Γ↓ + 2Ẽ_i) f_i + (Γ↑_i + 2Ã_i)(1 − f_i)
//! ```
//!
//! where Ẽ_i, Ã_i are the local stimulated emission/absorption rates seen by
//! a single molecule at site i.
//!
//! Mode functions are normalised against the quadrature weights, so the
//! photon-side site sums carry an overall `coupling` factor: the effective
//! number of molecules represented by the grid. The molecular-side rates
//! Ẽ_i, Ã_i are per molecule and carry neither weights nor coupling.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Lapack, Solve};
use num_complex::Complex;

use crate::integrate::{integrate_at, integrate_with, OdeOptions, OdeStats};
use crate::modes::ModeBasis;
use crate::rates::RateSet;
use crate::{lit, re, CoreError, Real, Result};
use num_traits::Float;

/// Photon correlation matrix `n` (entries ⟨a_p†a_q⟩) and molecular
/// excitation fractions `f_i`.
#[derive(Debug, Clone)]
pub struct SystemState<T> {
    pub photon: Array2<Complex<T>>,
    pub excitation: Array1<T>,
}

impl<T: Real> SystemState<T> {
    /// Cold start: empty cavity, unexcited molecules.
    pub fn zeros(modes: usize, sites: usize) -> Self {
        Self {
            photon: Array2::zeros((modes, modes)),
            excitation: Array1::zeros(sites),
        }
    }

    pub fn modes(&self) -> usize {
        self.photon.nrows()
    }

    pub fn sites(&self) -> usize {
        self.excitation.len()
    }

    /// Largest entry of |n − n†|.
    pub fn hermiticity_defect(&self) -> T {
        let m = self.modes();
        let mut worst = T::zero();
        for p in 0..m {
            for q in 0..m {
                let d = (self.photon[(p, q)] - self.photon[(q, p)].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Check the structural invariants: Hermiticity of `n`, near-positive
    /// diagonal, and `f` within [0, 1] (all up to `diag_floor`-scaled slack).
    pub fn validate(&self, diag_floor: T) -> Result<()> {
        let m = self.modes();
        if self.photon.ncols() != m {
            return Err(CoreError::Dimension("photon matrix not square".into()));
        }
        let herm_tol = lit::<T>(1e-10).max(T::epsilon() * lit::<T>(100.0));
        let defect = self.hermiticity_defect();
        if defect > herm_tol {
            return Err(CoreError::Invariant(format!(
                "photon matrix not Hermitian: defect {defect:e}"
            )));
        }
        for p in 0..m {
            let d = self.photon[(p, p)];
            if d.re < -diag_floor {
                return Err(CoreError::Invariant(format!(
                    "negative mode population n_{p}{p} = {:e}",
                    d.re
                )));
            }
        }
        let slack = lit::<T>(1e-12).max(T::epsilon() * lit::<T>(100.0));
        for (i, &f) in self.excitation.iter().enumerate() {
            if f < -slack || f > T::one() + slack {
                return Err(CoreError::Invariant(format!(
                    "excitation fraction f_{i} = {f} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Incoherent drive and loss rates, plus the medium coupling scale.
#[derive(Debug, Clone)]
pub struct PumpProfile<T> {
    /// Per-site pump rate Γ↑_i (THz).
    pub pump: Array1<T>,
    /// Molecular decay rate Γ↓ to non-cavity modes (THz).
    pub decay: T,
    /// Cavity loss κ (THz).
    pub loss: T,
    /// Effective molecule number folded into the photon-side site sums.
    pub coupling: T,
}

impl<T: Real> PumpProfile<T> {
    pub fn uniform(sites: usize, rate: T, decay: T, loss: T, coupling: T) -> Result<Self> {
        Self::new(Array1::from_elem(sites, rate), decay, loss, coupling)
    }

    /// Gaussian pump spot centred on the cavity axis: Γ↑_i =
    /// peak·exp(−r_i²/(2 width²)) with `width` in units of l_0.
    pub fn gaussian<G: AsRef<[T]>>(
        positions: G,
        width: T,
        peak: T,
        decay: T,
        loss: T,
        coupling: T,
    ) -> Result<Self> {
        if width <= T::zero() {
            return Err(CoreError::InvalidInput("pump width must be positive".into()));
        }
        let pump = positions
            .as_ref()
            .iter()
            .map(|&r| {
                let u = r / width;
                peak * (-u * u / lit::<T>(2.0)).exp()
            })
            .collect::<Array1<T>>();
        Self::new(pump, decay, loss, coupling)
    }

    pub fn new(pump: Array1<T>, decay: T, loss: T, coupling: T) -> Result<Self> {
        if pump.iter().any(|&g| g < T::zero())
            || decay < T::zero()
            || loss < T::zero()
            || coupling <= T::zero()
        {
            return Err(CoreError::InvalidInput(
                "pump, decay, and loss must be non-negative; coupling positive".into(),
            ));
        }
        Ok(Self {
            pump,
            decay,
            loss,
            coupling,
        })
    }

    pub fn sites(&self) -> usize {
        self.pump.len()
    }
}

/// Site sums entering the equations of motion, evaluated at one state.
#[derive(Debug, Clone)]
pub struct DerivedFields<T> {
    /// f⁺_pq = coupling · Σ_i w_i f_i Ψ_pq^i.
    pub f_plus: Array2<T>,
    /// f⁻_pq = coupling · Σ_i w_i (1 − f_i) Ψ_pq^i.
    pub f_minus: Array2<T>,
    /// Ẽ_i = Re Tr[Φ_i E (n + 1)], per molecule.
    pub stim_emission: Array1<T>,
    /// Ã_i = Re Tr[Φ_i n A], per molecule.
    pub stim_absorption: Array1<T>,
}

fn check_dims<T: Real>(
    state: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
) -> Result<()> {
    let m = basis.mode_count();
    let n = basis.site_count();
    if state.modes() != m || state.photon.ncols() != m {
        return Err(CoreError::Dimension(format!(
            "state has {} modes, basis has {m}",
            state.modes()
        )));
    }
    if rates.len() != m {
        return Err(CoreError::Dimension(format!(
            "rate set has {} modes, basis has {m}",
            rates.len()
        )));
    }
    if state.sites() != n || pump.sites() != n {
        return Err(CoreError::Dimension(format!(
            "state has {} sites, pump {}, basis {n}",
            state.sites(),
            pump.sites()
        )));
    }
    Ok(())
}

/// Evaluate f±, Ẽ, Ã at `state`.
pub fn derived_fields<T: Real>(
    state: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
) -> Result<DerivedFields<T>> {
    check_dims(state, rates, pump, basis)?;
    let m = basis.mode_count();
    let n = basis.site_count();
    let w = basis.grid().weights();

    let mut f_plus = Array2::zeros((m, m));
    let mut f_minus = Array2::zeros((m, m));
    for p in 0..m {
        for q in p..m {
            let mut plus = T::zero();
            let mut minus = T::zero();
            for i in 0..n {
                let k = w[i] * basis.overlap(p, q, i);
                plus += k * state.excitation[i];
                minus += k * (T::one() - state.excitation[i]);
            }
            plus *= pump.coupling;
            minus *= pump.coupling;
            f_plus[(p, q)] = plus;
            f_plus[(q, p)] = plus;
            f_minus[(p, q)] = minus;
            f_minus[(q, p)] = minus;
        }
    }

    let mut stim_emission = Array1::zeros(n);
    let mut stim_absorption = Array1::zeros(n);
    for i in 0..n {
        let mut e = T::zero();
        let mut a = T::zero();
        for p in 0..m {
            for q in 0..m {
                let phi = basis.overlap(p, q, i);
                let npq = state.photon[(q, p)];
                e += phi * rates.emission()[q] * (npq.re + if p == q { T::one() } else { T::zero() });
                a += phi * rates.absorption()[p] * npq.re;
            }
        }
        stim_emission[i] = e;
        stim_absorption[i] = a;
    }

    Ok(DerivedFields {
        f_plus,
        f_minus,
        stim_emission,
        stim_absorption,
    })
}

/// dn/dt: the bracket plus its conjugate transpose, Hermitian by
/// construction.
pub fn rhs_photon<T: Real>(
    state: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
) -> Result<Array2<Complex<T>>> {
    let fields = derived_fields(state, rates, pump, basis)?;
    Ok(rhs_photon_with(state, rates, pump, basis, &fields))
}

fn rhs_photon_with<T: Real>(
    state: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
    fields: &DerivedFields<T>,
) -> Array2<Complex<T>> {
    let m = basis.mode_count();
    let half_loss = pump.loss / lit::<T>(2.0);
    let mut bracket = Array2::<Complex<T>>::zeros((m, m));
    for p in 0..m {
        for q in 0..m {
            let mut acc = Complex::new(T::zero(), basis.omega()[p]) * state.photon[(p, q)]
                - state.photon[(p, q)] * half_loss;
            for k in 0..m {
                let n_plus_one = state.photon[(k, q)]
                    + if k == q { re(T::one()) } else { Complex::new(T::zero(), T::zero()) };
                acc += re(fields.f_plus[(p, k)] * rates.emission()[k]) * n_plus_one;
                acc -= re(fields.f_minus[(p, k)] * rates.absorption()[k]) * state.photon[(k, q)];
            }
            bracket[(p, q)] = acc;
        }
    }
    let mut out = Array2::<Complex<T>>::zeros((m, m));
    for p in 0..m {
        for q in 0..m {
            out[(p, q)] = bracket[(p, q)] + bracket[(q, p)].conj();
        }
    }
    out
}

/// df/dt for every site; real by construction.
pub fn rhs_molecule<T: Real>(
    state: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
) -> Result<Array1<T>> {
    let fields = derived_fields(state, rates, pump, basis)?;
    Ok(rhs_molecule_with(state, pump, &fields))
}

fn rhs_molecule_with<T: Real>(
    state: &SystemState<T>,
    pump: &PumpProfile<T>,
    fields: &DerivedFields<T>,
) -> Array1<T> {
    let two = lit::<T>(2.0);
    Array1::from_shape_fn(state.sites(), |i| {
        let f = state.excitation[i];
        -(pump.decay + two * fields.stim_emission[i]) * f
            + (pump.pump[i] + two * fields.stim_absorption[i]) * (T::one() - f)
    })
}

/// Combined residual: max over |dn/dt| and |df/dt| entries (THz).
pub fn residual<T: Real>(
    state: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
) -> Result<T> {
    let fields = derived_fields(state, rates, pump, basis)?;
    let dn = rhs_photon_with(state, rates, pump, basis, &fields);
    let df = rhs_molecule_with(state, pump, &fields);
    let worst_n = dn.iter().map(|v| v.norm()).fold(T::zero(), T::max);
    let worst_f = df.iter().map(|v| v.abs()).fold(T::zero(), T::max);
    Ok(worst_n.max(worst_f))
}

fn flatten<T: Real>(state: &SystemState<T>) -> Array1<Complex<T>> {
    let m = state.modes();
    let n = state.sites();
    let mut y = Array1::zeros(m * m + n);
    for p in 0..m {
        for q in 0..m {
            y[p * m + q] = state.photon[(p, q)];
        }
    }
    for i in 0..n {
        y[m * m + i] = re(state.excitation[i]);
    }
    y
}

fn unflatten<T: Real>(y: &Array1<Complex<T>>, modes: usize, sites: usize) -> SystemState<T> {
    let photon = Array2::from_shape_fn((modes, modes), |(p, q)| y[p * modes + q]);
    let excitation = Array1::from_shape_fn(sites, |i| y[modes * modes + i].re);
    SystemState { photon, excitation }
}

/// Project the flat state back onto its manifold: re-hermitise the photon
/// block and drop the (identically zero) imaginary part of `f`. Returns the
/// adjustment size.
fn project_flat<T: Real>(y: &mut Array1<Complex<T>>, modes: usize) -> T {
    let half = lit::<T>(0.5);
    let mut drift = T::zero();
    for p in 0..modes {
        for q in p..modes {
            let upper = y[p * modes + q];
            let lower = y[q * modes + p];
            let sym = (upper + lower.conj()) * half;
            drift = drift.max((upper - lower.conj()).norm());
            y[p * modes + q] = sym;
            y[q * modes + p] = sym.conj();
        }
        // diagonal: conj-symmetrisation already zeroed the imaginary part
        let d = y[p * modes + p];
        y[p * modes + p] = re(d.re);
    }
    for i in modes * modes..y.len() {
        drift = drift.max(y[i].im.abs());
        y[i] = re(y[i].re);
    }
    drift
}

/// Largest rate in the problem, used to bound the explicit step.
fn fastest_rate<T: Real>(rates: &RateSet<T>, pump: &PumpProfile<T>) -> T {
    let mut fast = pump.loss + pump.decay;
    let pump_max = pump.pump.iter().cloned().fold(T::zero(), T::max);
    fast = fast + pump_max;
    let coupled = rates
        .emission()
        .iter()
        .zip(rates.absorption())
        .map(|(&e, &a)| e + a)
        .fold(T::zero(), T::max);
    fast + pump.coupling * coupled
}

/// Time-sampled solution of the coupled equations.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<SystemState<T>>,
    pub stats: OdeStats<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn last(&self) -> &SystemState<T> {
        self.states.last().expect("trajectory never empty")
    }
}

/// Integrate from `state0` over `span = (t0, t1)`, sampling at every
/// accepted step. Each emitted sample is validated (Hermiticity, population
/// floor of −1e−9, excitation bounds).
pub fn evolve<T: Real>(
    state0: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
    span: (T, T),
    tol: T,
) -> Result<Trajectory<T>> {
    check_dims(state0, rates, pump, basis)?;
    if tol < lit::<T>(1e-12) || tol > lit::<T>(1e-3) {
        return Err(CoreError::InvalidInput(
            "relative tolerance must lie in [1e-12, 1e-3]".into(),
        ));
    }
    let modes = basis.mode_count();
    let sites = basis.site_count();
    let mut opts = OdeOptions::with_tolerance(tol);
    opts.h_max = Some(lit::<T>(2.0) / fastest_rate(rates, pump).max(lit::<T>(1e-6)));

    let y0 = flatten(state0);
    let mut times = vec![span.0];
    let mut flat_states = vec![y0.clone()];
    let rhs = make_rhs(rates, pump, basis);
    let (_, stats) = integrate_with(
        rhs,
        &y0,
        span.0,
        span.1,
        &opts,
        |y| project_flat(y, modes),
        |t, y| {
            times.push(t);
            flat_states.push(y.clone());
        },
    )?;

    let mut states = Vec::with_capacity(flat_states.len());
    for y in &flat_states {
        let s = unflatten(y, modes, sites);
        s.validate(lit::<T>(1e-9))?;
        states.push(s);
    }
    if stats.max_projection > lit::<T>(1e-10) {
        log::warn!(
            "hermiticity drift {:e} during evolve",
            stats.max_projection
        );
    }
    Ok(Trajectory { times, states, stats })
}

fn make_rhs<'a, T: Real>(
    rates: &'a RateSet<T>,
    pump: &'a PumpProfile<T>,
    basis: &'a ModeBasis<T>,
) -> impl FnMut(T, &Array1<Complex<T>>) -> Array1<Complex<T>> + 'a {
    let modes = basis.mode_count();
    let sites = basis.site_count();
    move |_t, y| {
        let state = unflatten(y, modes, sites);
        let fields = derived_fields(&state, rates, pump, basis)
            .expect("dimensions fixed at construction");
        let dn = rhs_photon_with(&state, rates, pump, basis, &fields);
        let df = rhs_molecule_with(&state, pump, &fields);
        let mut dy = Array1::zeros(modes * modes + sites);
        for p in 0..modes {
            for q in 0..modes {
                dy[p * modes + q] = dn[(p, q)];
            }
        }
        for i in 0..sites {
            dy[modes * modes + i] = re(df[i]);
        }
        dy
    }
}

/// Options for the steady-state search.
#[derive(Debug, Clone)]
pub struct SteadyStateOptions<T> {
    /// Give up beyond this integration time (ps).
    pub max_time: T,
    /// Residual checkpoints spacing; defaults to the slowest molecular
    /// timescale 1/Γ↓.
    pub checkpoint: Option<T>,
    /// Integrator tolerance.
    pub ode_tol: T,
    /// Refine with damped Newton iterations once integration is close.
    pub newton: bool,
    /// Residual below which Newton refinement is attempted (THz).
    pub newton_trigger: T,
}

impl<T: Real> Default for SteadyStateOptions<T> {
    fn default() -> Self {
        Self {
            max_time: lit::<T>(5e7),
            checkpoint: None,
            ode_tol: lit::<T>(1e-8),
            newton: true,
            newton_trigger: lit::<T>(1e-3),
        }
    }
}

/// A converged steady state carrying its residual record.
#[derive(Debug, Clone)]
pub struct SteadyState<T> {
    pub state: SystemState<T>,
    /// Residual max-norm at the returned state (THz).
    pub residual: T,
    /// Tolerance the search was asked to reach.
    pub tol: T,
    /// Integration time spent before convergence (ps).
    pub elapsed: T,
}

impl<T: Real> SteadyState<T> {
    pub fn converged(&self) -> bool {
        self.residual <= self.tol
    }
}

/// Find a state with ‖dn/dt‖_max, ‖df/dt‖_max ≤ `tol`.
///
/// Long-time integration with convergence checkpoints spaced by the slowest
/// timescale, refined by damped Newton iterations on the packed residual.
/// Declares convergence from integration alone only after three consecutive
/// quiet checkpoints.
pub fn steady_state<T>(
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
    init: &SystemState<T>,
    tol: T,
    opts: &SteadyStateOptions<T>,
) -> Result<SteadyState<T>>
where
    T: Real + Lapack,
{
    crate::serial_blas();
    check_dims(init, rates, pump, basis)?;
    if tol <= T::zero() {
        return Err(CoreError::InvalidInput("steady-state tolerance must be positive".into()));
    }
    let modes = basis.mode_count();
    let sites = basis.site_count();

    let slow = if pump.decay > T::zero() {
        T::one() / pump.decay
    } else if pump.loss > T::zero() {
        T::one() / pump.loss
    } else {
        T::one()
    };
    let window = opts.checkpoint.unwrap_or(slow).min(opts.max_time);

    let mut ode = OdeOptions::with_tolerance(opts.ode_tol);
    ode.h_max = Some(lit::<T>(2.0) / fastest_rate(rates, pump).max(lit::<T>(1e-6)));

    let rhs = make_rhs(rates, pump, basis);
    let mut rhs = rhs;

    let mut y = flatten(init);
    let mut t = T::zero();
    let mut history: Vec<f64> = Vec::new();
    let mut quiet = 0usize;
    let mut windows_done = 0usize;

    loop {
        let state = unflatten(&y, modes, sites);
        let res = residual(&state, rates, pump, basis)?;
        history.push(res.to_f64().unwrap_or(f64::NAN));

        if res <= tol {
            quiet += 1;
            if quiet >= 3 {
                return Ok(SteadyState {
                    state,
                    residual: res,
                    tol,
                    elapsed: t,
                });
            }
        } else {
            quiet = 0;
        }

        // Newton only refines the state integration has already brought near
        // the attractor; from a cold start it could land on an unstable
        // fixed point (the empty-cavity branch above threshold), so require
        // at least one window of integration and a nearby solution.
        if opts.newton && windows_done > 0 && res <= opts.newton_trigger {
            if let Some(refined) = newton_refine(&state, rates, pump, basis, tol) {
                let res_refined = residual(&refined, rates, pump, basis)?;
                let before = pack(&state);
                let after = pack(&refined);
                let dist = max_abs(&(&after - &before));
                let near = dist <= lit::<T>(0.5) * (T::one() + max_abs(&before));
                if near && res_refined <= tol && refined.validate(lit::<T>(1e-9)).is_ok() {
                    return Ok(SteadyState {
                        state: refined,
                        residual: res_refined,
                        tol,
                        elapsed: t,
                    });
                }
            }
        }

        if t >= opts.max_time {
            return Err(CoreError::Convergence {
                max_time: opts.max_time.to_f64().unwrap_or(f64::NAN),
                residual: history.last().copied().unwrap_or(f64::NAN),
                tol: tol.to_f64().unwrap_or(f64::NAN),
                history,
            });
        }

        let t_next = (t + window).min(opts.max_time);
        let (y_next, _) =
            integrate_with(&mut rhs, &y, t, t_next, &ode, |y| project_flat(y, modes), |_, _| {})?;
        y = y_next;
        t = t_next;
        windows_done += 1;
    }
}

/// Pack the independent real degrees of freedom: Re n_pq (p ≤ q),
/// Im n_pq (p < q), then f.
fn pack<T: Real>(state: &SystemState<T>) -> Array1<T> {
    let m = state.modes();
    let n = state.sites();
    let mut x = Array1::zeros(m * m + n);
    let mut k = 0;
    for p in 0..m {
        for q in p..m {
            x[k] = state.photon[(p, q)].re;
            k += 1;
        }
    }
    for p in 0..m {
        for q in (p + 1)..m {
            x[k] = state.photon[(p, q)].im;
            k += 1;
        }
    }
    for i in 0..n {
        x[k] = state.excitation[i];
        k += 1;
    }
    x
}

fn unpack<T: Real>(x: &Array1<T>, modes: usize, sites: usize) -> SystemState<T> {
    let mut photon = Array2::zeros((modes, modes));
    let mut k = 0;
    for p in 0..modes {
        for q in p..modes {
            photon[(p, q)] = re(x[k]);
            k += 1;
        }
    }
    for p in 0..modes {
        for q in (p + 1)..modes {
            let v = x[k];
            k += 1;
            let cur: Complex<T> = photon[(p, q)];
            photon[(p, q)] = Complex::new(cur.re, v);
        }
    }
    for p in 0..modes {
        for q in (p + 1)..modes {
            photon[(q, p)] = photon[(p, q)].conj();
        }
    }
    let excitation = Array1::from_shape_fn(sites, |i| x[modes * modes + i]);
    SystemState { photon, excitation }
}

fn packed_residual<T: Real>(
    x: &Array1<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
) -> Array1<T> {
    let m = basis.mode_count();
    let n = basis.site_count();
    let state = unpack(x, m, n);
    let fields = derived_fields(&state, rates, pump, basis).expect("dims fixed");
    let dn = rhs_photon_with(&state, rates, pump, basis, &fields);
    let df = rhs_molecule_with(&state, pump, &fields);
    let mut fx = Array1::zeros(m * m + n);
    let mut k = 0;
    for p in 0..m {
        for q in p..m {
            fx[k] = dn[(p, q)].re;
            k += 1;
        }
    }
    for p in 0..m {
        for q in (p + 1)..m {
            fx[k] = dn[(p, q)].im;
            k += 1;
        }
    }
    for i in 0..n {
        fx[k] = df[i];
        k += 1;
    }
    fx
}

fn max_abs<T: Real>(v: &Array1<T>) -> T {
    v.iter().map(|x| x.abs()).fold(T::zero(), T::max)
}

/// Damped Newton iteration on the packed residual with a finite-difference
/// Jacobian. Returns `None` when the iteration stalls or leaves the
/// physical region.
fn newton_refine<T>(
    start: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
    tol: T,
) -> Option<SystemState<T>>
where
    T: Real + Lapack,
{
    let m = basis.mode_count();
    let n = basis.site_count();
    let dim = m * m + n;
    let mut x = pack(start);
    let mut fx = packed_residual(&x, rates, pump, basis);
    let mut best = max_abs(&fx);

    for _ in 0..40 {
        if best <= tol {
            return Some(unpack(&x, m, n));
        }
        let mut jac = Array2::<T>::zeros((dim, dim));
        let scale = max_abs(&x).max(T::one());
        for j in 0..dim {
            let h = Float::sqrt(T::epsilon()) * (Float::abs(x[j]) + lit::<T>(1e-6) * scale);
            let mut xj = x.clone();
            xj[j] += h;
            let fj = packed_residual(&xj, rates, pump, basis);
            for i in 0..dim {
                jac[(i, j)] = (fj[i] - fx[i]) / h;
            }
        }
        let rhs = fx.mapv(|v| -v);
        let dx = jac.solve(&rhs).ok()?;

        let mut lambda = T::one();
        let mut improved = false;
        for _ in 0..14 {
            let trial = &x + &dx.mapv(|v| v * lambda);
            let state = unpack(&trial, m, n);
            let sane = state
                .excitation
                .iter()
                .all(|&f| f > lit::<T>(-0.05) && f < lit::<T>(1.05))
                && (0..m).all(|p| state.photon[(p, p)].re > lit::<T>(-1e-6))
                && trial.iter().all(|v| v.is_finite());
            if sane {
                let ft = packed_residual(&trial, rates, pump, basis);
                let norm = max_abs(&ft);
                if norm < best {
                    x = trial;
                    fx = ft;
                    best = norm;
                    improved = true;
                    break;
                }
            }
            lambda = lambda / lit::<T>(2.0);
        }
        if !improved {
            return None;
        }
    }
    if best <= tol {
        Some(unpack(&x, m, n))
    } else {
        None
    }
}

/// Evolve and return states sampled at the given times (used by tests and by
/// the correlation cross-checks).
pub fn evolve_at<T: Real>(
    state0: &SystemState<T>,
    rates: &RateSet<T>,
    pump: &PumpProfile<T>,
    basis: &ModeBasis<T>,
    times: &[T],
    tol: T,
) -> Result<Vec<SystemState<T>>> {
    check_dims(state0, rates, pump, basis)?;
    let modes = basis.mode_count();
    let sites = basis.site_count();
    let mut opts = OdeOptions::with_tolerance(tol);
    opts.h_max = Some(lit::<T>(2.0) / fastest_rate(rates, pump).max(lit::<T>(1e-6)));
    let y0 = flatten(state0);
    let rhs = make_rhs(rates, pump, basis);
    let (flat, _) = integrate_at(rhs, &y0, T::zero(), times, &opts, |y| {
        project_flat(y, modes)
    })?;
    Ok(flat.iter().map(|y| unflatten(y, modes, sites)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::{build_harmonic_basis, SpatialGrid};
    use crate::rates::{EmissionProfile, RateSet};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Single mode, single site, unit overlap: Σ_i w_i Ψ_00^i = 1.
    fn scalar_basis() -> ModeBasis<f64> {
        let grid = SpatialGrid::new(vec![0.0], vec![1.0]).unwrap();
        let psi = array![[1.0]];
        ModeBasis::from_samples(vec![520.0], 545.0, psi, grid).unwrap()
    }

    fn flat_rates(basis: &ModeBasis<f64>, rate: f64) -> RateSet<f64> {
        // beta = 0 keeps A = E exactly.
        RateSet::from_profile(&EmissionProfile::Flat { rate }, basis, 0.0).unwrap()
    }

    #[test]
    fn rhs_photon_vanishes_on_empty_state() {
        let basis = scalar_basis();
        let rates = flat_rates(&basis, 1.0);
        let pump = PumpProfile::uniform(1, 0.0, 0.0, 0.2, 1.0).unwrap();
        let state = SystemState::zeros(1, 1);
        let dn = rhs_photon(&state, &rates, &pump, &basis).unwrap();
        assert_eq!(dn[(0, 0)], Complex::new(0.0, 0.0));
    }

    #[test]
    fn rhs_photon_spontaneous_seeding() {
        // n = 0, f = 1 everywhere: dn/dt = f⁺E + (f⁺E)†.
        let grid = SpatialGrid::uniform(401, 8.0).unwrap();
        let basis = build_harmonic_basis(3, 520.0, 1.7, 545.0, grid).unwrap();
        let rates = flat_rates(&basis, 0.5);
        let pump = PumpProfile::uniform(basis.site_count(), 0.0, 0.0, 0.0, 1.0).unwrap();
        let mut state = SystemState::zeros(3, basis.site_count());
        state.excitation.fill(1.0);
        let dn = rhs_photon(&state, &rates, &pump, &basis).unwrap();
        let fields = derived_fields(&state, &rates, &pump, &basis).unwrap();
        for p in 0..3 {
            for q in 0..3 {
                let expected = fields.f_plus[(p, q)] * rates.emission()[q]
                    + fields.f_plus[(q, p)] * rates.emission()[p];
                assert_abs_diff_eq!(dn[(p, q)].re, expected, epsilon = 1e-14);
                assert_abs_diff_eq!(dn[(p, q)].im, 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rhs_photon_scalar_hand_value() {
        // Independent scalar evaluation:
        // bracket = (iω − κ/2)n + f⁺E(n+1) − f⁻An, dn/dt = 2 Re bracket.
        // n = 2, f = 1/2, E = A = 1, κ = 0.2:
        // 2·(−0.1·2 + 0.5·3 − 0.5·2) = 0.6.
        let basis = scalar_basis();
        let rates = flat_rates(&basis, 1.0);
        let pump = PumpProfile::uniform(1, 0.0, 0.0, 0.2, 1.0).unwrap();
        let state = SystemState {
            photon: array![[Complex::new(2.0, 0.0)]],
            excitation: array![0.5],
        };
        let dn = rhs_photon(&state, &rates, &pump, &basis).unwrap();
        assert_abs_diff_eq!(dn[(0, 0)].re, 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(dn[(0, 0)].im, 0.0, epsilon = 1e-16);
    }

    #[test]
    fn rhs_molecule_pumps_empty_system() {
        let basis = scalar_basis();
        let rates = flat_rates(&basis, 1.0);
        let pump = PumpProfile::uniform(1, 0.7, 0.1, 0.2, 1.0).unwrap();
        let state = SystemState::zeros(1, 1);
        let df = rhs_molecule(&state, &rates, &pump, &basis).unwrap();
        assert_abs_diff_eq!(df[0], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn rhs_molecule_scalar_hand_value() {
        // n = 1, f = 1/2, E = A = 1, Γ↑ = Γ↓ = 0, Ψ_00 = 1:
        // Ẽ = 2, Ã = 1 → df/dt = −(2·2)(1/2) + (2·1)(1/2) = −1.
        let basis = scalar_basis();
        let rates = flat_rates(&basis, 1.0);
        let pump = PumpProfile::uniform(1, 0.0, 0.0, 0.0, 1.0).unwrap();
        let state = SystemState {
            photon: array![[Complex::new(1.0, 0.0)]],
            excitation: array![0.5],
        };
        let fields = derived_fields(&state, &rates, &pump, &basis).unwrap();
        assert_abs_diff_eq!(fields.stim_emission[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fields.stim_absorption[0], 1.0, epsilon = 1e-15);
        let df = rhs_molecule(&state, &rates, &pump, &basis).unwrap();
        assert_abs_diff_eq!(df[0], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn rhs_molecule_inward_at_boundaries() {
        let grid = SpatialGrid::uniform(101, 8.0).unwrap();
        let basis = build_harmonic_basis(2, 520.0, 1.7, 545.0, grid).unwrap();
        let rates = flat_rates(&basis, 0.3);
        let pump = PumpProfile::uniform(basis.site_count(), 1e-3, 2e-3, 0.1, 1.0).unwrap();
        let mut state = SystemState::zeros(2, basis.site_count());
        state.photon[(0, 0)] = Complex::new(0.4, 0.0);

        state.excitation.fill(0.0);
        let df = rhs_molecule(&state, &rates, &pump, &basis).unwrap();
        assert!(df.iter().all(|&v| v >= 0.0));

        state.excitation.fill(1.0);
        let df = rhs_molecule(&state, &rates, &pump, &basis).unwrap();
        assert!(df.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn rhs_photon_hermitian_bit_exact() {
        let grid = SpatialGrid::uniform(101, 8.0).unwrap();
        let basis = build_harmonic_basis(3, 520.0, 1.7, 545.0, grid).unwrap();
        let rates = flat_rates(&basis, 0.3);
        let pump = PumpProfile::gaussian(
            basis.grid().positions(),
            3.0,
            1e-3,
            2e-3,
            0.1,
            2.0,
        )
        .unwrap();
        let mut state = SystemState::zeros(3, basis.site_count());
        state.photon[(0, 0)] = Complex::new(0.5, 0.0);
        state.photon[(0, 1)] = Complex::new(0.1, 0.2);
        state.photon[(1, 0)] = Complex::new(0.1, -0.2);
        state.photon[(2, 2)] = Complex::new(0.25, 0.0);
        state.excitation.fill(0.3);
        let dn = rhs_photon(&state, &rates, &pump, &basis).unwrap();
        for p in 0..3 {
            assert_eq!(dn[(p, p)].im, 0.0);
            for q in 0..3 {
                assert_eq!(dn[(p, q)].re, dn[(q, p)].re);
                assert_eq!(dn[(p, q)].im, -dn[(q, p)].im);
            }
        }
    }

    #[test]
    fn site_sum_identity() {
        // f⁺ + f⁻ = coupling · Σ_i w_i Φ_i, which is coupling × identity for
        // an orthonormal basis.
        let grid = SpatialGrid::uniform(201, 8.0).unwrap();
        let basis = build_harmonic_basis(4, 520.0, 1.7, 545.0, grid).unwrap();
        let rates = flat_rates(&basis, 0.3);
        let coupling = 3.5;
        let pump =
            PumpProfile::uniform(basis.site_count(), 1e-3, 2e-3, 0.1, coupling).unwrap();
        let mut state = SystemState::zeros(4, basis.site_count());
        for (i, f) in state.excitation.iter_mut().enumerate() {
            *f = 0.3 + 0.2 * ((i as f64) / 200.0);
        }
        let fields = derived_fields(&state, &rates, &pump, &basis).unwrap();
        for p in 0..4 {
            for q in 0..4 {
                let target = if p == q { coupling } else { 0.0 };
                assert_abs_diff_eq!(
                    fields.f_plus[(p, q)] + fields.f_minus[(p, q)],
                    target,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn site_sums_linear_in_weights_and_kernel() {
        // Doubling the quadrature weights doubles the photon-side sums; the
        // per-molecule rates depend on the overlap kernel, not the weights.
        let grid = SpatialGrid::uniform(101, 8.0).unwrap();
        let doubled = SpatialGrid::new(
            grid.positions().to_vec(),
            grid.weights().iter().map(|w| 2.0 * w).collect(),
        )
        .unwrap();
        let basis = build_harmonic_basis(2, 520.0, 1.7, 545.0, grid).unwrap();
        let mut psi = Array2::zeros((2, basis.site_count()));
        for p in 0..2 {
            for i in 0..basis.site_count() {
                // Halved amplitude restores normalisation against the
                // doubled weights: Σ 2w (ψ/√2)² = Σ w ψ².
                psi[(p, i)] = basis.mode_value(p, i) / 2.0f64.sqrt();
            }
        }
        let basis2 =
            ModeBasis::from_samples(vec![520.0, 521.7], 545.0, psi, doubled).unwrap();
        let rates = flat_rates(&basis, 0.3);
        let pump = PumpProfile::uniform(basis.site_count(), 1e-3, 2e-3, 0.1, 1.0).unwrap();
        let mut state = SystemState::zeros(2, basis.site_count());
        state.excitation.fill(0.25);
        state.photon[(0, 0)] = Complex::new(0.7, 0.0);
        let a = derived_fields(&state, &rates, &pump, &basis).unwrap();
        let b = derived_fields(&state, &rates, &pump, &basis2).unwrap();
        // Same normalised sums, but the per-molecule kernel is halved.
        for p in 0..2 {
            for q in 0..2 {
                assert_abs_diff_eq!(a.f_plus[(p, q)], b.f_plus[(p, q)], epsilon = 1e-12);
            }
        }
        for i in 0..basis.site_count() {
            assert_abs_diff_eq!(
                a.stim_emission[i],
                2.0 * b.stim_emission[i],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn evolve_pure_cavity_decay() {
        let grid = SpatialGrid::uniform(101, 8.0).unwrap();
        let basis = build_harmonic_basis(2, 520.0, 1.7, 545.0, grid).unwrap();
        let rates = RateSet::decoupled(2, 0.0254, 545.0);
        let kappa = 0.2;
        let pump = PumpProfile::uniform(basis.site_count(), 0.0, 0.0, kappa, 1.0).unwrap();
        let mut state = SystemState::zeros(2, basis.site_count());
        state.photon[(0, 0)] = Complex::new(1.0, 0.0);
        state.photon[(1, 1)] = Complex::new(0.5, 0.0);
        let traj = evolve(&state, &rates, &pump, &basis, (0.0, 20.0), 1e-9).unwrap();
        let t_end = *traj.times.last().unwrap();
        let last = traj.last();
        assert_abs_diff_eq!(
            last.photon[(0, 0)].re,
            (-kappa * t_end).exp(),
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(
            last.photon[(1, 1)].re,
            0.5 * (-kappa * t_end).exp(),
            epsilon = 1e-7
        );
    }

    #[test]
    fn evolve_two_level_relaxation() {
        let grid = SpatialGrid::uniform(51, 8.0).unwrap();
        let basis = build_harmonic_basis(1, 520.0, 1.7, 545.0, grid).unwrap();
        let rates = RateSet::decoupled(1, 0.0254, 545.0);
        let (up, down) = (0.3, 0.7);
        let pump = PumpProfile::uniform(basis.site_count(), up, down, 0.0, 1.0).unwrap();
        let state = SystemState::zeros(1, basis.site_count());
        let traj = evolve(&state, &rates, &pump, &basis, (0.0, 40.0), 1e-9).unwrap();
        let expect = |t: f64| up / (up + down) * (1.0 - (-(up + down) * t).exp());
        for (k, &t) in traj.times.iter().enumerate() {
            assert_abs_diff_eq!(traj.states[k].excitation[0], expect(t), epsilon = 1e-7);
        }
    }

    #[test]
    fn evolve_positivity_and_hermiticity_along_trajectory() {
        let grid = SpatialGrid::uniform(201, 8.0).unwrap();
        let basis = build_harmonic_basis(3, 520.0, 1.7, 545.0, grid).unwrap();
        let profile = EmissionProfile::Gaussian {
            peak: 1e-7,
            center: 560.0,
            width: 60.0,
        };
        let rates = RateSet::from_profile(&profile, &basis, 0.0254).unwrap();
        let pump = PumpProfile::gaussian(
            basis.grid().positions(),
            3.0,
            6e-6,
            3e-5,
            0.2,
            1e7,
        )
        .unwrap();
        let state = SystemState::zeros(3, basis.site_count());
        let traj = evolve(&state, &rates, &pump, &basis, (0.0, 2000.0), 1e-8).unwrap();
        for s in &traj.states {
            assert!(s.hermiticity_defect() <= 1e-10);
            for p in 0..3 {
                assert!(s.photon[(p, p)].re >= -1e-9);
            }
        }
    }

    #[test]
    fn steady_state_empty_cavity() {
        let grid = SpatialGrid::uniform(101, 8.0).unwrap();
        let basis = build_harmonic_basis(2, 520.0, 1.7, 545.0, grid).unwrap();
        let rates = flat_rates(&basis, 0.1);
        let pump = PumpProfile::uniform(basis.site_count(), 0.0, 3e-5, 0.2, 1.0).unwrap();
        let init = SystemState::zeros(2, basis.site_count());
        let ss = steady_state(
            &rates,
            &pump,
            &basis,
            &init,
            1e-12,
            &SteadyStateOptions::default(),
        )
        .unwrap();
        assert!(ss.converged());
        for p in 0..2 {
            assert!(ss.state.photon[(p, p)].re.abs() < 1e-12);
        }
        assert!(ss.state.excitation.iter().all(|&f| f.abs() < 1e-12));
    }

    #[test]
    fn steady_state_residual_reevaluates_below_tol() {
        let grid = SpatialGrid::uniform(201, 8.0).unwrap();
        let basis = build_harmonic_basis(3, 520.0, 1.7, 545.0, grid).unwrap();
        let profile = EmissionProfile::Gaussian {
            peak: 1e-7,
            center: 560.0,
            width: 60.0,
        };
        let rates = RateSet::from_profile(&profile, &basis, 0.0254).unwrap();
        let pump = PumpProfile::gaussian(
            basis.grid().positions(),
            3.0,
            6e-6,
            3e-5,
            0.2,
            1e7,
        )
        .unwrap();
        let init = SystemState::zeros(3, basis.site_count());
        let tol = 1e-10;
        let ss = steady_state(
            &rates,
            &pump,
            &basis,
            &init,
            tol,
            &SteadyStateOptions::default(),
        )
        .unwrap();
        let res = residual(&ss.state, &rates, &pump, &basis).unwrap();
        assert!(res <= tol, "re-evaluated residual {res:e} > {tol:e}");
    }
}
