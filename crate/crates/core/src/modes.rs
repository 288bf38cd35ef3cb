//! Cavity mode basis: frequencies, detunings, and mode functions sampled at
//! the molecule sites.
//!
//! Modes are one-dimensional harmonic-oscillator (Hermite-Gaussian) functions
//! of unit oscillator length, evaluated on a weighted quadrature grid. The
//! grid points double as the molecule sites, so every sum over molecules is a
//! weighted sum over grid points. Lengths are in units of the oscillator
//! length `l_0`, mode functions in `l_0^{-1/2}`.

use ndarray::{Array2, Array3};

use crate::{lit, CoreError, Real, Result};

/// Molecule sites `r_i` with quadrature weights `w_i`.
#[derive(Debug, Clone)]
pub struct SpatialGrid<T> {
    positions: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> SpatialGrid<T> {
    /// Build a grid from explicit positions and weights.
    ///
    /// Positions must be strictly increasing and weights strictly positive.
    pub fn new(positions: Vec<T>, weights: Vec<T>) -> Result<Self> {
        if positions.is_empty() {
            return Err(CoreError::InvalidInput("grid needs at least one site".into()));
        }
        if positions.len() != weights.len() {
            return Err(CoreError::Dimension(format!(
                "{} positions vs {} weights",
                positions.len(),
                weights.len()
            )));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidInput(
                "grid positions must be strictly increasing".into(),
            ));
        }
        if weights.iter().any(|&w| w <= T::zero()) {
            return Err(CoreError::InvalidInput(
                "grid weights must be strictly positive".into(),
            ));
        }
        Ok(Self { positions, weights })
    }

    /// Uniform grid of `n` points over `[-half_width, half_width]` with
    /// trapezoidal quadrature weights.
    pub fn uniform(n: usize, half_width: T) -> Result<Self> {
        if n < 2 {
            return Err(CoreError::InvalidInput(
                "uniform grid needs at least two points".into(),
            ));
        }
        if half_width <= T::zero() {
            return Err(CoreError::InvalidInput("grid half-width must be positive".into()));
        }
        let h = (half_width + half_width) / lit::<T>((n - 1) as f64);
        let positions = (0..n)
            .map(|i| -half_width + h * lit::<T>(i as f64))
            .collect();
        let half = h / lit::<T>(2.0);
        let weights = (0..n)
            .map(|i| if i == 0 || i == n - 1 { half } else { h })
            .collect();
        Self::new(positions, weights)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

/// Cavity mode ladder with mode functions sampled on a [`SpatialGrid`].
#[derive(Debug, Clone)]
pub struct ModeBasis<T> {
    omega: Vec<T>,
    detuning: Vec<T>,
    cutoff: T,
    spacing: T,
    zpl: T,
    /// `psi[(p, i)]` = ψ_p(r_i).
    psi: Array2<T>,
    grid: SpatialGrid<T>,
}

impl<T: Real> ModeBasis<T> {
    /// Assemble a basis from pre-sampled mode functions.
    ///
    /// Checks the weighted normalisation of every mode; fails naming the
    /// first mode the grid cannot resolve.
    pub fn from_samples(
        omega: Vec<T>,
        zpl: T,
        psi: Array2<T>,
        grid: SpatialGrid<T>,
    ) -> Result<Self> {
        let m = omega.len();
        if m == 0 {
            return Err(CoreError::InvalidInput("need at least one mode".into()));
        }
        if psi.nrows() != m || psi.ncols() != grid.len() {
            return Err(CoreError::Dimension(format!(
                "mode functions are {}x{}, expected {}x{}",
                psi.nrows(),
                psi.ncols(),
                m,
                grid.len()
            )));
        }
        if omega.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidInput(
                "mode frequencies must be strictly increasing".into(),
            ));
        }
        let tol = T::epsilon().sqrt();
        for p in 0..m {
            let norm: T = (0..grid.len())
                .map(|i| grid.weights()[i] * psi[(p, i)] * psi[(p, i)])
                .sum();
            if (norm - T::one()).abs() > tol {
                return Err(CoreError::GridTooSmall {
                    mode: p,
                    norm: norm.to_f64().unwrap_or(f64::NAN),
                    tol: tol.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let spacing = if m > 1 { omega[1] - omega[0] } else { T::zero() };
        let cutoff = omega[0];
        let detuning = omega.iter().map(|&w| zpl - w).collect();
        Ok(Self {
            omega,
            detuning,
            cutoff,
            spacing,
            zpl,
            psi,
            grid,
        })
    }

    pub fn mode_count(&self) -> usize {
        self.omega.len()
    }

    pub fn site_count(&self) -> usize {
        self.grid.len()
    }

    /// Mode frequencies ω_p (THz).
    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    /// Detunings δ_p = ω_ZPL − ω_p (THz).
    pub fn detuning(&self) -> &[T] {
        &self.detuning
    }

    pub fn cutoff(&self) -> T {
        self.cutoff
    }

    pub fn spacing(&self) -> T {
        self.spacing
    }

    pub fn zpl(&self) -> T {
        self.zpl
    }

    pub fn grid(&self) -> &SpatialGrid<T> {
        &self.grid
    }

    /// ψ_p(r_i).
    #[inline]
    pub fn mode_value(&self, p: usize, i: usize) -> T {
        self.psi[(p, i)]
    }

    /// Overlap Ψ_pq^i = ψ_p(r_i) ψ_q(r_i). Symmetric in (p, q) bit-exactly
    /// because scalar multiplication commutes.
    #[inline]
    pub fn overlap(&self, p: usize, q: usize, i: usize) -> T {
        self.psi[(p, i)] * self.psi[(q, i)]
    }

    /// Φ_i: the M×M overlap matrix at site i.
    pub fn site_overlap_matrix(&self, i: usize) -> Array2<T> {
        let m = self.mode_count();
        Array2::from_shape_fn((m, m), |(p, q)| self.overlap(p, q, i))
    }

    /// Largest deviation of the weighted Gram matrix Σ_i w_i Ψ_pq^i from the
    /// identity.
    pub fn orthonormality_defect(&self) -> T {
        let m = self.mode_count();
        let mut worst = T::zero();
        for p in 0..m {
            for q in 0..m {
                let s: T = (0..self.site_count())
                    .map(|i| self.grid.weights()[i] * self.overlap(p, q, i))
                    .sum();
                let target = if p == q { T::one() } else { T::zero() };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }
}

/// Build an equally spaced ladder of Hermite-Gaussian modes.
///
/// Frequencies are ω_p = ω_0 + p·Δω; detunings δ_p = ω_ZPL − ω_p. Fails if
/// the grid cannot normalise some mode (extent or resolution too small).
pub fn build_harmonic_basis<T: Real>(
    modes: usize,
    cutoff: T,
    spacing: T,
    zpl: T,
    grid: SpatialGrid<T>,
) -> Result<ModeBasis<T>> {
    if modes == 0 {
        return Err(CoreError::InvalidInput("need at least one mode".into()));
    }
    if spacing <= T::zero() {
        return Err(CoreError::InvalidInput("mode spacing must be positive".into()));
    }
    let omega = (0..modes)
        .map(|p| cutoff + spacing * lit::<T>(p as f64))
        .collect();
    let n = grid.len();
    let mut psi = Array2::zeros((modes, n));
    for i in 0..n {
        let col = hermite_gaussian_column(modes, grid.positions()[i]);
        for p in 0..modes {
            psi[(p, i)] = col[p];
        }
    }
    ModeBasis::from_samples(omega, zpl, psi, grid)
}

/// Overlap tensor Ψ with `tensor[(p, q, i)]` = ψ_p(r_i) ψ_q(r_i).
pub fn overlap_tensor<T: Real>(basis: &ModeBasis<T>) -> Array3<T> {
    let m = basis.mode_count();
    let n = basis.site_count();
    Array3::from_shape_fn((m, m, n), |(p, q, i)| basis.overlap(p, q, i))
}

/// ψ_0 .. ψ_{modes-1} at position `x`, by the normalised recurrence
/// ψ_{k}(x) = √(2/k) x ψ_{k-1}(x) − √((k−1)/k) ψ_{k-2}(x),
/// ψ_0(x) = π^{-1/4} exp(−x²/2).
fn hermite_gaussian_column<T: Real>(modes: usize, x: T) -> Vec<T> {
    let mut col = Vec::with_capacity(modes);
    let pi_quarter = T::PI().powf(lit::<T>(-0.25));
    let psi0 = pi_quarter * (-x * x / lit::<T>(2.0)).exp();
    col.push(psi0);
    if modes > 1 {
        col.push(lit::<T>(2.0).sqrt() * x * psi0);
    }
    for k in 2..modes {
        let kf = lit::<T>(k as f64);
        let a = (lit::<T>(2.0) / kf).sqrt();
        let b = ((kf - T::one()) / kf).sqrt();
        let next = a * x * col[k - 1] - b * col[k - 2];
        col.push(next);
    }
    col
}
