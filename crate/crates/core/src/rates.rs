//! Per-mode emission and absorption rates.
//!
//! Emission E_p comes from a parametric profile or a tabulated spectrum;
//! absorption is then fixed by the Kennard-Stepanov relation
//! A_p = E_p exp(−β δ_p), which is what thermalises the photon gas at
//! inverse temperature β. Rates are angular THz, β is in (rad/ps)⁻¹.

use std::fs;
use std::path::Path;

use crate::modes::ModeBasis;
use crate::{lit, CoreError, Real, Result};

/// ħ/k_B in ps·K. Dividing by a temperature in kelvin gives β in (rad/ps)⁻¹.
pub const HBAR_OVER_KB_PS_K: f64 = 7.638232577577646;

/// Inverse temperature β = ħ/(k_B T) in (rad/ps)⁻¹ for `kelvin` > 0.
pub fn inverse_temperature<T: Real>(kelvin: T) -> Result<T> {
    if kelvin <= T::zero() {
        return Err(CoreError::InvalidInput("temperature must be positive".into()));
    }
    Ok(lit::<T>(HBAR_OVER_KB_PS_K) / kelvin)
}

/// Tabulated (frequency, rate) pairs, strictly increasing in frequency.
#[derive(Debug, Clone)]
pub struct SpectrumTable<T> {
    points: Vec<(T, T)>,
}

impl<T: Real> SpectrumTable<T> {
    pub fn new(points: Vec<(T, T)>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::SpectrumTable("table is empty".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(CoreError::SpectrumTable(
                "frequencies must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// Parse the two-column text format: `frequency_THz rate_THz` per line,
    /// whitespace separated, lines starting with `#` ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let freq = fields.next();
            let rate = fields.next();
            let (Some(freq), Some(rate)) = (freq, rate) else {
                return Err(CoreError::SpectrumTable(format!(
                    "line {}: expected `frequency_THz rate_THz`",
                    lineno + 1
                )));
            };
            let parse = |s: &str| -> Result<T> {
                s.parse::<f64>()
                    .ok()
                    .and_then(T::from_f64)
                    .ok_or_else(|| {
                        CoreError::SpectrumTable(format!("line {}: bad number {s:?}", lineno + 1))
                    })
            };
            points.push((parse(freq)?, parse(rate)?));
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CoreError::SpectrumTable(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Linear interpolation; queries outside the table clamp to the nearest
    /// endpoint and emit a warning.
    pub fn evaluate(&self, omega: T) -> T {
        let pts = &self.points;
        if omega < pts[0].0 {
            log::warn!(
                "spectrum table queried below its range; clamping to the first entry"
            );
            return pts[0].1;
        }
        if omega > pts[pts.len() - 1].0 {
            log::warn!(
                "spectrum table queried above its range; clamping to the last entry"
            );
            return pts[pts.len() - 1].1;
        }
        let j = pts.partition_point(|&(w, _)| w <= omega).min(pts.len() - 1);
        if j == 0 {
            return pts[0].1;
        }
        let (w0, r0) = pts[j - 1];
        let (w1, r1) = pts[j];
        let t = (omega - w0) / (w1 - w0);
        r0 + (r1 - r0) * t
    }
}

/// Spectral shape of the molecular emission rate E(ω).
#[derive(Debug, Clone)]
pub enum EmissionProfile<T> {
    /// E(ω) = rate, independent of frequency.
    Flat { rate: T },
    /// E(ω) = peak · exp(−(ω − center)² / (2 width²)).
    Gaussian { peak: T, center: T, width: T },
    /// Linear interpolation of a tabulated spectrum.
    Table(SpectrumTable<T>),
}

impl<T: Real> EmissionProfile<T> {
    pub fn evaluate(&self, omega: T) -> T {
        match self {
            Self::Flat { rate } => *rate,
            Self::Gaussian { peak, center, width } => {
                let d = (omega - *center) / *width;
                *peak * (-d * d / lit::<T>(2.0)).exp()
            }
            Self::Table(table) => table.evaluate(omega),
        }
    }
}

/// Per-mode absorption and emission rates with their thermal parameters.
///
/// The Kennard-Stepanov identity A_p = E_p exp(−β δ_p) holds exactly by
/// construction: absorption is only ever computed from emission.
#[derive(Debug, Clone)]
pub struct RateSet<T> {
    absorption: Vec<T>,
    emission: Vec<T>,
    beta: T,
    zpl: T,
}

impl<T: Real> RateSet<T> {
    /// Evaluate `profile` at every mode frequency and close the set with the
    /// Kennard-Stepanov relation.
    pub fn from_profile(
        profile: &EmissionProfile<T>,
        basis: &ModeBasis<T>,
        beta: T,
    ) -> Result<Self> {
        let emission: Vec<T> = basis.omega().iter().map(|&w| profile.evaluate(w)).collect();
        let absorption = kennard_stepanov_absorption(&emission, basis.detuning(), beta)?;
        Ok(Self {
            absorption,
            emission,
            beta,
            zpl: basis.zpl(),
        })
    }

    /// Zero coupling to the medium (bare cavity). Skips the positivity check;
    /// every other constructor requires strictly positive rates.
    pub fn decoupled(modes: usize, beta: T, zpl: T) -> Self {
        Self {
            absorption: vec![T::zero(); modes],
            emission: vec![T::zero(); modes],
            beta,
            zpl,
        }
    }

    pub fn len(&self) -> usize {
        self.emission.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emission.is_empty()
    }

    /// A_p (THz).
    pub fn absorption(&self) -> &[T] {
        &self.absorption
    }

    /// E_p (THz).
    pub fn emission(&self) -> &[T] {
        &self.emission
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn zpl(&self) -> T {
        self.zpl
    }
}

/// A_p = E_p exp(−β δ_p), elementwise.
pub fn kennard_stepanov_absorption<T: Real>(
    emission: &[T],
    detuning: &[T],
    beta: T,
) -> Result<Vec<T>> {
    if emission.len() != detuning.len() {
        return Err(CoreError::Dimension(format!(
            "{} emission rates vs {} detunings",
            emission.len(),
            detuning.len()
        )));
    }
    if let Some(&bad) = emission.iter().find(|&&e| e <= T::zero()) {
        return Err(CoreError::InvalidInput(format!(
            "emission rates must be strictly positive, got {bad}"
        )));
    }
    Ok(emission
        .iter()
        .zip(detuning)
        .map(|(&e, &d)| e * (-beta * d).exp())
        .collect())
}
