//! Exact spectral solution of the von Neumann measurement dynamics.
//!
//! Under `Ĥ_I = g Ô₁ p̂₂` each eigenmode of `Ô₁` drags its own copy of the
//! pointer packet rigidly: `Ψ(x, q₂; t) = Σ c_l φ_l(x) φ(q₂ - g ω_l t)`.
//! The first-order generator produces no dispersion, so evolution is exact.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec};
use crate::physics::HBAR;
use crate::wavefunction::WaveFunction;

/// Coefficients with `|c|²` at or below this are dropped from a [`SpectralState`].
pub const PRUNE_WEIGHT: f64 = 1e-24;

/// Distance, in packet widths, a pointer centre must keep from the grid boundary.
pub const BOUNDARY_SIGMAS: f64 = 5.0;

/// Eigenbasis `φ_l(x) = exp(i k_l x)/√L`, `k_l = 2π l / L`, `l ∈ [-l_max, l_max]`.
///
/// With `L = 2π` these are the `l̂_z` eigenfunctions on the unit ring
/// (`ω_l = ħ l`); a periodic box of length `L` gives the plane-wave basis of
/// `p̂₁` instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularBasis {
    pub l_max: i32,
    pub period: f64,
    /// Largest tolerated `‖φ‖² - Σ|c_l|²` before [`AngularBasis::expand`] fails.
    pub max_residual: f64,
}

impl AngularBasis {
    pub const DEFAULT_L_MAX: i32 = 8;
    pub const DEFAULT_MAX_RESIDUAL: f64 = 1e-6;

    pub fn new(l_max: i32) -> Self {
        Self { l_max, period: 2.0 * PI, max_residual: Self::DEFAULT_MAX_RESIDUAL }
    }

    pub fn periodic_box(l_max: i32, length: f64) -> Self {
        Self { l_max, period: length, max_residual: Self::DEFAULT_MAX_RESIDUAL }
    }

    pub fn modes(&self) -> impl Iterator<Item = i32> {
        -self.l_max..=self.l_max
    }

    pub fn wavenumber(&self, l: i32) -> f64 {
        2.0 * PI * f64::from(l) / self.period
    }

    pub fn eigenvalue(&self, l: i32) -> f64 {
        HBAR * self.wavenumber(l)
    }

    /// Spacing between neighbouring eigenvalues.
    pub fn gap(&self) -> f64 {
        HBAR * 2.0 * PI / self.period
    }

    pub fn eigenfunction(&self, l: i32, x: f64) -> Complex64 {
        Complex64::from_polar(self.period.powf(-0.5), self.wavenumber(l) * x)
    }

    pub fn axis(&self, n: usize) -> Result<Axis> {
        Axis::periodic(0.0, self.period, n)
    }

    pub fn eigenfunction_on(&self, l: i32, axis: Axis) -> WaveFunction {
        WaveFunction::from_fn_1d(axis, |x| self.eigenfunction(l, x))
    }

    fn check_axis(&self, axis: &Axis) -> Result<()> {
        if !axis.is_periodic() || (axis.length() - self.period).abs() > 1e-12 * self.period {
            return Err(Error::InvalidParameter(format!(
                "basis of period {} needs a periodic axis of the same length",
                self.period
            )));
        }
        if axis.n <= 2 * self.l_max as usize {
            return Err(Error::InvalidParameter(format!(
                "{} points cannot resolve modes up to |l| = {}",
                axis.n, self.l_max
            )));
        }
        Ok(())
    }

    /// `c_l = ∫ φ_l* φ dx` by periodic quadrature.
    pub fn expand(&self, phi: &WaveFunction) -> Result<Expansion> {
        if phi.dim() != 1 {
            return Err(Error::InvalidParameter("system wavefunction must be one-dimensional".into()));
        }
        let axis = phi.axes()[0];
        self.check_axis(&axis)?;
        let h = axis.spacing();
        let nodes = axis.nodes();
        let coeffs: Vec<(i32, Complex64)> = self
            .modes()
            .map(|l| {
                let c = nodes
                    .iter()
                    .zip(phi.amplitudes())
                    .map(|(&x, a)| self.eigenfunction(l, x).conj() * a)
                    .sum::<Complex64>()
                    * h;
                (l, c)
            })
            .collect();
        let norm = phi.norm_squared();
        let captured: f64 = coeffs.iter().map(|(_, c)| c.norm_sqr()).sum();
        let residual = norm - captured;
        if residual > self.max_residual {
            return Err(Error::Truncation { residual, limit: self.max_residual });
        }
        Ok(Expansion { coeffs, residual, norm })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub coeffs: Vec<(i32, Complex64)>,
    /// `‖φ‖² - Σ|c_l|²`.
    pub residual: f64,
    pub norm: f64,
}

impl Expansion {
    pub fn coefficient(&self, l: i32) -> Complex64 {
        self.coeffs.iter().find(|(m, _)| *m == l).map_or(Complex64::new(0.0, 0.0), |(_, c)| *c)
    }
}

/// Superposition `Σ c_l φ_l(x)` of the system, evaluated analytically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superposition {
    pub basis: AngularBasis,
    pub coeffs: Vec<(i32, Complex64)>,
}

impl Superposition {
    pub fn new(basis: AngularBasis, coeffs: Vec<(i32, Complex64)>) -> Result<Self> {
        for &(l, _) in &coeffs {
            if l.abs() > basis.l_max {
                return Err(Error::InvalidParameter(format!("mode {l} outside |l| <= {}", basis.l_max)));
            }
        }
        Ok(Self { basis, coeffs })
    }

    pub fn weight(&self) -> f64 {
        self.coeffs.iter().map(|(_, c)| c.norm_sqr()).sum()
    }

    /// `(φ(x), φ'(x))`.
    pub fn eval(&self, x: f64) -> (Complex64, Complex64) {
        let mut v = Complex64::new(0.0, 0.0);
        let mut d = Complex64::new(0.0, 0.0);
        for &(l, c) in &self.coeffs {
            let e = c * self.basis.eigenfunction(l, x);
            v += e;
            d += e * Complex64::new(0.0, self.basis.wavenumber(l));
        }
        (v, d)
    }

    pub fn on_axis(&self, axis: Axis) -> WaveFunction {
        WaveFunction::from_fn_1d(axis, |x| self.eval(x).0)
    }

    /// `Σ ω_l |c_l|²`.
    pub fn mean_eigenvalue(&self) -> f64 {
        self.coeffs.iter().map(|&(l, c)| self.basis.eigenvalue(l) * c.norm_sqr()).sum()
    }
}

/// Gaussian pointer profile with `|φ|²` of standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPacket {
    pub center: f64,
    pub sigma: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl GaussianPacket {
    pub fn new(center: f64, sigma: f64) -> Self {
        Self { center, sigma, momentum: 0.0 }
    }

    /// Amplitude of the packet translated to `center`, and its derivative.
    #[inline]
    pub fn eval_at(&self, center: f64, q: f64) -> (Complex64, Complex64) {
        let u = q - center;
        let s2 = self.sigma * self.sigma;
        let amp = (2.0 * PI * s2).powf(-0.25) * (-u * u / (4.0 * s2)).exp();
        let v = Complex64::from_polar(amp, self.momentum * u);
        (v, v * Complex64::new(-u / (2.0 * s2), self.momentum))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub l: i32,
    pub omega: f64,
    pub coeff: Complex64,
    /// Current pointer centre `μ_l(t) = μ₀ + g ω_l t`.
    pub center: f64,
}

/// Exact representation of the entangled system–pointer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub basis: AngularBasis,
    pub modes: Vec<Mode>,
    /// Base pointer packet; `packet.center` is `μ₀`.
    pub packet: GaussianPacket,
    pub time: f64,
    pub pointer_range: (f64, f64),
}

impl SpectralState {
    /// Product state `φ(x) φ(q₂)` at `t = 0`.
    pub fn new(
        basis: AngularBasis,
        coeffs: &[(i32, Complex64)],
        packet: GaussianPacket,
        pointer_range: (f64, f64),
    ) -> Result<Self> {
        let weight: f64 = coeffs.iter().map(|(_, c)| c.norm_sqr()).sum();
        if (weight - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!("Σ|c_l|² = {weight:.12} is not 1 within 1e-10")));
        }
        if !(packet.sigma > 0.0) {
            return Err(Error::InvalidParameter("packet width must be positive".into()));
        }
        let mut modes = Vec::new();
        for &(l, c) in coeffs {
            if l.abs() > basis.l_max {
                return Err(Error::InvalidParameter(format!("mode {l} outside |l| <= {}", basis.l_max)));
            }
            if c.norm_sqr() > PRUNE_WEIGHT {
                modes.push(Mode { l, omega: basis.eigenvalue(l), coeff: c, center: packet.center });
            }
        }
        let state = Self { basis, modes, packet, time: 0.0, pointer_range };
        state.check_domain()?;
        Ok(state)
    }

    pub fn from_expansion(basis: AngularBasis, expansion: &Expansion, packet: GaussianPacket, pointer_range: (f64, f64)) -> Result<Self> {
        Self::new(basis, &expansion.coeffs, packet, pointer_range)
    }

    pub fn grid_range(grid: &GridSpec) -> (f64, f64) {
        (grid.q2_min, grid.q2_max)
    }

    pub fn check_domain(&self) -> Result<()> {
        let margin = BOUNDARY_SIGMAS * self.packet.sigma;
        let (lo, hi) = self.pointer_range;
        for m in &self.modes {
            if m.center - margin < lo || m.center + margin > hi {
                return Err(Error::DomainOverflow(format!(
                    "pointer centre {:.6} of mode l = {} is within {BOUNDARY_SIGMAS} sigma of the range [{lo}, {hi}]",
                    m.center, m.l
                )));
            }
        }
        Ok(())
    }

    /// Rigid packet translation `μ_l += g ω_l Δt`; coefficients never change.
    pub fn evolve(&self, delta_t: f64, g: f64) -> Result<Self> {
        let mut next = self.clone();
        for m in &mut next.modes {
            m.center += g * m.omega * delta_t;
        }
        next.time += delta_t;
        next.check_domain()?;
        Ok(next)
    }

    pub fn superposition(&self) -> Superposition {
        Superposition { basis: self.basis, coeffs: self.modes.iter().map(|m| (m.l, m.coeff)).collect() }
    }

    pub fn weight(&self) -> f64 {
        self.modes.iter().map(|m| m.coeff.norm_sqr()).sum()
    }

    /// `(Ψ, ∂ₓΨ, ∂_{q₂}Ψ)` at a configuration.
    #[inline]
    pub fn eval(&self, x: f64, q2: f64) -> (Complex64, Complex64, Complex64) {
        self.eval_after(0.0, 0.0, x, q2)
    }

    /// As [`SpectralState::eval`], for the state evolved by `elapsed` under coupling `g`,
    /// without materializing it.
    #[inline]
    pub fn eval_after(&self, elapsed: f64, g: f64, x: f64, q2: f64) -> (Complex64, Complex64, Complex64) {
        let mut v = Complex64::new(0.0, 0.0);
        let mut dx = Complex64::new(0.0, 0.0);
        let mut dq = Complex64::new(0.0, 0.0);
        for m in &self.modes {
            let k = self.basis.wavenumber(m.l);
            let sys = m.coeff * self.basis.eigenfunction(m.l, x);
            let (p, dp) = self.packet.eval_at(m.center + g * m.omega * elapsed, q2);
            let term = sys * p;
            v += term;
            dx += term * Complex64::new(0.0, k);
            dq += sys * dp;
        }
        (v, dx, dq)
    }

    /// Least upper bound of `|Ψ|²` used to scale node thresholds.
    pub fn density_bound(&self) -> f64 {
        let s: f64 = self.modes.iter().map(|m| m.coeff.norm()).sum();
        s * s / (self.basis.period * (2.0 * PI).sqrt() * self.packet.sigma)
    }

    pub fn synthesize(&self, grid: &GridSpec) -> Result<WaveFunction> {
        let ring = self.basis.axis(grid.n_theta)?;
        self.synthesize_on(ring, grid.q2_axis())
    }

    pub fn synthesize_on(&self, system_axis: Axis, pointer_axis: Axis) -> Result<WaveFunction> {
        let range = (pointer_axis.min, pointer_axis.max);
        Self { pointer_range: range, ..self.clone() }.check_domain()?;
        Ok(WaveFunction::from_fn_2d(system_axis, pointer_axis, |x, q| self.eval(x, q).0))
    }

    /// `Σ_{l≠m}` interference part of `|Ψ|²` at a configuration.
    pub fn cross_term(&self, x: f64, q2: f64) -> f64 {
        let (v, _, _) = self.eval(x, q2);
        let diag: f64 = self
            .modes
            .iter()
            .map(|m| (m.coeff * self.basis.eigenfunction(m.l, x) * self.packet.eval_at(m.center, q2).0).norm_sqr())
            .sum();
        v.norm_sqr() - diag
    }

    /// Exact `⟨q₂⟩ = Σ |c_l|² μ_l`.
    pub fn mean_pointer(&self) -> f64 {
        self.modes.iter().map(|m| m.coeff.norm_sqr() * m.center).sum()
    }

    pub fn centers(&self) -> Vec<(i32, f64)> {
        self.modes.iter().map(|m| (m.l, m.center)).collect()
    }
}
