//! Stochastic quantization of `H = ½ (p − a) g (p − a) + V` with a generic
//! action scale: velocity fields, λ sweeps of the modified Schrödinger
//! evolution and the `λ → 0` limit.
//!
//! Nothing here predicts anything for `|λ| ≠ ħ`; the sweep is exploratory
//! and only its analytic fixtures are checked.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::madelung::{gradients, quantum_potential};
use crate::operator::build_metric_hamiltonian;
use crate::propagate::evolve_history;
use crate::system::MetricPotentialSystem;
use crate::wavefunction::{PolarFields, WaveFunction};

/// `v^i` on every grid point, with the points where it is undefined masked.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    pub values: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl VelocityGrid {
    pub fn max_abs_difference(&self, other: &VelocityGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .zip(self.valid.iter().zip(&other.valid))
            .filter(|(_, (a, b))| **a && **b)
            .map(|((u, v), _)| (u[0] - v[0]).abs().max((u[1] - v[1]).abs()))
            .fold(0.0, f64::max)
    }
}

/// `v^i = g^{ij}(∂_jS + (λ/2)∂_j ln Ω − a_j)` at the grid points.
///
/// `S` in `fields` is in action units and stays fixed as `λ` varies;
/// `lambda_ref` is the scale it was decomposed with.
pub fn appendix_velocity_grid(fields: &PolarFields, lambda_ref: f64, sys: &MetricPotentialSystem, lambda_signed: f64) -> Result<VelocityGrid> {
    if fields.axes.len() != sys.dim {
        return Err(Error::InvalidParameter(format!("{}-D system on {}-D fields", sys.dim, fields.axes.len())));
    }
    let grads = gradients(fields, lambda_ref);
    let st = crate::madelung::Stencils::new(&fields.axes);
    let mut values = Vec::with_capacity(st.len());
    for k in 0..st.len() {
        let q = st.point(k);
        let ds = grads.ds[k];
        let dl = grads.dln_omega[k];
        let p = [ds[0] + 0.5 * lambda_signed * dl[0], ds[1] + 0.5 * lambda_signed * dl[1]];
        values.push(if grads.valid[k] { sys.velocity(&q[..sys.dim], &p[..sys.dim]) } else { [0.0; 2] });
    }
    Ok(VelocityGrid { values, valid: grads.valid })
}

/// The velocity at grid point `k`; nodes and boundary rows are reported as [`Error::Node`].
pub fn appendix_velocity(fields: &PolarFields, lambda_ref: f64, sys: &MetricPotentialSystem, k: usize, lambda_signed: f64) -> Result<[f64; 2]> {
    let grid = appendix_velocity_grid(fields, lambda_ref, sys, lambda_signed)?;
    if !grid.valid[k] {
        return Err(Error::Node { density: fields.r[k] * fields.r[k] });
    }
    Ok(grid.values[k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSweep {
    /// Relative offsets `δ` with `λ = ħ(1 + δ)`; must include 0.
    pub deltas: Vec<f64>,
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default = "one")]
    pub record_stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t: f64,
    pub norm: f64,
    /// `⟨q_i⟩` per axis (the second entry is 0 in one dimension).
    pub mean_q: [f64; 2],
    pub mean_q2: [f64; 2],
    pub energy: f64,
    /// `|⟨ψ(0)|ψ(t)⟩|²`.
    pub autocorrelation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub delta: f64,
    pub lambda: f64,
    pub series: Vec<SweepPoint>,
    /// Largest deviation of each observable from the `δ = 0` series.
    pub deviation: SweepDeviation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepDeviation {
    pub norm: f64,
    pub mean_q: f64,
    pub mean_q2: f64,
    pub energy: f64,
    pub autocorrelation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn entry(&self, delta: f64) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.delta == delta)
    }
}

pub fn sweep_point(psi: &WaveFunction, psi0: &WaveFunction, energy: f64, t: f64) -> SweepPoint {
    let norm = psi.norm_squared();
    let mut mean_q = [0.0; 2];
    let mut mean_q2 = [0.0; 2];
    for ax in 0..psi.dim() {
        mean_q[ax] = psi.expectation(|q| q[ax]) / norm;
        mean_q2[ax] = psi.expectation(|q| q[ax] * q[ax]) / norm;
    }
    let overlap = psi0.inner(psi);
    SweepPoint { t, norm, mean_q, mean_q2, energy, autocorrelation: overlap.norm_sqr() / (norm * psi0.norm_squared()) }
}

/// Observables, with the energy `⟨ψ|Ĥ_λ|ψ⟩`, on the snapshots of one run.
fn series(psi0: &WaveFunction, sys: &MetricPotentialSystem, lambda: f64, sweep: &LambdaSweep) -> Result<Vec<SweepPoint>> {
    let op = build_metric_hamiltonian(sys, lambda, psi0.axes())?;
    let history = evolve_history(psi0, &op, sweep.dt, sweep.n_steps, sweep.record_stride)?;
    let stride = sweep.record_stride.max(1);
    history
        .iter()
        .enumerate()
        .map(|(i, psi)| {
            let step = (i * stride).min(sweep.n_steps);
            let e = op.expectation(psi)?;
            Ok(sweep_point(psi, psi0, e, step as f64 * sweep.dt))
        })
        .collect()
}

/// Evolves `psi0` under the modified Schrödinger equation for every `λ` of the sweep.
pub fn run_lambda_sweep(sys: &MetricPotentialSystem, psi0: &WaveFunction, sweep: &LambdaSweep) -> Result<SweepReport> {
    if !sweep.deltas.contains(&0.0) {
        return Err(Error::InvalidParameter("a lambda sweep needs the delta = 0 reference entry".into()));
    }
    if let Some(d) = sweep.deltas.iter().find(|d| !(**d > -1.0)) {
        return Err(Error::InvalidParameter(format!("delta = {d} gives a non-positive lambda")));
    }
    sys.validate()?;
    let runs: Vec<Result<Vec<SweepPoint>>> = sweep
        .deltas
        .par_iter()
        .map(|&d| series(psi0, sys, crate::physics::HBAR * (1.0 + d), sweep))
        .collect();
    let runs: Vec<Vec<SweepPoint>> = runs.into_iter().collect::<Result<_>>()?;
    let reference = &runs[sweep.deltas.iter().position(|d| *d == 0.0).expect("checked above")];
    let entries = sweep
        .deltas
        .iter()
        .zip(&runs)
        .map(|(&delta, s)| {
            let mut dev = SweepDeviation::default();
            for (a, b) in s.iter().zip(reference) {
                dev.norm = dev.norm.max((a.norm - b.norm).abs());
                dev.energy = dev.energy.max((a.energy - b.energy).abs());
                dev.autocorrelation = dev.autocorrelation.max((a.autocorrelation - b.autocorrelation).abs());
                for ax in 0..2 {
                    dev.mean_q = dev.mean_q.max((a.mean_q[ax] - b.mean_q[ax]).abs());
                    dev.mean_q2 = dev.mean_q2.max((a.mean_q2[ax] - b.mean_q2[ax]).abs());
                }
            }
            SweepEntry { delta, lambda: crate::physics::HBAR * (1.0 + delta), series: s.clone(), deviation: dev }
        })
        .collect();
    Ok(SweepReport { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitEntry {
    pub lambda: f64,
    /// Masked L2 norm of the quantum potential.
    pub quantum_norm: f64,
    /// Largest `|v(±λ) − g(∂S − a)|` over valid points.
    pub velocity_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalLimitReport {
    pub entries: Vec<LimitEntry>,
    /// `‖Q(λ_{k+1})‖ / ‖Q(λ_k)‖`.
    pub ratios: Vec<f64>,
    pub excluded: usize,
}

/// Follows the family `R exp(iS/λ)` with `R`, `S` held fixed as `λ` shrinks.
pub fn classical_limit_check(fields: &PolarFields, lambda_ref: f64, sys: &MetricPotentialSystem, lambdas: &[f64]) -> Result<ClassicalLimitReport> {
    let classical = appendix_velocity_grid(fields, lambda_ref, sys, 0.0)?;
    let mut entries = Vec::with_capacity(lambdas.len());
    let mut excluded = 0;
    for &lambda in lambdas {
        let q = quantum_potential(fields, sys, lambda)?;
        excluded = excluded.max(q.excluded());
        let mut dev: f64 = 0.0;
        for sign in [1.0, -1.0] {
            let v = appendix_velocity_grid(fields, lambda_ref, sys, sign * lambda)?;
            dev = dev.max(v.max_abs_difference(&classical));
        }
        entries.push(LimitEntry { lambda, quantum_norm: q.l2(), velocity_deviation: dev });
    }
    let ratios = entries.windows(2).map(|w| w[1].quantum_norm / w[0].quantum_norm).collect();
    Ok(ClassicalLimitReport { entries, ratios, excluded })
}

/// Normalized `R exp(iS/λ_ref)` from smooth closures.
pub fn polar_fixture(
    axes: Vec<crate::grid::Axis>,
    r: impl Fn(&[f64]) -> f64,
    s: impl Fn(&[f64]) -> f64,
    lambda_ref: f64,
) -> Result<WaveFunction> {
    let st = crate::madelung::Stencils::new(&axes);
    let amps = (0..st.len())
        .map(|k| {
            let q = st.point(k);
            Complex64::from_polar(r(&q[..axes.len()]), s(&q[..axes.len()]) / lambda_ref)
        })
        .collect();
    WaveFunction::new(axes, amps)?.normalize()
}
