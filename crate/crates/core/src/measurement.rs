//! The von Neumann measurement pipeline: product preparation, exact entangling
//! evolution, trajectory through the pointer packets and outcome inference.
//!
//! The joint wavefunction never collapses. The only step that replaces the
//! system state is [`repeat_measurement`], which re-prepares the effective
//! eigenfunction before a second measurement.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Axis;
use crate::physics::{PhysicalConfig, HBAR};
use crate::rng::{derive_seed, stream};
use crate::spectral::{AngularBasis, GaussianPacket, SpectralState, Superposition, BOUNDARY_SIGMAS};
use crate::stats::{chi_square, mean_and_se, ChiSquareTest};
use crate::stochastics::{sample_sign_path, StochasticParams};
use crate::trajectory::{
    equivariance_report, integrate_trajectory, Coupling, EnsembleSpec, EquivarianceReport, Marginal, SpectralSource,
    Trajectory, TrajectoryRun, VelocityField, VelocitySource,
};
use crate::wavefunction::DEFAULT_NODE_EPS;

/// Everything a measurement event needs besides the prepared state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPipeline {
    pub config: PhysicalConfig,
    pub ensemble: EnsembleSpec,
    pub stochastic: StochasticParams,
}

impl MeasurementPipeline {
    pub fn new(config: PhysicalConfig) -> Self {
        let stochastic = StochasticParams { lambda_mag: config.lambda_mag, ..StochasticParams::default() };
        Self { config, ensemble: EnsembleSpec::default(), stochastic }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.stochastic.validate()?;
        self.ensemble.validate(&self.stochastic)?;
        // the spectral solution carries ω_l = ħ l, so the guiding phase must use the same scale
        if (self.config.lambda_mag - HBAR).abs() > 1e-12 {
            return Err(Error::Configuration {
                invariant: "measurement action scale",
                detail: format!("the pointer dynamics is exact only for |λ| = ħ, got {}", self.config.lambda_mag),
            });
        }
        self.ensemble.steps_for(self.config.t_m)?;
        Ok(())
    }
}

/// Pointer interval that keeps every candidate packet clear of the boundary up to `t_M`.
pub fn pointer_range(basis: &AngularBasis, packet: &GaussianPacket, config: &PhysicalConfig) -> (f64, f64) {
    let reach = |l: i32| config.g * basis.eigenvalue(l) * config.t_m;
    let (a, b) = (reach(-basis.l_max), reach(basis.l_max));
    let pad = (BOUNDARY_SIGMAS + config.sep_factor) * packet.sigma;
    (packet.center + a.min(b).min(0.0) - pad, packet.center + a.max(b).max(0.0) + pad)
}

/// Product state `φ(θ) φ(q₂)` at `t = 0`, checked against the separation invariant.
pub fn prepare_initial_state(
    basis: AngularBasis,
    coeffs: &[(i32, Complex64)],
    packet: GaussianPacket,
    config: &PhysicalConfig,
) -> Result<SpectralState> {
    config.validate()?;
    if (packet.sigma - config.sigma).abs() > 1e-12 * config.sigma {
        return Err(Error::InvalidParameter(format!(
            "packet width {} differs from the configured sigma {}",
            packet.sigma, config.sigma
        )));
    }
    config.check_separation(basis.gap())?;
    SpectralState::new(basis, coeffs, packet, pointer_range(&basis, &packet, config))
}

/// One inferred measurement result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub trial: u64,
    pub trial_seed: u64,
    /// Eigen-index whose packet window holds the final pointer position.
    pub outcome: Option<i32>,
    pub omega: Option<f64>,
    pub theta_initial: f64,
    pub q2_initial: f64,
    pub theta_final: f64,
    pub q2_final: f64,
    /// Signed λ in force at `t = 0`.
    pub lambda_initial: f64,
    pub ambiguous: bool,
    pub overflow: bool,
    pub node_events: usize,
    pub stalled_steps: usize,
}

impl MeasurementRecord {
    pub fn is_valid(&self) -> bool {
        self.outcome.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inference {
    Outcome(i32),
    Ambiguous,
}

/// Support-membership rule: the outcome is `l` when `q₂` lies within `kσ/2`
/// of `μ₀ + g ω_l t_M` and of no other candidate centre.
pub fn infer_outcome(basis: &AngularBasis, config: &PhysicalConfig, mu0: f64, q2: f64) -> Inference {
    let half = config.window_half_width();
    let mut hits = basis
        .modes()
        .filter(|&l| (q2 - (mu0 + config.g * basis.eigenvalue(l) * config.t_m)).abs() < half);
    match (hits.next(), hits.next()) {
        (Some(l), None) => Inference::Outcome(l),
        _ => Inference::Ambiguous,
    }
}

/// Rejection sample of `θ ~ |φ(θ)|²` using the bound `(Σ|c|)²/L`.
pub fn sample_system<R: Rng + ?Sized>(phi: &Superposition, rng: &mut R) -> f64 {
    let l = phi.basis.period;
    let s: f64 = phi.coeffs.iter().map(|(_, c)| c.norm()).sum();
    let bound = s * s / l;
    loop {
        let x = rng.random::<f64>() * l;
        if rng.random::<f64>() * bound <= phi.eval(x).0.norm_sqr() {
            return x;
        }
    }
}

/// How the initial configuration is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitialLaw {
    /// `|Ψ(0)|²`.
    #[default]
    Born,
    /// Uniform `θ`, Born-distributed `q₂` (a deliberately biased ensemble).
    UniformTheta,
}

fn source_for(state0: &SpectralState, pipeline: &MeasurementPipeline) -> Result<VelocityField<SpectralSource>> {
    let g = pipeline.config.g;
    Ok(VelocityField::new(SpectralSource::new(state0.clone(), g)?, Coupling::Measurement { g }, pipeline.config.lambda_mag))
}

fn event(
    field: &VelocityField<SpectralSource>,
    pipeline: &MeasurementPipeline,
    law: InitialLaw,
    seed: u64,
    trial: u64,
    record_stride: usize,
) -> Result<(MeasurementRecord, Trajectory)> {
    let state0 = &field.source.state;
    let cfg = &pipeline.config;
    let mut rng = stream(seed, trial);
    let path = match pipeline.ensemble.velocity {
        VelocitySource::Actual => {
            let n = (cfg.t_m / pipeline.stochastic.dt).ceil() as usize + 1;
            Some(sample_sign_path(&pipeline.stochastic, n, &mut rng)?)
        }
        VelocitySource::Effective => None,
    };
    let lambda_initial = match &path {
        Some(p) => p.lambda(0),
        None => {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * cfg.lambda_mag
        }
    };
    let theta0 = match law {
        InitialLaw::Born => sample_system(&state0.superposition(), &mut rng),
        InitialLaw::UniformTheta => rng.random::<f64>() * state0.basis.period,
    };
    let normal = Normal::new(state0.packet.center, state0.packet.sigma)
        .map_err(|e| Error::InvalidParameter(format!("pointer packet: {e}")))?;
    let q20 = normal.sample(&mut rng);
    let run = TrajectoryRun {
        spec: &pipeline.ensemble,
        sign_path: path.as_ref(),
        duration: cfg.t_m,
        record_stride,
        seed,
        trial,
    };
    let traj = integrate_trajectory([theta0, q20], field, &run)?;
    let [theta_f, q2_f] = traj.end();
    let overflow = traj.overflow.is_some();
    let outcome = if overflow {
        None
    } else {
        match infer_outcome(&state0.basis, cfg, state0.packet.center, q2_f) {
            Inference::Outcome(l) => Some(l),
            Inference::Ambiguous => None,
        }
    };
    let record = MeasurementRecord {
        trial,
        trial_seed: seed,
        outcome,
        omega: outcome.map(|l| state0.basis.eigenvalue(l)),
        theta_initial: theta0,
        q2_initial: q20,
        theta_final: theta_f,
        q2_final: q2_f,
        lambda_initial,
        ambiguous: !overflow && outcome.is_none(),
        overflow,
        node_events: traj.node_events,
        stalled_steps: traj.stalled_steps,
    };
    Ok((record, traj))
}

/// Samples `(θ, q₂)` from `|Ψ(0)|²` and follows it to `t_M` while `Ψ` evolves exactly.
pub fn run_single_event(state0: &SpectralState, pipeline: &MeasurementPipeline, seed: u64, trial: u64) -> Result<MeasurementRecord> {
    pipeline.validate()?;
    event(&source_for(state0, pipeline)?, pipeline, InitialLaw::Born, seed, trial, usize::MAX).map(|(r, _)| r)
}

/// Runs trials `0..n` in parallel; the lowest failing trial index is reported.
pub fn run_events(
    state0: &SpectralState,
    pipeline: &MeasurementPipeline,
    law: InitialLaw,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<MeasurementRecord>> {
    Ok(run_trajectories(state0, pipeline, law, n_trials, seed, usize::MAX)?.into_iter().map(|(r, _)| r).collect())
}

/// As [`run_events`], keeping each path sampled every `record_stride` steps.
pub fn run_trajectories(
    state0: &SpectralState,
    pipeline: &MeasurementPipeline,
    law: InitialLaw,
    n_trials: usize,
    seed: u64,
    record_stride: usize,
) -> Result<Vec<(MeasurementRecord, Trajectory)>> {
    pipeline.validate()?;
    let field = source_for(state0, pipeline)?;
    let results: Vec<Result<(MeasurementRecord, Trajectory)>> = (0..n_trials as u64)
        .into_par_iter()
        .map(|t| event(&field, pipeline, law, seed, t, record_stride))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(t, r)| r.map_err(|e| Error::Trial { trial: t as u64, seed, source: Box::new(e) }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStat {
    pub l: i32,
    pub omega: f64,
    pub count: u64,
    pub frequency: f64,
    /// Born weight `|c_l|²`.
    pub reference: f64,
    /// Binomial standard error `√(p(1−p)/n)` at the reference weight.
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_trials: usize,
    pub n_valid: usize,
    pub ambiguous: usize,
    pub overflow: usize,
    pub ambiguous_rate: f64,
    pub outcomes: Vec<OutcomeStat>,
    pub chi2: ChiSquareTest,
    pub mean_omega: f64,
    pub mean_omega_se: f64,
    pub node_events: usize,
    pub stalled_steps: usize,
}

impl EnsembleStats {
    pub fn outcome(&self, l: i32) -> Option<&OutcomeStat> {
        self.outcomes.iter().find(|o| o.l == l)
    }

    /// Largest `|f − p|` in units of the binomial standard error.
    pub fn max_z(&self) -> f64 {
        self.outcomes
            .iter()
            .map(|o| {
                let d = (o.frequency - o.reference).abs();
                if o.standard_error > 0.0 {
                    d / o.standard_error
                } else if d == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

pub fn summarize(records: &[MeasurementRecord], state0: &SpectralState) -> EnsembleStats {
    let basis = &state0.basis;
    let modes: Vec<i32> = basis.modes().collect();
    let reference: Vec<f64> = modes
        .iter()
        .map(|&l| state0.modes.iter().filter(|m| m.l == l).map(|m| m.coeff.norm_sqr()).sum::<f64>())
        .collect();
    let total: f64 = reference.iter().sum();
    let reference: Vec<f64> = reference.iter().map(|p| p / total).collect();
    let mut counts = vec![0u64; modes.len()];
    for r in records {
        if let Some(l) = r.outcome {
            counts[(l + basis.l_max) as usize] += 1;
        }
    }
    let n_valid = counts.iter().sum::<u64>() as usize;
    let ambiguous = records.iter().filter(|r| r.ambiguous).count();
    let overflow = records.iter().filter(|r| r.overflow).count();
    let nv = n_valid.max(1) as f64;
    let outcomes = modes
        .iter()
        .zip(&counts)
        .zip(&reference)
        .filter(|((_, &c), &p)| c > 0 || p > 0.0)
        .map(|((&l, &c), &p)| OutcomeStat {
            l,
            omega: basis.eigenvalue(l),
            count: c,
            frequency: c as f64 / nv,
            reference: p,
            standard_error: (p * (1.0 - p) / nv).sqrt(),
        })
        .collect();
    let omegas: Vec<f64> = records.iter().filter_map(|r| r.omega).collect();
    let (mean_omega, mean_omega_se) = mean_and_se(&omegas);
    EnsembleStats {
        n_trials: records.len(),
        n_valid,
        ambiguous,
        overflow,
        ambiguous_rate: ambiguous as f64 / records.len().max(1) as f64,
        outcomes,
        chi2: chi_square(&counts, &reference),
        mean_omega,
        mean_omega_se,
        node_events: records.iter().map(|r| r.node_events).sum(),
        stalled_steps: records.iter().map(|r| r.stalled_steps).sum(),
    }
}

pub fn run_ensemble(
    state0: &SpectralState,
    pipeline: &MeasurementPipeline,
    n_trials: usize,
    seed: u64,
) -> Result<(Vec<MeasurementRecord>, EnsembleStats)> {
    let records = run_events(state0, pipeline, InitialLaw::Born, n_trials, seed)?;
    let stats = summarize(&records, state0);
    Ok((records, stats))
}

/// Actual pre-measurement value `l_z = ∂_θS + (λ/2) ∂_θΩ/Ω` at one configuration.
pub fn actual_observable_prior(phi: &Superposition, theta: f64, lambda_signed: f64, lambda_mag: f64) -> Result<f64> {
    let (v, d) = phi.eval(theta);
    let rho = v.norm_sqr();
    let s: f64 = phi.coeffs.iter().map(|(_, c)| c.norm()).sum();
    if rho < DEFAULT_NODE_EPS * s * s / phi.basis.period {
        return Err(Error::Node { density: rho });
    }
    let z = v.conj() * d;
    Ok(lambda_mag * z.im / rho + lambda_signed * z.re / rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorAverage {
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    /// `⟨φ|l̂_z|φ⟩ = Σ ω_l |c_l|²`.
    pub analytic: f64,
}

/// Monte Carlo mean of the actual value over `θ ~ |φ|²` and equiprobable λ signs.
pub fn average_prior<R: Rng + ?Sized>(phi: &Superposition, lambda_mag: f64, n_mc: usize, rng: &mut R) -> Result<PriorAverage> {
    let mut xs = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let theta = sample_system(phi, rng);
        xs.push(actual_observable_prior(phi, theta, sign * lambda_mag, lambda_mag)?);
    }
    let (mean, std_error) = mean_and_se(&xs);
    Ok(PriorAverage { n: n_mc, mean, std_error, analytic: phi.mean_eigenvalue() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivePost {
    pub l: i32,
    pub values: Vec<f64>,
    /// Largest `|∂_θS^l − ω_l|` over the sample points.
    pub max_deviation: f64,
}

/// `∂_θS` of the effective wavefunction `φ_l` at the given angles.
pub fn effective_post(basis: &AngularBasis, l: i32, thetas: &[f64], lambda_mag: f64) -> EffectivePost {
    let k = basis.wavenumber(l);
    let omega = basis.eigenvalue(l);
    let values: Vec<f64> = thetas
        .iter()
        .map(|&x| {
            let v = basis.eigenfunction(l, x);
            let d = v * Complex64::new(0.0, k);
            lambda_mag * (v.conj() * d).im / v.norm_sqr()
        })
        .collect();
    let max_deviation = values.iter().map(|v| (v - omega).abs()).fold(0.0, f64::max);
    EffectivePost { l, values, max_deviation }
}

/// Effective collapse followed by a second measurement with a fresh pointer.
pub fn repeat_measurement(
    record: &MeasurementRecord,
    state0: &SpectralState,
    pipeline: &MeasurementPipeline,
    seed: u64,
) -> Result<MeasurementRecord> {
    let l = record
        .outcome
        .ok_or_else(|| Error::InvalidParameter(format!("trial {} has no outcome to repeat", record.trial)))?;
    let collapsed = prepare_initial_state(state0.basis, &[(l, Complex64::new(1.0, 0.0))], state0.packet, &pipeline.config)?;
    run_single_event(&collapsed, pipeline, derive_seed(seed, 0x5245_5045_4154), record.trial)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub n_pairs: usize,
    pub agreements: usize,
    pub agreement_rate: f64,
    /// Set for the ablated protocol, which re-measures the original superposition.
    pub ablated: bool,
}

/// Repeats each valid first outcome; `collapse = false` skips the effective-collapse step.
pub fn repeatability(
    state0: &SpectralState,
    pipeline: &MeasurementPipeline,
    n_trials: usize,
    seed: u64,
    collapse: bool,
) -> Result<(Vec<(MeasurementRecord, MeasurementRecord)>, RepeatReport)> {
    let first = run_events(state0, pipeline, InitialLaw::Born, n_trials, seed)?;
    let resampled = derive_seed(seed, 0x5245_5045_4154);
    let pairs: Vec<Result<(MeasurementRecord, MeasurementRecord)>> = first
        .into_par_iter()
        .filter(MeasurementRecord::is_valid)
        .map(|r| {
            let second = if collapse {
                repeat_measurement(&r, state0, pipeline, seed)
            } else {
                run_single_event(state0, pipeline, resampled, r.trial)
            };
            second.map(|s| (r, s))
        })
        .collect();
    let pairs: Vec<_> = pairs.into_iter().collect::<Result<_>>()?;
    let agreements = pairs.iter().filter(|(a, b)| a.outcome == b.outcome).count();
    let report = RepeatReport {
        n_pairs: pairs.len(),
        agreements,
        agreement_rate: agreements as f64 / pairs.len().max(1) as f64,
        ablated: !collapse,
    };
    Ok((pairs, report))
}

/// Fraction of valid trials whose recorded `ω` differs from the actual value at `(θ₀, λ₀)`.
pub fn non_revelation_fraction(records: &[MeasurementRecord], phi: &Superposition, lambda_mag: f64, tol: f64) -> Result<f64> {
    let mut n = 0usize;
    let mut differ = 0usize;
    for r in records {
        let Some(omega) = r.omega else { continue };
        n += 1;
        let lz = actual_observable_prior(phi, r.theta_initial, r.lambda_initial, lambda_mag)?;
        if (omega - lz).abs() > tol {
            differ += 1;
        }
    }
    Ok(differ as f64 / n.max(1) as f64)
}

/// Exact marginals of `|Ψ(t)|²`: the pointer marginal is `Σ|c_l|² |φ(q₂ − μ_l)|²`,
/// the system marginal keeps the packet-overlap interference.
pub fn exact_marginals(state: &SpectralState, n_theta: usize, n_q2: usize) -> Result<[Marginal; 2]> {
    let ring = state.basis.axis(n_theta)?;
    let (lo, hi) = state.pointer_range;
    let line = Axis::line(lo, hi, n_q2)?;
    let s2 = state.packet.sigma * state.packet.sigma;
    let theta: Vec<f64> = ring
        .nodes()
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for a in &state.modes {
                let fa = a.coeff * state.basis.eigenfunction(a.l, x);
                for b in &state.modes {
                    let fb = b.coeff * state.basis.eigenfunction(b.l, x);
                    let d = a.center - b.center;
                    acc += (fa * fb.conj()).re * (-d * d / (8.0 * s2)).exp();
                }
            }
            acc
        })
        .collect();
    let q2: Vec<f64> = line
        .nodes()
        .iter()
        .map(|&q| state.modes.iter().map(|m| m.coeff.norm_sqr() * state.packet.eval_at(m.center, q).0.norm_sqr()).sum())
        .collect();
    Ok([Marginal::from_values(ring, &theta)?, Marginal::from_values(line, &q2)?])
}

/// Marginal fit of the ensemble at `t_M` against `|Ψ(t_M)|²`.
pub fn equivariance_check(
    state0: &SpectralState,
    pipeline: &MeasurementPipeline,
    law: InitialLaw,
    n_trials: usize,
    seed: u64,
    n_bins: usize,
) -> Result<EquivarianceReport> {
    let records = run_events(state0, pipeline, law, n_trials, seed)?;
    let finals: Vec<[f64; 2]> = records.iter().filter(|r| !r.overflow).map(|r| [r.theta_final, r.q2_final]).collect();
    let at_tm = state0.evolve(pipeline.config.t_m, pipeline.config.g)?;
    let marginals = exact_marginals(&at_tm, 1024, 16_384)?;
    Ok(equivariance_report(&finals, &marginals, n_bins))
}
