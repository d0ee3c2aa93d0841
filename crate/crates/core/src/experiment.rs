//! Batch experiments: TOML configuration, seeded execution and artifacts.
//!
//! Every result file is produced in memory, then written by a single owner
//! and listed in `manifest.json` with its SHA-256. Wall-clock timing goes to
//! `timing.json`, which is the one file outside the determinism contract.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::appendix::{appendix_velocity_grid, classical_limit_check, run_lambda_sweep, LambdaSweep};
use crate::error::{Error, Result};
use crate::grid::Axis;
use crate::io::{write_json, write_jsonl, write_trajectories_csv, Histogram};
use crate::madelung::{verify_hjm_residual, Stencils};
use crate::measurement::{
    average_prior, exact_marginals, prepare_initial_state, repeatability, run_trajectories, summarize, InitialLaw,
    MeasurementPipeline,
};
use crate::operator::{build_metric_hamiltonian, build_naive_hamiltonian};
use crate::physics::PhysicalConfig;
use crate::propagate::evolve_history;
use crate::rng::{derive_seed, stream};
use crate::spectral::{AngularBasis, GaussianPacket, SpectralState};
use crate::stochastics::{deviation_statistics, sample_sign_path, separability_trials, StochasticParams};
use crate::system::MetricPotentialSystem;
use crate::trajectory::{equivariance_report, EnsembleSpec};
use crate::wavefunction::{polar_decompose, WaveFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Born,
    Trajectories,
    PriorAverage,
    Repeatability,
    Appendix,
    LambdaSweep,
    StochasticCheck,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Born => "born",
            Self::Trajectories => "trajectories",
            Self::PriorAverage => "prior-average",
            Self::Repeatability => "repeatability",
            Self::Appendix => "appendix",
            Self::LambdaSweep => "lambda-sweep",
            Self::StochasticCheck => "stochastic-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub l: i32,
    /// `|c_l|²`.
    pub weight: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    /// Basis cutoff; defaults to one beyond the largest prepared `|l|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_max: Option<i32>,
    pub modes: Vec<ModeSpec>,
    #[serde(default)]
    pub pointer_center: f64,
    #[serde(default)]
    pub pointer_momentum: f64,
}

impl StateConfig {
    pub fn coefficients(&self) -> Vec<(i32, Complex64)> {
        self.modes.iter().map(|m| (m.l, Complex64::from_polar(m.weight.max(0.0).sqrt(), m.phase))).collect()
    }

    pub fn basis(&self) -> AngularBasis {
        let top = self.modes.iter().map(|m| m.l.abs()).max().unwrap_or(0);
        AngularBasis::new(self.l_max.unwrap_or(top + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryOptions {
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    /// Trials written to the trajectory table.
    #[serde(default = "default_export")]
    pub export_trials: usize,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub initial: InitialLaw,
}

fn default_stride() -> usize {
    10
}
fn default_export() -> usize {
    100
}
fn default_bins() -> usize {
    50
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self { record_stride: 10, export_trials: 100, n_bins: 50, initial: InitialLaw::Born }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorOptions {
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
}

fn default_n_mc() -> usize {
    100_000
}

impl Default for PriorOptions {
    fn default() -> Self {
        Self { n_mc: default_n_mc() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepeatOptions {
    /// Also run the protocol without the effective-collapse step.
    #[serde(default = "yes")]
    pub ablation: bool,
}

impl Default for RepeatOptions {
    fn default() -> Self {
        Self { ablation: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticCheckOptions {
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_pairs")]
    pub n_separability: usize,
    /// Length of the sampled sign path.
    #[serde(default = "default_path")]
    pub path_steps: usize,
}

fn default_draws() -> usize {
    1_000_000
}
fn default_pairs() -> usize {
    1000
}
fn default_path() -> usize {
    100_000
}

impl Default for StochasticCheckOptions {
    fn default() -> Self {
        Self { n_draws: default_draws(), n_separability: default_pairs(), path_steps: default_path() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub n: usize,
    #[serde(default)]
    pub periodic: bool,
}

impl AxisConfig {
    pub fn axis(&self) -> Result<Axis> {
        if self.periodic {
            Axis::periodic(self.min, self.max - self.min, self.n)
        } else {
            Axis::line(self.min, self.max, self.n)
        }
    }
}

/// Gaussian initial wavefunction, one entry per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketConfig {
    pub center: Vec<f64>,
    /// Standard deviation of `|ψ|²` along each axis.
    pub width: Vec<f64>,
    #[serde(default)]
    pub momentum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendixConfig {
    pub system: MetricPotentialSystem,
    pub axes: Vec<AxisConfig>,
    pub initial: PacketConfig,
    #[serde(default = "one_f")]
    pub lambda_mag: f64,
    #[serde(default = "default_app_dt")]
    pub dt: f64,
    #[serde(default = "default_app_steps")]
    pub n_steps: usize,
    #[serde(default = "default_limit")]
    pub limit_lambdas: Vec<f64>,
}

fn one_f() -> f64 {
    1.0
}
fn default_app_dt() -> f64 {
    1e-3
}
fn default_app_steps() -> usize {
    200
}
fn default_limit() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 1e-3]
}

impl AppendixConfig {
    pub fn axes(&self) -> Result<Vec<Axis>> {
        self.axes.iter().map(AxisConfig::axis).collect()
    }

    /// `Π_i (2π w_i²)^{-1/4} exp(−(q_i − c_i)²/(4w_i²) + i k_i q_i)` normalized on the grid.
    pub fn initial_state(&self) -> Result<WaveFunction> {
        let axes = self.axes()?;
        let d = axes.len();
        let p = &self.initial;
        if p.center.len() != d || p.width.len() != d || !(p.momentum.is_empty() || p.momentum.len() == d) {
            return Err(Error::InvalidParameter(format!("initial packet needs {d} entries per field")));
        }
        let st = Stencils::new(&axes);
        let amps = (0..st.len())
            .map(|k| {
                let q = st.point(k);
                let mut z = Complex64::new(1.0, 0.0);
                for i in 0..d {
                    let u = q[i] - p.center[i];
                    let k_i = p.momentum.get(i).copied().unwrap_or(0.0);
                    z *= Complex64::from_polar((-u * u / (4.0 * p.width[i] * p.width[i])).exp(), k_i * q[i] / self.lambda_mag);
                }
                z
            })
            .collect();
        WaveFunction::new(axes, amps)?.normalize()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
    /// Whether failed checks turn into a non-zero exit.
    #[serde(default = "yes")]
    pub assertions: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physical: Option<PhysicalConfig>,
    #[serde(default)]
    pub stochastic: StochasticParams,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateConfig>,
    #[serde(default)]
    pub trajectories: TrajectoryOptions,
    #[serde(default)]
    pub prior: PriorOptions,
    #[serde(default)]
    pub repeat: RepeatOptions,
    #[serde(default)]
    pub stochastic_check: StochasticCheckOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appendix: Option<AppendixConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<LambdaSweep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn violation(path: &str, message: impl fmt::Display) -> Violation {
    Violation { path: path.to_string(), message: message.to_string() }
}

/// Section an invariant failure is reported under.
fn path_of(err: &Error, fallback: &str) -> String {
    match err {
        Error::Configuration { invariant: "packet separation", .. } => "physical.sep_factor".into(),
        Error::Configuration { invariant: "timescale hierarchy", .. } => "ensemble.dt_traj".into(),
        Error::Configuration { invariant: "measurement action scale", .. } => "physical.lambda_mag".into(),
        _ => fallback.into(),
    }
}

/// Parses and validates a TOML experiment description.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text)
        .map_err(|e| ConfigError { violations: vec![violation("", e.to_string().trim())] })?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        ConfigError { violations: vec![violation(&path, e.into_inner().to_string().trim())] }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("experiment configs are representable in TOML")
}

impl ExperimentConfig {
    fn needs_measurement(&self) -> bool {
        matches!(self.kind, ExperimentKind::Born | ExperimentKind::Trajectories | ExperimentKind::Repeatability)
    }

    pub fn pipeline(&self) -> Option<MeasurementPipeline> {
        Some(MeasurementPipeline { config: self.physical?, ensemble: self.ensemble, stochastic: self.stochastic })
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let mut v = Vec::new();
        if let Err(e) = self.stochastic.validate() {
            v.push(violation(&path_of(&e, "stochastic"), e));
        }
        if self.needs_measurement() {
            match (&self.physical, &self.state) {
                (None, _) => v.push(violation("physical", "section is required for this experiment kind")),
                (_, None) => v.push(violation("state", "section is required for this experiment kind")),
                (Some(_), Some(_)) => {
                    if let Err(e) = self.ensemble.validate(&self.stochastic) {
                        v.push(violation(&path_of(&e, "ensemble"), e));
                    }
                    if let Err(e) = self.pipeline().expect("physical present").validate() {
                        let p = path_of(&e, "physical");
                        if !v.iter().any(|x| x.path == p) {
                            v.push(violation(&p, e));
                        }
                    }
                    if let Err(e) = self.prepare() {
                        v.push(violation(&path_of(&e, "state.modes"), e));
                    }
                }
            }
            if self.ensemble.n_trials == 0 {
                v.push(violation("ensemble.n_trials", "must be at least 1"));
            }
        }
        match self.kind {
            ExperimentKind::PriorAverage => {
                if self.state.is_none() {
                    v.push(violation("state", "section is required for this experiment kind"));
                } else if let Err(e) = crate::spectral::Superposition::new(
                    self.state.as_ref().expect("checked").basis(),
                    self.state.as_ref().expect("checked").coefficients(),
                ) {
                    v.push(violation("state.modes", e));
                }
                if self.prior.n_mc < 2 {
                    v.push(violation("prior.n_mc", "needs at least two samples"));
                }
            }
            ExperimentKind::Appendix | ExperimentKind::LambdaSweep => match &self.appendix {
                None => v.push(violation("appendix", "section is required for this experiment kind")),
                Some(a) => {
                    if let Err(e) = a.system.validate() {
                        v.push(violation("appendix.system", e));
                    }
                    if a.axes.len() != a.system.dim {
                        v.push(violation("appendix.axes", format!("{} axes for a {}-D system", a.axes.len(), a.system.dim)));
                    } else {
                        match a.initial_state() {
                            Err(e) => v.push(violation("appendix.initial", e)),
                            Ok(psi) => {
                                if let Err(e) = build_metric_hamiltonian(&a.system, a.lambda_mag, psi.axes()) {
                                    v.push(violation("appendix.system", e));
                                }
                            }
                        }
                    }
                    if !(a.dt > 0.0) || a.n_steps < 2 {
                        v.push(violation("appendix.dt", "needs dt > 0 and at least two steps"));
                    }
                    if self.kind == ExperimentKind::LambdaSweep {
                        match &self.sweep {
                            None => v.push(violation("sweep", "section is required for this experiment kind")),
                            Some(s) if !s.deltas.contains(&0.0) => {
                                v.push(violation("sweep.deltas", "must contain the delta = 0 reference"))
                            }
                            Some(s) if s.deltas.iter().any(|d| !(*d > -1.0)) => {
                                v.push(violation("sweep.deltas", "every delta must exceed -1"))
                            }
                            Some(s) if !(s.dt > 0.0) || s.n_steps == 0 => {
                                v.push(violation("sweep.dt", "needs dt > 0 and at least one step"))
                            }
                            Some(_) => {}
                        }
                    }
                }
            },
            _ => {}
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations: v })
        }
    }

    pub fn prepare(&self) -> Result<SpectralState> {
        let cfg = self.physical.ok_or_else(|| Error::InvalidParameter("missing physical section".into()))?;
        let st = self.state.as_ref().ok_or_else(|| Error::InvalidParameter("missing state section".into()))?;
        let packet = GaussianPacket { center: st.pointer_center, sigma: cfg.sigma, momentum: st.pointer_momentum };
        prepare_initial_state(st.basis(), &st.coefficients(), packet, &cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub requirement: String,
    pub pass: bool,
}

fn check(name: &str, value: f64, requirement: &str, pass: bool) -> Check {
    Check { name: name.into(), value, requirement: requirement.into(), pass }
}

/// A result file held in memory until the single writer emits it.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
}

impl Outputs {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = Vec::new();
        write_json(&mut bytes, value)?;
        self.artifacts.push(Artifact { name: name.into(), bytes });
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        let mut bytes = Vec::new();
        write_jsonl(&mut bytes, items)?;
        self.artifacts.push(Artifact { name: name.into(), bytes });
        Ok(())
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.artifacts.push(Artifact { name: name.into(), bytes });
    }

    /// Tabular output as `name.csv` or `name.json` rows.
    fn table<T: Serialize>(&mut self, format: OutputFormat, name: &str, header: &str, rows: &[T], csv: impl Fn(&T) -> String) -> Result<()> {
        match format {
            OutputFormat::Csv => {
                let mut s = String::from(header);
                s.push('\n');
                for r in rows {
                    s.push_str(&csv(r));
                    s.push('\n');
                }
                self.raw(&format!("{name}.csv"), s.into_bytes());
                Ok(())
            }
            OutputFormat::Json => self.json(&format!("{name}.json"), &rows),
        }
    }

    fn histogram(&mut self, format: OutputFormat, name: &str, h: &Histogram) -> Result<()> {
        match format {
            OutputFormat::Csv => {
                let mut bytes = Vec::new();
                h.write_csv(&mut bytes)?;
                self.raw(&format!("{name}.csv"), bytes);
                Ok(())
            }
            OutputFormat::Json => self.json(&format!("{name}.json"), h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct OutcomeRow {
    l: i32,
    omega: f64,
    count: u64,
    frequency: f64,
    reference: f64,
    standard_error: f64,
}

fn first_overflow(records: &[crate::measurement::MeasurementRecord], seed: u64) -> Result<()> {
    match records.iter().find(|r| r.overflow) {
        Some(r) => Err(Error::Trial {
            trial: r.trial,
            seed,
            source: Box::new(Error::DomainOverflow(format!("pointer left the grid at q2 = {}", r.q2_final))),
        }),
        None => Ok(()),
    }
}

fn run_born(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let state = cfg.prepare()?;
    let pipeline = cfg.pipeline().expect("validated");
    let n = cfg.ensemble.n_trials;
    let records: Vec<_> = run_trajectories(&state, &pipeline, InitialLaw::Born, n, cfg.seed, usize::MAX)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    first_overflow(&records, cfg.seed)?;
    let stats = summarize(&records, &state);
    out.jsonl("records.jsonl", &records)?;
    out.json("summary.json", &stats)?;
    let rows: Vec<OutcomeRow> = stats
        .outcomes
        .iter()
        .map(|o| OutcomeRow { l: o.l, omega: o.omega, count: o.count, frequency: o.frequency, reference: o.reference, standard_error: o.standard_error })
        .collect();
    out.table(cfg.format, "outcomes", "l,omega,count,frequency,reference,standard_error", &rows, |r| {
        format!("{},{},{},{},{},{}", r.l, r.omega, r.count, r.frequency, r.reference, r.standard_error)
    })?;
    let (lo, hi) = state.pointer_range;
    let h = Histogram::new(records.iter().map(|r| r.q2_final), lo, hi, 200);
    out.histogram(cfg.format, "pointer_histogram", &h)?;
    let admissible: Vec<f64> = state.basis.modes().map(|l| state.basis.eigenvalue(l)).collect();
    let discrete = records.iter().filter_map(|r| r.omega).all(|w| admissible.contains(&w));
    out.checks.push(check("born.frequencies_within_3se", stats.max_z(), "≤ 3", stats.max_z() <= 3.0));
    out.checks.push(check("born.chi2_p_value", stats.chi2.p_value, "> 0.01", stats.chi2.p_value > 0.01));
    out.checks.push(check("born.ambiguous_rate", stats.ambiguous_rate, "< 1e-3", stats.ambiguous_rate < 1e-3));
    out.checks.push(check("born.outcomes_discrete", f64::from(u8::from(discrete)), "= 1", discrete));
    Ok(())
}

fn run_trajectory_kind(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let state = cfg.prepare()?;
    let pipeline = cfg.pipeline().expect("validated");
    let opts = cfg.trajectories;
    let runs = run_trajectories(&state, &pipeline, opts.initial, cfg.ensemble.n_trials, cfg.seed, opts.record_stride)?;
    let records: Vec<_> = runs.iter().map(|(r, _)| r.clone()).collect();
    first_overflow(&records, cfg.seed)?;
    let exported: Vec<_> = runs.iter().take(opts.export_trials).map(|(_, t)| t.clone()).collect();
    match cfg.format {
        OutputFormat::Csv => {
            let mut bytes = Vec::new();
            write_trajectories_csv(&mut bytes, &exported)?;
            out.raw("trajectories.csv", bytes);
        }
        OutputFormat::Json => out.jsonl("trajectories.jsonl", &exported)?,
    }
    let initial: Vec<[f64; 2]> = runs.iter().map(|(_, t)| t.start()).collect();
    let finals: Vec<[f64; 2]> = runs.iter().map(|(_, t)| t.end()).collect();
    let m0 = exact_marginals(&state, 1024, 16_384)?;
    let at_tm = state.evolve(pipeline.config.t_m, pipeline.config.g)?;
    let m1 = exact_marginals(&at_tm, 1024, 16_384)?;
    let r0 = equivariance_report(&initial, &m0, opts.n_bins);
    let r1 = equivariance_report(&finals, &m1, opts.n_bins);
    #[derive(Serialize)]
    struct Equivariance<'a> {
        initial_law: InitialLaw,
        t0: &'a crate::trajectory::EquivarianceReport,
        t_m: &'a crate::trajectory::EquivarianceReport,
        node_events: usize,
        stalled_steps: usize,
    }
    out.json(
        "equivariance.json",
        &Equivariance {
            initial_law: opts.initial,
            t0: &r0,
            t_m: &r1,
            node_events: records.iter().map(|r| r.node_events).sum(),
            stalled_steps: records.iter().map(|r| r.stalled_steps).sum(),
        },
    )?;
    let (lo, hi) = state.pointer_range;
    out.histogram(cfg.format, "q2_histogram", &Histogram::new(finals.iter().map(|q| q[1]), lo, hi, 200))?;
    out.histogram(cfg.format, "theta_histogram", &Histogram::new(finals.iter().map(|q| q[0]), 0.0, state.basis.period, 64))?;
    let p = r1.min_chi2_p();
    match opts.initial {
        InitialLaw::Born => out.checks.push(check("trajectories.equivariance_chi2_p", p, "> 0.01", p > 0.01)),
        InitialLaw::UniformTheta => out.checks.push(check("trajectories.biased_control_chi2_p", p, "< 1e-4", p < 1e-4)),
    }
    Ok(())
}

fn run_prior(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let st = cfg.state.as_ref().expect("validated");
    let phi = crate::spectral::Superposition::new(st.basis(), st.coefficients())?;
    let lambda = cfg.physical.map_or(crate::physics::HBAR, |p| p.lambda_mag);
    let avg = average_prior(&phi, lambda, cfg.prior.n_mc, &mut stream(cfg.seed, 0))?;
    out.json("prior.json", &avg)?;
    let z = (avg.mean - avg.analytic).abs() / avg.std_error;
    out.checks.push(check("prior.mc_within_3se", z, "≤ 3", z <= 3.0));
    Ok(())
}

fn run_repeat(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let state = cfg.prepare()?;
    let pipeline = cfg.pipeline().expect("validated");
    let n = cfg.ensemble.n_trials;
    let (pairs, report) = repeatability(&state, &pipeline, n, cfg.seed, true)?;
    out.jsonl("pairs.jsonl", &pairs)?;
    out.checks.push(check("repeat.agreement_rate", report.agreement_rate, "= 1", report.agreements == report.n_pairs));
    #[derive(Serialize)]
    struct Summary {
        collapse: crate::measurement::RepeatReport,
        ablation: Option<crate::measurement::RepeatReport>,
    }
    let ablation = if cfg.repeat.ablation { Some(repeatability(&state, &pipeline, n, cfg.seed, false)?.1) } else { None };
    out.json("repeat.json", &Summary { collapse: report, ablation })?;
    Ok(())
}

fn run_appendix(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let a = cfg.appendix.as_ref().expect("validated");
    let psi0 = a.initial_state()?;
    let op = build_metric_hamiltonian(&a.system, a.lambda_mag, psi0.axes())?;
    let naive = build_naive_hamiltonian(&a.system, a.lambda_mag, psi0.axes())?;
    let history = evolve_history(&psi0, &op, a.dt, a.n_steps, 1)?;
    let residual = verify_hjm_residual(&history, a.dt, &a.system, a.lambda_mag)?;
    let fields = polar_decompose(&psi0, a.lambda_mag)?;
    let limit = classical_limit_check(&fields, a.lambda_mag, &a.system, &a.limit_lambdas)?;
    let last = history.last().expect("non-empty");
    let norm_drift = (last.norm_squared() - psi0.norm_squared()).abs();
    #[derive(Serialize)]
    struct Summary<'a> {
        hermiticity_defect: f64,
        naive_hermiticity_defect: f64,
        norm_drift: f64,
        residual: crate::madelung::HjmResidual,
        classical_limit: &'a crate::appendix::ClassicalLimitReport,
    }
    let herm = op.hermiticity_defect();
    out.json(
        "appendix.json",
        &Summary {
            hermiticity_defect: herm,
            naive_hermiticity_defect: naive.hermiticity_defect(),
            norm_drift,
            residual,
            classical_limit: &limit,
        },
    )?;
    let fields_t = polar_decompose(last, a.lambda_mag)?;
    let v = appendix_velocity_grid(&fields_t, a.lambda_mag, &a.system, 0.0)?;
    let st = Stencils::new(last.axes());
    let rows: Vec<(usize, [f64; 2], bool)> = (0..st.len()).map(|k| (k, v.values[k], v.valid[k])).collect();
    out.table(cfg.format, "velocity", "x,y,v0,v1,valid", &rows, |(k, vel, ok)| {
        let q = st.point(*k);
        format!("{},{},{},{},{}", q[0], q[1], vel[0], vel[1], u8::from(*ok))
    })?;
    out.checks.push(check("appendix.hermiticity_defect", herm, "< 1e-10", herm < 1e-10));
    for (w, r) in a.limit_lambdas.windows(2).zip(&limit.ratios) {
        if (w[1] / w[0] - 0.5).abs() < 1e-12 {
            out.checks.push(check(&format!("appendix.quantum_potential_ratio_{}", w[0]), *r, "0.25 ± 1%", (r / 0.25 - 1.0).abs() < 0.01));
        }
    }
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let a = cfg.appendix.as_ref().expect("validated");
    let sweep = cfg.sweep.as_ref().expect("validated");
    let psi0 = a.initial_state()?;
    let rep = run_lambda_sweep(&a.system, &psi0, sweep)?;
    let rows: Vec<(f64, crate::appendix::SweepPoint)> =
        rep.entries.iter().flat_map(|e| e.series.iter().map(move |p| (e.lambda, *p))).collect();
    out.table(
        cfg.format,
        "sweep",
        "lambda,t,norm,mean_q0,mean_q1,mean_q0_sq,mean_q1_sq,energy,autocorrelation",
        &rows,
        |(l, p)| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                l, p.t, p.norm, p.mean_q[0], p.mean_q[1], p.mean_q2[0], p.mean_q2[1], p.energy, p.autocorrelation
            )
        },
    )?;
    #[derive(Serialize)]
    struct Entry {
        delta: f64,
        lambda: f64,
        deviation: crate::appendix::SweepDeviation,
    }
    let summary: Vec<Entry> = rep.entries.iter().map(|e| Entry { delta: e.delta, lambda: e.lambda, deviation: e.deviation }).collect();
    out.json("sweep_summary.json", &summary)?;
    let reference = rep.entry(0.0).expect("validated");
    let self_dev = reference.deviation;
    let zero = self_dev == crate::appendix::SweepDeviation::default();
    out.checks.push(check("sweep.reference_self_deviation", self_dev.mean_q, "= 0", zero));
    let drift = rep
        .entries
        .iter()
        .flat_map(|e| e.series.iter().map(|p| (p.norm - e.series[0].norm).abs()))
        .fold(0.0, f64::max);
    out.checks.push(check("sweep.norm_drift", drift, "< 1e-8", drift < 1e-8));
    Ok(())
}

fn run_stochastic(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let params = cfg.stochastic;
    let o = cfg.stochastic_check;
    let plus = deviation_statistics(&params, o.n_draws, 1, &mut stream(cfg.seed, 0));
    let minus = deviation_statistics(&params, o.n_draws, -1, &mut stream(cfg.seed, 1));
    let sep = separability_trials(&params, o.n_separability, &mut stream(cfg.seed, 2))?;
    let path = sample_sign_path(&params, o.path_steps, &mut stream(derive_seed(cfg.seed, 3), 0))?;
    #[derive(Serialize)]
    struct Summary {
        lambda_mag: f64,
        positive: crate::stochastics::DeviationStats,
        negative: crate::stochastics::DeviationStats,
        separability: crate::stochastics::SeparabilitySummary,
        sign_mean: f64,
        sign_lag1_autocorrelation: f64,
    }
    out.json(
        "stochastic.json",
        &Summary {
            lambda_mag: params.lambda_mag,
            positive: plus,
            negative: minus,
            separability: sep,
            sign_mean: path.mean(),
            sign_lag1_autocorrelation: path.lag1_autocorrelation(),
        },
    )?;
    let target = 0.5 * params.lambda_mag;
    let tol = 0.002 * params.lambda_mag;
    for (name, s) in [("positive", plus), ("negative", minus)] {
        out.checks.push(check(&format!("stochastic.mean_deviation_{name}"), s.mean_abs, "|λ|/2 ± 0.002|λ|", (s.mean_abs - target).abs() <= tol));
        out.checks.push(check(&format!("stochastic.sign_lock_{name}"), s.sign_lock_fraction, "= 1", s.sign_lock_fraction == 1.0));
    }
    out.checks.push(check("stochastic.separability_defect", sep.max_defect, "< 1e-12", sep.max_defect < 1e-12));
    out.checks.push(check(
        "stochastic.gaussian_control_fails",
        sep.gaussian_failure_fraction,
        "> 0.99",
        sep.gaussian_failure_fraction > 0.99,
    ));
    Ok(())
}

/// Produces the result files and checks of `cfg` without touching the disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outputs> {
    let mut out = Outputs::default();
    match cfg.kind {
        ExperimentKind::Born => run_born(cfg, &mut out)?,
        ExperimentKind::Trajectories => run_trajectory_kind(cfg, &mut out)?,
        ExperimentKind::PriorAverage => run_prior(cfg, &mut out)?,
        ExperimentKind::Repeatability => run_repeat(cfg, &mut out)?,
        ExperimentKind::Appendix => run_appendix(cfg, &mut out)?,
        ExperimentKind::LambdaSweep => run_sweep(cfg, &mut out)?,
        ExperimentKind::StochasticCheck => run_stochastic(cfg, &mut out)?,
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExitStatus {
    Success = 0,
    Validation = 1,
    Runtime = 2,
    AssertionFailure = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssertionBlock {
    /// `PASS`, `FAIL`, or `NONE` when the experiment declares no checks.
    pub status: &'static str,
    pub enforced: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub kind: &'static str,
    pub seed: u64,
    pub crate_version: &'static str,
    pub config: ExperimentConfig,
    pub files: Vec<FileEntry>,
    pub assertions: AssertionBlock,
    /// Non-hashed companion file with wall-clock figures.
    pub timing_file: &'static str,
}

#[derive(Debug, Clone, Serialize)]
struct ErrorReport {
    status: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    trial: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<Violation>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub status: ExitStatus,
    pub out_dir: PathBuf,
    pub manifest: Option<Manifest>,
    pub message: Option<String>,
}

fn write_error(dir: &Path, report: &ErrorReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    write_json(&mut bytes, report)?;
    std::fs::write(dir.join("error.json"), bytes)?;
    Ok(())
}

/// Error file for a configuration that failed to parse or validate.
pub fn write_config_error(dir: &Path, err: &ConfigError) -> Result<()> {
    write_error(
        dir,
        &ErrorReport { status: "validation", message: err.to_string(), trial: None, seed: None, violations: err.violations.clone() },
    )
}

/// Runs `cfg` on `threads` workers (0 = rayon default) and writes everything under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<RunSummary> {
    if let Err(e) = cfg.validate() {
        write_config_error(out_dir, &e)?;
        return Ok(RunSummary { status: ExitStatus::Validation, out_dir: out_dir.into(), manifest: None, message: Some(e.to_string()) });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let result = pool.install(|| execute(cfg));
    let wall = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(out_dir)?;
    let outputs = match result {
        Ok(o) => o,
        Err(e) => {
            let (trial, seed) = match &e {
                Error::Trial { trial, seed, .. } => (Some(*trial), Some(*seed)),
                _ => (None, None),
            };
            write_error(out_dir, &ErrorReport { status: "runtime", message: e.to_string(), trial, seed, violations: Vec::new() })?;
            return Ok(RunSummary { status: ExitStatus::Runtime, out_dir: out_dir.into(), manifest: None, message: Some(e.to_string()) });
        }
    };
    let mut files = Vec::new();
    for a in &outputs.artifacts {
        std::fs::write(out_dir.join(&a.name), &a.bytes)?;
        files.push(FileEntry { path: a.name.clone(), sha256: sha256_hex(&a.bytes), bytes: a.bytes.len() });
    }
    let all_pass = outputs.checks.iter().all(|c| c.pass);
    let status = match (outputs.checks.is_empty(), all_pass) {
        (true, _) => "NONE",
        (false, true) => "PASS",
        (false, false) => "FAIL",
    };
    let manifest = Manifest {
        kind: cfg.kind.name(),
        seed: cfg.seed,
        crate_version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        files,
        assertions: AssertionBlock { status, enforced: cfg.assertions, checks: outputs.checks.clone() },
        timing_file: "timing.json",
    };
    let mut bytes = Vec::new();
    write_json(&mut bytes, &manifest)?;
    std::fs::write(out_dir.join("manifest.json"), bytes)?;
    #[derive(Serialize)]
    struct Timing {
        wall_seconds: f64,
        threads: usize,
    }
    let mut bytes = Vec::new();
    write_json(&mut bytes, &Timing { wall_seconds: wall, threads: pool.current_num_threads() })?;
    std::fs::write(out_dir.join("timing.json"), bytes)?;
    let exit = if cfg.assertions && !all_pass { ExitStatus::AssertionFailure } else { ExitStatus::Success };
    let message = (!all_pass).then(|| {
        let failed: Vec<_> = outputs.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
        format!("failed checks: {}", failed.join(", "))
    });
    Ok(RunSummary { status: exit, out_dir: out_dir.into(), manifest: Some(manifest), message })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const BORN: &str = r#"
kind = "born"
seed = 42

[physical]
g = 1.0
t_m = 1.0
sigma = 0.05

[ensemble]
n_trials = 500

[state]
modes = [
    { l = -1, weight = 0.5 },
    { l = 0, weight = 0.3 },
    { l = 1, weight = 0.2 },
]
"#;

    #[test]
    fn minimal_born_config_fills_defaults() {
        let cfg = parse_config(BORN).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Born);
        let p = cfg.physical.unwrap();
        assert_eq!(p.sep_factor, 8.0);
        assert_eq!(p.lambda_mag, 1.0);
        assert_eq!(cfg.ensemble.dt_traj, 1e-3);
        assert_eq!(cfg.state.as_ref().unwrap().basis().l_max, 2);
    }

    #[test]
    fn separation_violation_names_its_path() {
        let text = BORN.replace("sigma = 0.05", "sigma = 0.4\nsep_factor = 6.0");
        let err = parse_config(&text).unwrap_err();
        assert!(err.violations.iter().any(|v| v.path == "physical.sep_factor" && v.message.contains("packet separation")), "{err}");
        let text = BORN.replace("sigma = 0.05", "sigma = 0.05\nsep_factor = 2.0");
        assert!(parse_config(&text).unwrap_err().to_string().contains("packet separation"));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected_with_paths() {
        let err = parse_config(&BORN.replace("t_m = 1.0", "t_m = 1.0\nbogus = 3")).unwrap_err();
        assert!(err.violations[0].path.starts_with("physical"), "{err}");
        let err = parse_config(&BORN.replace("n_trials = 500", "n_trials = \"many\"")).unwrap_err();
        assert_eq!(err.violations[0].path, "ensemble.n_trials");
        let err = parse_config(&BORN.replace("[ensemble]\nn_trials = 500", "[ensemble]\nn_trials = 500\ndt_traj = 0.005")).unwrap_err();
        assert!(err.violations.iter().any(|v| v.path == "ensemble.dt_traj"), "{err}");
    }

    #[test]
    fn config_round_trips() {
        let cfg = parse_config(BORN).unwrap();
        let again = parse_config(&serialize_config(&cfg)).unwrap();
        assert_eq!(cfg, again);
        let app = r#"
kind = "lambda-sweep"
[appendix]
system = { dim = 1, metric = ["1 + 0.1*x^2"], vector = ["0"], potential = "0.5*x^2" }
axes = [{ min = -8.0, max = 8.0, n = 128 }]
initial = { center = [0.5], width = [0.7] }
[sweep]
deltas = [-0.1, 0.0, 0.1]
dt = 0.01
n_steps = 10
"#;
        let cfg = parse_config(app).unwrap();
        assert_eq!(parse_config(&serialize_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn runs_are_reproducible_and_self_consistent() {
        let cfg = parse_config(BORN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&cfg, &dir.path().join("a"), 1).unwrap();
        let b = run_experiment(&cfg, &dir.path().join("b"), 4).unwrap();
        assert_eq!(a.status, ExitStatus::Success, "{:?}", a.message);
        assert_eq!(b.status, a.status);
        for f in &a.manifest.as_ref().unwrap().files {
            let x = std::fs::read(dir.path().join("a").join(&f.path)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(&f.path)).unwrap();
            assert_eq!(x, y, "{}", f.path);
            assert_eq!(sha256_hex(&x), f.sha256);
        }
        let ma = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
        assert_eq!(ma, std::fs::read(dir.path().join("b/manifest.json")).unwrap());

        let text = std::fs::read_to_string(dir.path().join("a/records.jsonl")).unwrap();
        let records: Vec<crate::measurement::MeasurementRecord> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let stats = summarize(&records, &cfg.prepare().unwrap());
        let mut bytes = Vec::new();
        write_json(&mut bytes, &stats).unwrap();
        assert_eq!(bytes, std::fs::read(dir.path().join("a/summary.json")).unwrap());
    }

    #[test]
    fn overflow_is_a_runtime_error_naming_the_trial() {
        // the range fits the packets at t = 0 but not at t_M
        let mut cfg = parse_config(BORN).unwrap();
        cfg.ensemble.n_trials = 20;
        let state = cfg.prepare().unwrap();
        let narrow = SpectralState { pointer_range: (-0.5, 0.5), ..state };
        let pipeline = cfg.pipeline().unwrap();
        let runs = run_trajectories(&narrow, &pipeline, InitialLaw::Born, 20, 1, usize::MAX).unwrap();
        let records: Vec<_> = runs.into_iter().map(|(r, _)| r).collect();
        let err = first_overflow(&records, 1).unwrap_err();
        assert!(matches!(err, Error::Trial { .. }));
        assert!(err.to_string().contains("domain overflow"));

        let dir = tempfile::tempdir().unwrap();
        let bad = BORN.replace("g = 1.0", "g = 1.0\nlambda_mag = 2.0");
        assert!(parse_config(&bad).is_err());
        let mut cfg = parse_config(BORN).unwrap();
        cfg.physical.as_mut().unwrap().lambda_mag = 2.0;
        let r = run_experiment(&cfg, dir.path(), 1).unwrap();
        assert_eq!(r.status, ExitStatus::Validation);
        assert!(dir.path().join("error.json").exists());
    }

    #[test]
    fn every_kind_runs_at_small_scale() {
        let dir = tempfile::tempdir().unwrap();
        let base = parse_config(BORN).unwrap();
        for kind in [ExperimentKind::Trajectories, ExperimentKind::PriorAverage, ExperimentKind::Repeatability] {
            let mut cfg = ExperimentConfig { kind, ..base.clone() };
            cfg.ensemble.n_trials = 200;
            cfg.prior.n_mc = 2000;
            cfg.assertions = false;
            let r = run_experiment(&cfg, &dir.path().join(kind.name()), 0).unwrap();
            assert_eq!(r.status, ExitStatus::Success, "{kind:?}: {:?}", r.message);
        }
        let text = r#"
kind = "appendix"
[appendix]
system = { dim = 1, metric = ["1 + 0.2*exp(-x^2)"], vector = ["0"], potential = "0.5*x^2" }
axes = [{ min = -8.0, max = 8.0, n = 256 }]
initial = { center = [0.5], width = [0.8], momentum = [0.3] }
n_steps = 20
"#;
        let cfg = parse_config(text).unwrap();
        let r = run_experiment(&cfg, &dir.path().join("appendix"), 0).unwrap();
        assert_eq!(r.status, ExitStatus::Success, "{:?}", r.message);
        let sweep = text.replace("kind = \"appendix\"", "kind = \"lambda-sweep\"") + "[sweep]\ndeltas = [0.0, 0.2]\ndt = 0.01\nn_steps = 20\nrecord_stride = 5\n";
        let cfg = parse_config(&sweep).unwrap();
        let r = run_experiment(&cfg, &dir.path().join("sweep"), 0).unwrap();
        assert_eq!(r.status, ExitStatus::Success, "{:?}", r.message);
        let cfg = parse_config("kind = \"stochastic-check\"\n[stochastic_check]\nn_draws = 100000\n").unwrap();
        let r = run_experiment(&cfg, &dir.path().join("stoch"), 0).unwrap();
        // 1e5 draws give a standard error of ~0.0016, so the ±0.002 band can miss; only run status matters here
        assert_ne!(r.status, ExitStatus::Runtime, "{:?}", r.message);
    }
}
