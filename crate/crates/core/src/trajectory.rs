//! Particle trajectories guided by the wavefunction.
//!
//! For a Hamiltonian quadratic in the momenta, `H = ½ (p − a) G (p − a) + V`,
//! the actual velocity inside one τ_ξ interval is
//! `v = G (∂S + (λ/2) ∂Ω/Ω − a)` with the sign of `λ` fluctuating, and the
//! effective velocity is its `±λ` average `G (∂S − a)`. The von Neumann
//! coupling `g l̂_z p̂₂` is the constant indefinite case `G = [[0, g], [g, 0]]`.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Axis;
use crate::spectral::SpectralState;
use crate::stats::{chi_square, ks_test, ChiSquareTest, KsTest};
use crate::stochastics::{SignPath, StochasticParams};
use crate::system::MetricPotentialSystem;
use crate::wavefunction::{WaveFunction, DEFAULT_NODE_EPS};

/// Deepest recursive halving tried before a step is abandoned.
pub const MAX_HALVINGS: u32 = 8;

/// `ψ` and its gradient at one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalWave {
    pub psi: Complex64,
    pub grad: [Complex64; 2],
}

impl LocalWave {
    pub fn density(&self) -> f64 {
        self.psi.norm_sqr()
    }
}

/// Anything that can report `ψ` and `∇ψ` along a trajectory.
pub trait WaveSource: Sync {
    fn sample(&self, t: f64, q: [f64; 2]) -> LocalWave;
    /// `|ψ|²` below which a configuration counts as a node.
    fn node_threshold(&self) -> f64;
    /// Coordinate axes; periodic axes are wrapped, line axes bound the domain.
    fn axes(&self) -> &[Axis];
}

/// The spectral measurement state, evaluated analytically at any time.
#[derive(Debug, Clone)]
pub struct SpectralSource {
    pub state: SpectralState,
    pub g: f64,
    axes: [Axis; 2],
    threshold: f64,
}

impl SpectralSource {
    pub fn new(state: SpectralState, g: f64) -> Result<Self> {
        Self::with_node_eps(state, g, DEFAULT_NODE_EPS)
    }

    pub fn with_node_eps(state: SpectralState, g: f64, eps: f64) -> Result<Self> {
        let ring = Axis::periodic(0.0, state.basis.period, 8)?;
        let (lo, hi) = state.pointer_range;
        let line = Axis::line(lo, hi, 32)?;
        let threshold = eps * state.density_bound();
        Ok(Self { state, g, axes: [ring, line], threshold })
    }
}

impl WaveSource for SpectralSource {
    fn sample(&self, t: f64, q: [f64; 2]) -> LocalWave {
        let (psi, dx, dq) = self.state.eval_after(t, self.g, q[0], q[1]);
        LocalWave { psi, grad: [dx, dq] }
    }

    fn node_threshold(&self) -> f64 {
        self.threshold
    }

    fn axes(&self) -> &[Axis] {
        &self.axes
    }
}

/// A static grid wavefunction with fourth-order gradients, bilinearly interpolated.
#[derive(Debug, Clone)]
pub struct GridSource {
    axes: Vec<Axis>,
    shape: [usize; 2],
    psi: Vec<Complex64>,
    grad: [Vec<Complex64>; 2],
    threshold: f64,
}

impl GridSource {
    pub fn new(psi: &WaveFunction) -> Self {
        Self::with_node_eps(psi, DEFAULT_NODE_EPS)
    }

    pub fn with_node_eps(psi: &WaveFunction, eps: f64) -> Self {
        let st = crate::madelung::Stencils::new(psi.axes());
        let n = psi.len();
        let all = vec![true; n];
        let mut grad = [vec![Complex64::new(0.0, 0.0); n], vec![Complex64::new(0.0, 0.0); n]];
        for (ax, g) in grad.iter_mut().enumerate().take(psi.dim()) {
            let (d, ok) = st.d1(psi.amplitudes(), &all, ax);
            // boundary rows fall back to zero gradient; fields there are negligible by construction
            *g = d.into_iter().zip(ok).map(|(v, good)| if good { v } else { Complex64::new(0.0, 0.0) }).collect();
        }
        let (n0, n1) = psi.shape();
        Self {
            axes: psi.axes().to_vec(),
            shape: [n0, n1],
            psi: psi.amplitudes().to_vec(),
            grad,
            threshold: eps * psi.max_density(),
        }
    }

    /// Interpolation weights `(index, weight)` along one axis.
    fn weights(&self, ax: usize, x: f64) -> [(usize, f64); 2] {
        let Some(a) = self.axes.get(ax) else { return [(0, 1.0), (0, 0.0)] };
        let h = a.spacing();
        let n = a.n;
        let offset = if a.is_periodic() { 0.0 } else { 0.5 };
        let u = (a.wrap(x) - a.min) / h - offset;
        let i = u.floor();
        let f = u - i;
        let i = i as isize;
        if a.is_periodic() {
            let n = n as isize;
            [(i.rem_euclid(n) as usize, 1.0 - f), ((i + 1).rem_euclid(n) as usize, f)]
        } else if i < 0 {
            [(0, 1.0), (0, 0.0)]
        } else if i as usize >= n - 1 {
            [(n - 1, 1.0), (n - 1, 0.0)]
        } else {
            [(i as usize, 1.0 - f), (i as usize + 1, f)]
        }
    }
}

impl WaveSource for GridSource {
    fn sample(&self, _t: f64, q: [f64; 2]) -> LocalWave {
        let w0 = self.weights(0, q[0]);
        let w1 = self.weights(1, q[1]);
        let mut out = LocalWave { psi: Complex64::new(0.0, 0.0), grad: [Complex64::new(0.0, 0.0); 2] };
        for &(i, a) in &w0 {
            for &(j, b) in &w1 {
                let k = i * self.shape[1] + j;
                let w = a * b;
                out.psi += self.psi[k] * w;
                out.grad[0] += self.grad[0][k] * w;
                out.grad[1] += self.grad[1][k] * w;
            }
        }
        out
    }

    fn node_threshold(&self) -> f64 {
        self.threshold
    }

    fn axes(&self) -> &[Axis] {
        &self.axes
    }
}

/// The momentum-space coupling `G^{ij}` and covector `a_i` of the guiding Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `H_I = g Ô₁ p̂₂`: `q̇₁ = g ∂₂S`, `q̇₂ = g ∂₁S`.
    Measurement { g: f64 },
    Metric(MetricPotentialSystem),
}

impl Coupling {
    fn contract(&self, q: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        match self {
            Coupling::Measurement { g } => [g * p[1], g * p[0]],
            Coupling::Metric(sys) => sys.velocity(&q, &p[..sys.dim]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityMode {
    Effective,
    /// Signed `λ` of the current τ_ξ interval.
    Actual { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    ExplicitMidpoint,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NodePolicy {
    /// Floor `|ψ|²` at the node threshold when dividing.
    Clamp,
    /// Retry the step as two half steps whenever it touches a node.
    #[default]
    RejectResample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VelocitySource {
    #[default]
    Effective,
    Actual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_dt_traj")]
    pub dt_traj: f64,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub node_policy: NodePolicy,
    #[serde(default)]
    pub velocity: VelocitySource,
}

fn default_trials() -> usize {
    10_000
}

fn default_dt_traj() -> f64 {
    1e-3
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            n_trials: default_trials(),
            dt_traj: default_dt_traj(),
            integrator: Integrator::default(),
            node_policy: NodePolicy::default(),
            velocity: VelocitySource::default(),
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self, stochastic: &StochasticParams) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::InvalidParameter("n_trials must be at least 1".into()));
        }
        if !(self.dt_traj > 0.0) {
            return Err(Error::InvalidParameter(format!("dt_traj must be positive, got {}", self.dt_traj)));
        }
        let limit = stochastic.tau_xi / stochastic.hierarchy_factor;
        if self.dt_traj > limit * (1.0 + 1e-12) {
            return Err(Error::Configuration {
                invariant: "timescale hierarchy",
                detail: format!("dt_traj = {} exceeds tau_xi / hierarchy_factor = {limit}", self.dt_traj),
            });
        }
        Ok(())
    }

    /// Number of whole steps covering `duration`.
    pub fn steps_for(&self, duration: f64) -> Result<usize> {
        let n = duration / self.dt_traj;
        let r = n.round();
        if r < 1.0 || (n - r).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "duration {duration} is not an integral number of steps of {}",
                self.dt_traj
            )));
        }
        Ok(r as usize)
    }
}

/// Velocity field of a wave source under a coupling.
#[derive(Debug, Clone)]
pub struct VelocityField<S> {
    pub source: S,
    pub coupling: Coupling,
    /// Action scale of `S = |λ| arg ψ`.
    pub lambda_mag: f64,
}

impl<S: WaveSource> VelocityField<S> {
    pub fn new(source: S, coupling: Coupling, lambda_mag: f64) -> Self {
        Self { source, coupling, lambda_mag }
    }

    pub fn is_node(&self, t: f64, q: [f64; 2]) -> bool {
        self.source.sample(t, q).density() < self.source.node_threshold()
    }

    /// `(∂S, ∂Ω/Ω)` at a configuration, dividing by the (possibly clamped) density.
    pub fn gradients(&self, t: f64, q: [f64; 2], clamp: bool) -> Result<([f64; 2], [f64; 2])> {
        let w = self.source.sample(t, q);
        let thr = self.source.node_threshold();
        let mut rho = w.density();
        if rho < thr || rho == 0.0 {
            if !clamp {
                return Err(Error::Node { density: rho });
            }
            rho = thr.max(f64::MIN_POSITIVE);
        }
        let mut ds = [0.0; 2];
        let mut dl = [0.0; 2];
        for ax in 0..2 {
            let z = w.psi.conj() * w.grad[ax];
            ds[ax] = self.lambda_mag * z.im / rho;
            dl[ax] = 2.0 * z.re / rho;
        }
        Ok((ds, dl))
    }

    pub fn velocity(&self, t: f64, q: [f64; 2], mode: VelocityMode, clamp: bool) -> Result<[f64; 2]> {
        let (ds, dl) = self.gradients(t, q, clamp)?;
        let half = match mode {
            VelocityMode::Effective => 0.0,
            VelocityMode::Actual { lambda } => 0.5 * lambda,
        };
        // the metric contraction subtracts a itself
        let p = [ds[0] + half * dl[0], ds[1] + half * dl[1]];
        Ok(self.coupling.contract(q, p))
    }

    pub fn effective_velocity(&self, t: f64, q: [f64; 2]) -> Result<[f64; 2]> {
        self.velocity(t, q, VelocityMode::Effective, false)
    }

    pub fn actual_velocity(&self, t: f64, q: [f64; 2], lambda: f64) -> Result<[f64; 2]> {
        self.velocity(t, q, VelocityMode::Actual { lambda }, false)
    }

    fn wrap(&self, mut q: [f64; 2]) -> [f64; 2] {
        for (x, a) in q.iter_mut().zip(self.source.axes()) {
            *x = a.wrap(*x);
        }
        q
    }

    fn outside(&self, q: [f64; 2]) -> Option<usize> {
        self.source.axes().iter().zip(q).position(|(a, x)| !a.is_periodic() && !a.contains(x))
    }
}

/// Time-stamped configuration path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub configs: Vec<[f64; 2]>,
    /// λ sign in force at each recorded time (empty for effective runs).
    pub lambda_signs: Vec<i8>,
    pub seed: u64,
    pub trial: u64,
    /// Set when the path left the domain; integration stops there.
    pub overflow: Option<String>,
    /// Steps that touched a node and were halved or clamped.
    pub node_events: usize,
    /// Sub-steps abandoned after [`MAX_HALVINGS`] halvings (the particle waits).
    pub stalled_steps: usize,
}

impl Trajectory {
    pub fn start(&self) -> [f64; 2] {
        self.configs[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.configs.last().expect("trajectory has a start point")
    }
}

struct Stepper<'a, S> {
    field: &'a VelocityField<S>,
    integrator: Integrator,
    clamp: bool,
    node_events: usize,
    stalled: usize,
}

impl<S: WaveSource> Stepper<'_, S> {
    fn raw_step(&self, t: f64, q: [f64; 2], h: f64, mode: VelocityMode) -> Result<[f64; 2]> {
        let v = |t: f64, q: [f64; 2]| self.field.velocity(t, q, mode, self.clamp);
        let add = |q: [f64; 2], k: [f64; 2], s: f64| [q[0] + s * k[0], q[1] + s * k[1]];
        let out = match self.integrator {
            Integrator::ExplicitMidpoint => {
                let k1 = v(t, q)?;
                let k2 = v(t + 0.5 * h, add(q, k1, 0.5 * h))?;
                add(q, k2, h)
            }
            Integrator::Rk4 => {
                let k1 = v(t, q)?;
                let k2 = v(t + 0.5 * h, add(q, k1, 0.5 * h))?;
                let k3 = v(t + 0.5 * h, add(q, k2, 0.5 * h))?;
                let k4 = v(t + h, add(q, k3, h))?;
                [
                    q[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                    q[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                ]
            }
        };
        Ok(self.field.wrap(out))
    }

    fn advance(&mut self, t: f64, q: [f64; 2], h: f64, mode: VelocityMode, depth: u32) -> Result<[f64; 2]> {
        if self.clamp {
            if self.field.is_node(t, q) {
                self.node_events += 1;
            }
            return self.raw_step(t, q, h, mode);
        }
        match self.raw_step(t, q, h, mode) {
            Ok(next) if !self.field.is_node(t + h, next) => Ok(next),
            Ok(_) | Err(Error::Node { .. }) => {
                if depth == 0 {
                    self.node_events += 1;
                }
                if depth >= MAX_HALVINGS {
                    self.stalled += 1;
                    return Ok(q);
                }
                let mid = self.advance(t, q, 0.5 * h, mode, depth + 1)?;
                self.advance(t + 0.5 * h, mid, 0.5 * h, mode, depth + 1)
            }
            Err(e) => Err(e),
        }
    }
}

pub struct TrajectoryRun<'a> {
    pub spec: &'a EnsembleSpec,
    /// Signs for actual-velocity runs; `None` integrates the effective velocity.
    pub sign_path: Option<&'a SignPath>,
    pub duration: f64,
    /// Record every `stride`-th step (the endpoints are always recorded).
    pub record_stride: usize,
    pub seed: u64,
    pub trial: u64,
}

/// Fixed-step integration from `q0` at `t = 0` to `duration`.
pub fn integrate_trajectory<S: WaveSource>(q0: [f64; 2], field: &VelocityField<S>, run: &TrajectoryRun<'_>) -> Result<Trajectory> {
    let n = run.spec.steps_for(run.duration)?;
    let h = run.spec.dt_traj;
    let stride = run.record_stride.max(1);
    let mut stepper = Stepper {
        field,
        integrator: run.spec.integrator,
        clamp: run.spec.node_policy == NodePolicy::Clamp,
        node_events: 0,
        stalled: 0,
    };
    let mode_at = |t: f64| match run.sign_path {
        Some(path) => VelocityMode::Actual { lambda: path.lambda_at(t) },
        None => VelocityMode::Effective,
    };
    let sign_of = |m: VelocityMode| match m {
        VelocityMode::Actual { lambda } => Some(if lambda >= 0.0 { 1i8 } else { -1 }),
        VelocityMode::Effective => None,
    };
    let mut q = field.wrap(q0);
    let mut traj = Trajectory {
        times: vec![0.0],
        configs: vec![q],
        lambda_signs: sign_of(mode_at(0.0)).into_iter().collect(),
        seed: run.seed,
        trial: run.trial,
        overflow: None,
        node_events: 0,
        stalled_steps: 0,
    };
    if let Some(ax) = field.outside(q) {
        traj.overflow = Some(format!("initial coordinate {ax} = {} outside the domain", q[ax]));
        return Ok(traj);
    }
    for k in 0..n {
        let t = k as f64 * h;
        let mode = mode_at(t);
        q = stepper.advance(t, q, h, mode, 0)?;
        let t_next = (k + 1) as f64 * h;
        if let Some(ax) = field.outside(q) {
            traj.overflow = Some(format!("coordinate {ax} = {} left the domain at t = {t_next}", q[ax]));
            traj.times.push(t_next);
            traj.configs.push(q);
            if let Some(s) = sign_of(mode) {
                traj.lambda_signs.push(s);
            }
            break;
        }
        if (k + 1) % stride == 0 || k + 1 == n {
            traj.times.push(t_next);
            traj.configs.push(q);
            if let Some(s) = sign_of(mode) {
                traj.lambda_signs.push(s);
            }
        }
    }
    traj.node_events = stepper.node_events;
    traj.stalled_steps = stepper.stalled;
    Ok(traj)
}

/// Inverse-CDF sampler of a grid density through its marginal–conditional
/// factorization; configurations are uniform within the chosen cell.
#[derive(Debug, Clone)]
pub struct GridSampler {
    axes: Vec<Axis>,
    row_cdf: Vec<f64>,
    cond_cdf: Vec<f64>,
    n1: usize,
}

impl GridSampler {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    pub fn new(psi: &WaveFunction) -> Result<Self> {
        let norm = psi.norm_squared();
        if (norm - 1.0).abs() > Self::NORM_TOLERANCE {
            return Err(Error::InvalidParameter(format!("sampling density has norm {norm}, expected 1")));
        }
        Self::from_density(psi.axes(), &psi.density())
    }

    /// Unnormalized weights are accepted here; they are normalized internally.
    pub fn from_density(axes: &[Axis], rho: &[f64]) -> Result<Self> {
        let n0 = axes[0].n;
        let n1 = axes.get(1).map_or(1, |a| a.n);
        if rho.len() != n0 * n1 || rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidParameter("density must be finite, non-negative and match the grid".into()));
        }
        let mut row_cdf = Vec::with_capacity(n0);
        let mut cond_cdf = Vec::with_capacity(n0 * n1);
        let mut acc = 0.0;
        for i in 0..n0 {
            let row = &rho[i * n1..(i + 1) * n1];
            let mut c = 0.0;
            for &r in row {
                c += r;
                cond_cdf.push(c);
            }
            if c > 0.0 {
                for v in &mut cond_cdf[i * n1..] {
                    *v /= c;
                }
            }
            acc += c;
            row_cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::Degenerate("sampling density is identically zero".into()));
        }
        for v in &mut row_cdf {
            *v /= acc;
        }
        Ok(Self { axes: axes.to_vec(), row_cdf, cond_cdf, n1 })
    }

    fn pick(cdf: &[f64], u: f64) -> usize {
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let i = Self::pick(&self.row_cdf, rng.random::<f64>());
        let j = Self::pick(&self.cond_cdf[i * self.n1..(i + 1) * self.n1], rng.random::<f64>());
        let a0 = &self.axes[0];
        let x0 = a0.wrap(a0.node(i) + (rng.random::<f64>() - 0.5) * a0.spacing());
        let x1 = match self.axes.get(1) {
            Some(a1) => a1.wrap(a1.node(j) + (rng.random::<f64>() - 0.5) * a1.spacing()),
            None => 0.0,
        };
        [x0, x1]
    }
}

pub fn sample_initial_ensemble<R: Rng + ?Sized>(density: &WaveFunction, n: usize, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    let sampler = GridSampler::new(density)?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

/// Piecewise-linear CDF of one marginal of a grid density.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub axis: Axis,
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl Marginal {
    pub fn from_wave(psi: &WaveFunction, which: usize) -> Result<Self> {
        let axis = *psi
            .axes()
            .get(which)
            .ok_or_else(|| Error::InvalidParameter(format!("no axis {which}")))?;
        let (n0, n1) = psi.shape();
        let rho = psi.density();
        let m: Vec<f64> = if which == 0 {
            (0..n0).map(|i| rho[i * n1..(i + 1) * n1].iter().sum()).collect()
        } else {
            (0..n1).map(|j| (0..n0).map(|i| rho[i * n1 + j]).sum()).collect()
        };
        Self::from_values(axis, &m)
    }

    pub fn from_values(axis: Axis, m: &[f64]) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(m.len() + 2);
        if axis.is_periodic() {
            pts.extend(m.iter().enumerate().map(|(i, &v)| (axis.node(i), v)));
            pts.push((axis.max, m[0]));
        } else {
            pts.push((axis.min, m[0]));
            pts.extend(m.iter().enumerate().map(|(i, &v)| (axis.node(i), v)));
            pts.push((axis.max, m[m.len() - 1]));
        }
        let mut cdf = vec![0.0];
        for w in pts.windows(2) {
            let last = *cdf.last().expect("non-empty");
            cdf.push(last + 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0));
        }
        let total = *cdf.last().expect("non-empty");
        if !(total > 0.0) {
            return Err(Error::Degenerate("marginal density is zero".into()));
        }
        for c in &mut cdf {
            *c /= total;
        }
        Ok(Self { axis, xs: pts.into_iter().map(|p| p.0).collect(), cdf })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let x = self.axis.wrap(x);
        if x <= self.xs[0] {
            return 0.0;
        }
        if x >= *self.xs.last().expect("non-empty") {
            return 1.0;
        }
        let k = self.xs.partition_point(|&v| v <= x);
        let (x0, x1) = (self.xs[k - 1], self.xs[k]);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        c0 + (c1 - c0) * (x - x0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalFit {
    pub axis: usize,
    pub chi2: ChiSquareTest,
    pub ks: KsTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub n: usize,
    pub n_bins: usize,
    pub marginals: Vec<MarginalFit>,
}

impl EquivarianceReport {
    pub fn min_chi2_p(&self) -> f64 {
        self.marginals.iter().map(|m| m.chi2.p_value).fold(1.0, f64::min)
    }

    pub fn min_ks_p(&self) -> f64 {
        self.marginals.iter().map(|m| m.ks.p_value).fold(1.0, f64::min)
    }
}

/// χ² over `n_bins` equiprobable bins of each reference marginal, plus KS.
pub fn equivariance_report(configs: &[[f64; 2]], reference: &[Marginal], n_bins: usize) -> EquivarianceReport {
    let marginals = reference
        .iter()
        .enumerate()
        .map(|(ax, m)| {
            let xs: Vec<f64> = configs.iter().map(|q| q[ax]).collect();
            let mut counts = vec![0u64; n_bins];
            for &x in &xs {
                let b = ((m.cdf(x) * n_bins as f64).floor() as usize).min(n_bins - 1);
                counts[b] += 1;
            }
            let probs = vec![1.0 / n_bins as f64; n_bins];
            MarginalFit { axis: ax, chi2: chi_square(&counts, &probs), ks: ks_test(&xs, |x| m.cdf(x)) }
        })
        .collect();
    EquivarianceReport { n: configs.len(), n_bins, marginals }
}

/// Final configurations of a set of trajectories that stayed in the domain.
pub fn final_configs(trajs: &[Trajectory]) -> Vec<[f64; 2]> {
    trajs.iter().filter(|t| t.overflow.is_none()).map(Trajectory::end).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::rng::stream;
    use crate::spectral::{AngularBasis, GaussianPacket};
    use crate::stochastics::sample_sign_path;
    use std::f64::consts::PI;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn field(coeffs: &[(i32, Complex64)], sigma: f64) -> VelocityField<SpectralSource> {
        let state = SpectralState::new(AngularBasis::new(8), coeffs, GaussianPacket::new(0.0, sigma), (-4.0, 4.0)).unwrap();
        VelocityField::new(SpectralSource::new(state, 1.0).unwrap(), Coupling::Measurement { g: 1.0 }, 1.0)
    }

    fn run(spec: &EnsembleSpec, duration: f64) -> TrajectoryRun<'_> {
        TrajectoryRun { spec, sign_path: None, duration, record_stride: 1, seed: 0, trial: 0 }
    }

    #[test]
    fn single_mode_pointer_drift() {
        let f = field(&[(2, c(1.0))], 0.05);
        // packet centre sits at q₂ = 0.8 by t = 0.4
        for q in [[0.3, 0.8], [4.0, 0.87], [1.0, 0.7]] {
            let v = f.effective_velocity(0.4, q).unwrap();
            assert!((v[1] - 2.0).abs() < 1e-12 && v[0].abs() < 1e-12);
        }
        let spec = EnsembleSpec::default();
        let traj = integrate_trajectory([1.0, 0.02], &f, &run(&spec, 1.0)).unwrap();
        assert!((traj.end()[1] - traj.start()[1] - 2.0).abs() < 1e-6);
        assert_eq!(traj.times.len(), 1001);
    }

    #[test]
    fn real_wavefunction_has_no_effective_velocity() {
        let axis = Axis::line(-3.0, 3.0, 64).unwrap();
        let psi = WaveFunction::from_fn_2d(axis, axis, |x, y| c((-(x * x) - y * y).exp()));
        let f = VelocityField::new(GridSource::new(&psi), Coupling::Measurement { g: 1.0 }, 1.0);
        let v = f.effective_velocity(0.0, [0.3, -0.2]).unwrap();
        assert!(v[0].abs() < 1e-14 && v[1].abs() < 1e-14);
        let spec = EnsembleSpec::default();
        let traj = integrate_trajectory([0.3, -0.2], &f, &run(&spec, 0.1)).unwrap();
        assert_eq!(traj.end(), [0.3, -0.2]);
    }

    #[test]
    fn two_mode_velocity_matches_phase_difference_oracle() {
        let w = 0.5f64.sqrt();
        let f = field(&[(-1, c(w)), (1, Complex64::new(0.0, w))], 0.3);
        let s = &f.source.state;
        let t = 0.2;
        let h = 1e-5;
        let arg = |x: f64, q: f64| s.eval_after(t, 1.0, x, q).0.arg();
        let dphase = |a: f64, b: f64| {
            let d = a - b;
            d - 2.0 * PI * (d / (2.0 * PI)).round()
        };
        for &(x, q) in &[(0.4, 0.1), (1.3, -0.2), (2.9, 0.05), (5.0, 0.3)] {
            let v = f.effective_velocity(t, [x, q]).unwrap();
            let ds_dx = dphase(arg(x + h, q), arg(x - h, q)) / (2.0 * h);
            let ds_dq = dphase(arg(x, q + h), arg(x, q - h)) / (2.0 * h);
            assert!((v[1] - ds_dx).abs() < 1e-6, "{} vs {}", v[1], ds_dx);
            assert!((v[0] - ds_dq).abs() < 1e-6);
        }
    }

    #[test]
    fn sign_average_is_effective_and_osmotic_matches_gaussian() {
        let sigma = 0.2;
        let f = field(&[(0, c(1.0))], sigma);
        let q = [1.1, 0.13];
        let e = f.effective_velocity(0.0, q).unwrap();
        let p = f.actual_velocity(0.0, q, 1.0).unwrap();
        let m = f.actual_velocity(0.0, q, -1.0).unwrap();
        for k in 0..2 {
            assert!((0.5 * (p[k] + m[k]) - e[k]).abs() < 1e-14);
        }
        // (λ/2) ∂_{q₂} ln Ω = −λ (q₂ − μ) / (2σ²), routed into θ̇ by the coupling
        assert!((p[0] - e[0] + 0.13 / (2.0 * sigma * sigma)).abs() < 1e-8);
        let small = f.actual_velocity(0.0, q, 1e-9).unwrap();
        assert!((small[0] - e[0]).abs() < 1e-7);
    }

    #[test]
    fn midpoint_and_rk4_converge() {
        let w = 0.5f64.sqrt();
        let f = field(&[(0, c(w)), (1, c(w))], 0.4);
        let end = |integrator, dt| {
            let spec = EnsembleSpec { dt_traj: dt, integrator, ..EnsembleSpec::default() };
            integrate_trajectory([0.7, 0.1], &f, &run(&spec, 0.5)).unwrap().end()
        };
        for (integ, order) in [(Integrator::ExplicitMidpoint, 2.0), (Integrator::Rk4, 4.0)] {
            let a = end(integ, 1e-2);
            let b = end(integ, 5e-3);
            let c2 = end(integ, 2.5e-3);
            let ratio = (a[0] - b[0]).hypot(a[1] - b[1]) / (b[0] - c2[0]).hypot(b[1] - c2[1]);
            assert!((ratio.log2() - order).abs() < 0.5, "{integ:?}: ratio {ratio}");
        }
    }

    #[test]
    fn actual_run_records_signs_and_stays_off_nodes() {
        let w = 0.5f64.sqrt();
        let f = field(&[(0, c(w)), (1, c(w))], 0.3);
        let params = StochasticParams::default();
        let mut rng = stream(3, 0);
        let path = sample_sign_path(&params, 1000, &mut rng).unwrap();
        let spec = EnsembleSpec::default();
        let r = TrajectoryRun { sign_path: Some(&path), record_stride: 10, ..run(&spec, 1.0) };
        let traj = integrate_trajectory([0.2, 0.0], &f, &r).unwrap();
        assert_eq!(traj.lambda_signs.len(), traj.times.len());
        assert!(traj.lambda_signs.iter().all(|s| s.abs() == 1));
        for (t, q) in traj.times.iter().zip(&traj.configs) {
            assert!(!f.is_node(*t, *q));
        }
    }

    #[test]
    fn overflow_is_recorded() {
        let state = SpectralState::new(AngularBasis::new(2), &[(2, c(1.0))], GaussianPacket::new(0.0, 0.05), (-0.5, 2.5)).unwrap();
        let f = VelocityField::new(SpectralSource::new(state, 1.0).unwrap(), Coupling::Measurement { g: 1.0 }, 1.0);
        let spec = EnsembleSpec::default();
        let traj = integrate_trajectory([0.0, 0.0], &f, &run(&spec, 2.0)).unwrap();
        assert!(traj.overflow.is_some());
        assert!(traj.end()[1] > 2.5);
    }

    #[test]
    fn sampler_reproduces_uniform_and_product_laws() {
        let ring = Axis::ring(128).unwrap();
        let uniform = WaveFunction::from_fn_1d(ring, |_| c((2.0 * PI).powf(-0.5)));
        let mut rng = stream(11, 0);
        let xs = sample_initial_ensemble(&uniform, 10_000, &mut rng).unwrap();
        let ks = ks_test(&xs.iter().map(|q| q[0]).collect::<Vec<_>>(), |x| x / (2.0 * PI));
        assert!(ks.p_value > 0.01);

        let grid = GridSpec::new(64, -3.0, 3.0, 512).unwrap();
        let sigma: f64 = 0.4;
        let prod = WaveFunction::from_fn_2d(grid.theta_axis(), grid.q2_axis(), |_, q| {
            c((2.0 * PI).powf(-0.5) * (2.0 * PI * sigma * sigma).powf(-0.25) * (-q * q / (4.0 * sigma * sigma)).exp())
        });
        let xs = sample_initial_ensemble(&prod, 10_000, &mut stream(12, 0)).unwrap();
        let normal = statrs::distribution::Normal::new(0.0, sigma).unwrap();
        use statrs::distribution::ContinuousCDF;
        assert!(ks_test(&xs.iter().map(|q| q[1]).collect::<Vec<_>>(), |x| normal.cdf(x)).p_value > 0.01);
        assert!(ks_test(&xs.iter().map(|q| q[0]).collect::<Vec<_>>(), |x| x / (2.0 * PI)).p_value > 0.01);
        let again = sample_initial_ensemble(&prod, 10_000, &mut stream(12, 0)).unwrap();
        assert_eq!(xs, again);
        assert!(sample_initial_ensemble(&prod.scale(c(2.0)), 1, &mut rng).is_err());
    }

    #[test]
    fn marginal_cdf_of_uniform_ring() {
        let ring = Axis::ring(32).unwrap();
        let m = Marginal::from_values(ring, &[1.0; 32]).unwrap();
        for x in [0.0, 1.0, 3.0, 6.0] {
            assert!((m.cdf(x) - x / (2.0 * PI)).abs() < 1e-12);
        }
    }

    #[test]
    fn hierarchy_rejects_coarse_trajectory_step() {
        let spec = EnsembleSpec { dt_traj: 5e-3, ..EnsembleSpec::default() };
        assert!(matches!(spec.validate(&StochasticParams::default()), Err(Error::Configuration { .. })));
        assert!(EnsembleSpec::default().validate(&StochasticParams::default()).is_ok());
    }
}
