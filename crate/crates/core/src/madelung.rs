//! Hydrodynamic (Madelung) form of the modified Schrödinger equation:
//! the continuity equation, the modified Hamilton–Jacobi equation and its
//! `λ²`-scaled quantum potential, evaluated by fourth-order finite differences.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Axis;
use crate::system::MetricPotentialSystem;
use crate::wavefunction::{compose_polar, PolarFields, WaveFunction};

/// Relative density below which residual diagnostics skip a point.
pub const RESIDUAL_NODE_EPS: f64 = 1e-10;

/// Grid field with a validity mask; boundary rows and nodes are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedField {
    pub axes: Vec<Axis>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl MaskedField {
    pub fn excluded(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    /// Quadrature L2 norm over valid points.
    pub fn l2(&self) -> f64 {
        let s: f64 = self.iter_valid().map(|(_, v)| v * v).sum();
        (s * self.cell_volume()).sqrt()
    }

    /// `(∫ w f²)^{1/2}` over valid points.
    pub fn weighted_l2(&self, weights: &[f64]) -> f64 {
        let s: f64 = self.iter_valid().map(|(k, v)| weights[k] * v * v).sum();
        (s * self.cell_volume()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_valid().map(|(_, v)| v.abs()).fold(0.0, f64::max)
    }

    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().zip(&self.valid).enumerate().filter(|(_, (_, ok))| **ok).map(|(k, (v, _))| (k, *v))
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        self.valid[k].then(|| self.values[k])
    }
}

/// Index arithmetic and fourth-order stencils on a 1-D or 2-D tensor grid.
#[derive(Debug, Clone)]
pub struct Stencils {
    axes: Vec<Axis>,
    shape: [usize; 2],
}

const D1: [f64; 5] = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
const D2: [f64; 5] = [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0];

impl Stencils {
    pub fn new(axes: &[Axis]) -> Self {
        Self { axes: axes.to_vec(), shape: [axes[0].n, axes.get(1).map_or(1, |a| a.n)] }
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        let (i, j) = (k / self.shape[1], k % self.shape[1]);
        let y = self.axes.get(1).map_or(0.0, |a| a.node(j));
        [self.axes[0].node(i), y]
    }

    fn shift(&self, k: usize, ax: usize, s: isize) -> Option<usize> {
        let (i, j) = (k / self.shape[1], k % self.shape[1]);
        let (pos, n) = if ax == 0 { (i, self.shape[0]) } else { (j, self.shape[1]) };
        let target = pos as isize + s;
        let idx = if (0..n as isize).contains(&target) {
            target as usize
        } else if self.axes[ax].is_periodic() {
            target.rem_euclid(n as isize) as usize
        } else {
            return None;
        };
        Some(if ax == 0 { idx * self.shape[1] + j } else { i * self.shape[1] + idx })
    }

    fn apply(&self, f: &[Complex64], valid: &[bool], ax: usize, weights: &[f64; 5], scale: f64) -> (Vec<Complex64>, Vec<bool>) {
        let mut out = vec![Complex64::new(0.0, 0.0); f.len()];
        let mut ok = vec![false; f.len()];
        for k in 0..f.len() {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut good = true;
            for (s, w) in (-2..=2).zip(weights) {
                match self.shift(k, ax, s) {
                    Some(m) if valid[m] => acc += f[m] * *w,
                    _ => {
                        good = false;
                        break;
                    }
                }
            }
            if good {
                out[k] = acc * scale;
                ok[k] = true;
            }
        }
        (out, ok)
    }

    /// `∂_ax f`, valid where the full five-point stencil is valid.
    pub fn d1(&self, f: &[Complex64], valid: &[bool], ax: usize) -> (Vec<Complex64>, Vec<bool>) {
        self.apply(f, valid, ax, &D1, 1.0 / self.axes[ax].spacing())
    }

    pub fn d2(&self, f: &[Complex64], valid: &[bool], ax: usize) -> (Vec<Complex64>, Vec<bool>) {
        let h = self.axes[ax].spacing();
        self.apply(f, valid, ax, &D2, 1.0 / (h * h))
    }

    pub fn d1_real(&self, f: &[f64], valid: &[bool], ax: usize) -> (Vec<f64>, Vec<bool>) {
        let c: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let (d, ok) = self.d1(&c, valid, ax);
        (d.iter().map(|z| z.re).collect(), ok)
    }

    pub fn d2_real(&self, f: &[f64], valid: &[bool], ax: usize) -> (Vec<f64>, Vec<bool>) {
        let c: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let (d, ok) = self.d2(&c, valid, ax);
        (d.iter().map(|z| z.re).collect(), ok)
    }
}

fn and(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && *y).collect()
}

/// Metric `g^{ij}` and its divergence `∂_i g^{ij}` sampled at grid nodes.
struct MetricSamples {
    g: Vec<[[f64; 2]; 2]>,
    div: [Vec<f64>; 2],
    div_valid: Vec<bool>,
}

fn sample_metric(st: &Stencils, sys: &MetricPotentialSystem) -> MetricSamples {
    let n = st.len();
    let g: Vec<[[f64; 2]; 2]> = (0..n).map(|k| sys.metric_at(&st.point(k))).collect();
    let all = vec![true; n];
    let dim = sys.dim;
    let mut div = [vec![0.0; n], vec![0.0; n]];
    let mut div_valid = all.clone();
    for (j, dj) in div.iter_mut().enumerate().take(dim) {
        for i in 0..dim {
            let col: Vec<f64> = g.iter().map(|m| m[i][j]).collect();
            let (d, ok) = st.d1_real(&col, &all, i);
            for k in 0..n {
                dj[k] += d[k];
            }
            div_valid = and(&div_valid, &ok);
        }
    }
    MetricSamples { g, div, div_valid }
}

fn log_amplitude(r: &[f64], mask: &[bool]) -> (Vec<f64>, Vec<bool>) {
    let valid: Vec<bool> = r.iter().zip(mask).map(|(&r, &m)| !m && r > 0.0).collect();
    let ln: Vec<f64> = r.iter().zip(&valid).map(|(&r, &ok)| if ok { r.ln() } else { 0.0 }).collect();
    (ln, valid)
}

/// `Q = −(λ²/2)[g^{ij}(∂_i∂_j ln R + ∂_i ln R ∂_j ln R) + ∂_i g^{ij} ∂_j ln R]`
/// `  = −(λ²/2)(g^{ij}∂_i∂_jR + ∂_ig^{ij}∂_jR)/R`.
pub fn quantum_potential(fields: &PolarFields, sys: &MetricPotentialSystem, lambda_mag: f64) -> Result<MaskedField> {
    quantum_potential_of(&fields.axes, &fields.r, &fields.node_mask, sys, lambda_mag)
}

fn quantum_potential_of(axes: &[Axis], r: &[f64], mask: &[bool], sys: &MetricPotentialSystem, lambda_mag: f64) -> Result<MaskedField> {
    if axes.len() != sys.dim {
        return Err(Error::InvalidParameter(format!("{}-D system on {}-D fields", sys.dim, axes.len())));
    }
    let st = Stencils::new(axes);
    let n = st.len();
    let (ln_r, base) = log_amplitude(r, mask);
    let metric = sample_metric(&st, sys);
    let dim = sys.dim;

    let mut grad = Vec::new();
    let mut valid = and(&base, &metric.div_valid);
    for ax in 0..dim {
        let (d, ok) = st.d1_real(&ln_r, &base, ax);
        valid = and(&valid, &ok);
        grad.push((d, ok));
    }
    let mut hess = vec![vec![vec![0.0; n]; dim]; dim];
    for i in 0..dim {
        let (d, ok) = st.d2_real(&ln_r, &base, i);
        valid = and(&valid, &ok);
        hess[i][i] = d;
        for j in (i + 1)..dim {
            let (dij, okij) = st.d1_real(&grad[j].0, &grad[j].1, i);
            valid = and(&valid, &okij);
            hess[i][j] = dij.clone();
            hess[j][i] = dij;
        }
    }

    let pref = -0.5 * lambda_mag * lambda_mag;
    let values = (0..n)
        .map(|k| {
            if !valid[k] {
                return 0.0;
            }
            let g = metric.g[k];
            let mut acc = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    acc += g[i][j] * (hess[i][j][k] + grad[i].0[k] * grad[j].0[k]);
                }
                acc += metric.div[i][k] * grad[i].0[k];
            }
            pref * acc
        })
        .collect();
    Ok(MaskedField { axes: axes.to_vec(), values, valid })
}

/// `∂_i S` and `∂_i ln Ω` on the grid, from complex differences of `ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub axes: Vec<Axis>,
    pub ds: Vec<[f64; 2]>,
    pub dln_omega: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

pub fn gradients(fields: &PolarFields, lambda_mag: f64) -> Gradients {
    let psi = compose_polar(fields, lambda_mag);
    gradients_of(&psi, &fields.node_mask, lambda_mag)
}

fn gradients_of(psi: &WaveFunction, mask: &[bool], lambda_mag: f64) -> Gradients {
    let st = Stencils::new(psi.axes());
    let n = st.len();
    let base: Vec<bool> = mask.iter().map(|m| !m).collect();
    let a = psi.amplitudes();
    let mut ds = vec![[0.0; 2]; n];
    let mut dl = vec![[0.0; 2]; n];
    let mut valid = base.clone();
    for ax in 0..psi.dim() {
        let (d, ok) = st.d1(a, &vec![true; n], ax);
        valid = and(&valid, &ok);
        for k in 0..n {
            let rho = a[k].norm_sqr();
            if rho > 0.0 {
                let w = a[k].conj() * d[k];
                ds[k][ax] = lambda_mag * w.im / rho;
                dl[k][ax] = 2.0 * w.re / rho;
            }
        }
    }
    Gradients { axes: psi.axes().to_vec(), ds, dln_omega: dl, valid }
}

/// Residual norms of the hydrodynamic pair evaluated on an evolved `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct HjmResidual {
    /// `‖∂ₜΩ + ∂_i j^i‖₂`, `j^i = g^{ij}(|λ| Im(ψ*∂_jψ) − a_j Ω)`.
    pub continuity: f64,
    /// Ω-weighted norm of `∂ₜS + ½(∂S − a)g(∂S − a) + V + Q`.
    pub hjm: f64,
    /// The same with `Q` dropped.
    pub hjm_without_quantum: f64,
    /// Largest count of excluded points over the evaluated time levels.
    pub excluded: usize,
}

/// Residuals at the interior snapshots of a history with spacing `dt`; the
/// reported norms are maxima over time levels.
pub fn verify_hjm_residual(history: &[WaveFunction], dt: f64, sys: &MetricPotentialSystem, lambda_mag: f64) -> Result<HjmResidual> {
    if history.len() < 3 {
        return Err(Error::InvalidParameter("residuals need at least three snapshots".into()));
    }
    let mut out = HjmResidual { continuity: 0.0, hjm: 0.0, hjm_without_quantum: 0.0, excluded: 0 };
    for w in history.windows(3) {
        let r = residual_at(&w[0], &w[1], &w[2], dt, sys, lambda_mag)?;
        out.continuity = out.continuity.max(r.continuity);
        out.hjm = out.hjm.max(r.hjm);
        out.hjm_without_quantum = out.hjm_without_quantum.max(r.hjm_without_quantum);
        out.excluded = out.excluded.max(r.excluded);
    }
    Ok(out)
}

fn residual_at(
    prev: &WaveFunction,
    cur: &WaveFunction,
    next: &WaveFunction,
    dt: f64,
    sys: &MetricPotentialSystem,
    lambda_mag: f64,
) -> Result<HjmResidual> {
    if prev.axes() != cur.axes() || next.axes() != cur.axes() {
        return Err(Error::InvalidParameter("snapshots live on different grids".into()));
    }
    let axes = cur.axes();
    let st = Stencils::new(axes);
    let n = st.len();
    let dim = cur.dim();
    let omega = cur.density();
    let peak = omega.iter().copied().fold(0.0, f64::max);
    let mask: Vec<bool> = omega.iter().map(|&o| o < RESIDUAL_NODE_EPS * peak).collect();
    let metric = sample_metric(&st, sys);
    let grads = gradients_of(cur, &mask, lambda_mag);

    // continuity, with the current built without dividing by Ω
    let a = cur.amplitudes();
    let all = vec![true; n];
    let mut dpsi = Vec::new();
    let mut dvalid = all.clone();
    for ax in 0..dim {
        let (d, ok) = st.d1(a, &all, ax);
        dvalid = and(&dvalid, &ok);
        dpsi.push(d);
    }
    let vec_pot: Vec<[f64; 2]> = (0..n).map(|k| sys.vector_at(&st.point(k))).collect();
    let mut div = vec![0.0; n];
    let mut cont_valid = dvalid.clone();
    for i in 0..dim {
        let flux: Vec<f64> = (0..n)
            .map(|k| {
                let mut acc = 0.0;
                for j in 0..dim {
                    let cur_j = lambda_mag * (a[k].conj() * dpsi[j][k]).im - vec_pot[k][j] * omega[k];
                    acc += metric.g[k][i][j] * cur_j;
                }
                acc
            })
            .collect();
        let (d, ok) = st.d1_real(&flux, &dvalid, i);
        cont_valid = and(&cont_valid, &ok);
        for k in 0..n {
            div[k] += d[k];
        }
    }
    let (op, on) = (prev.density(), next.density());
    let cont = MaskedField {
        axes: axes.to_vec(),
        values: (0..n).map(|k| (on[k] - op[k]) / (2.0 * dt) + div[k]).collect(),
        valid: cont_valid,
    };

    // modified Hamilton–Jacobi
    let r: Vec<f64> = omega.iter().map(|o| o.sqrt()).collect();
    let q = quantum_potential_of(axes, &r, &mask, sys, lambda_mag)?;
    let (pa, na) = (prev.amplitudes(), next.amplitudes());
    let mut with_q = vec![0.0; n];
    let mut without_q = vec![0.0; n];
    let mut valid = and(&q.valid, &grads.valid);
    for k in 0..n {
        if !valid[k] {
            continue;
        }
        if pa[k].norm_sqr() < RESIDUAL_NODE_EPS * peak || na[k].norm_sqr() < RESIDUAL_NODE_EPS * peak {
            valid[k] = false;
            continue;
        }
        let x = st.point(k);
        let dts = lambda_mag * (na[k] * pa[k].conj()).arg() / (2.0 * dt);
        let g = metric.g[k];
        let mut kin = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                kin += 0.5 * (grads.ds[k][i] - vec_pot[k][i]) * g[i][j] * (grads.ds[k][j] - vec_pot[k][j]);
            }
        }
        let base = dts + kin + sys.potential_at(&x);
        without_q[k] = base;
        with_q[k] = base + q.values[k];
    }
    let hjm = MaskedField { axes: axes.to_vec(), values: with_q, valid: valid.clone() };
    let hjm0 = MaskedField { axes: axes.to_vec(), values: without_q, valid };
    Ok(HjmResidual {
        continuity: cont.l2(),
        hjm: hjm.weighted_l2(&omega),
        hjm_without_quantum: hjm0.weighted_l2(&omega),
        excluded: hjm.excluded().max(cont.excluded()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::build_metric_hamiltonian;
    use crate::propagate::{evolve_history, ground_state};
    use crate::wavefunction::polar_decompose;
    use std::f64::consts::PI;

    fn ground(axis: Axis) -> WaveFunction {
        WaveFunction::from_fn_1d(axis, |x| Complex64::new(PI.powf(-0.25) * (-0.5 * x * x).exp(), 0.0))
    }

    #[test]
    fn fourth_order_derivatives() {
        let axis = Axis::periodic(0.0, 2.0 * PI, 64).unwrap();
        let st = Stencils::new(&[axis]);
        let f: Vec<f64> = axis.nodes().iter().map(|x| x.sin()).collect();
        let all = vec![true; 64];
        let (d, ok) = st.d1_real(&f, &all, 0);
        let (dd, _) = st.d2_real(&f, &all, 0);
        assert!(ok.iter().all(|b| *b));
        let h = axis.spacing();
        for (k, x) in axis.nodes().iter().enumerate() {
            assert!((d[k] - x.cos()).abs() < h.powi(4));
            assert!((dd[k] + x.sin()).abs() < h.powi(4));
        }
        let line = Axis::line(0.0, 1.0, 20).unwrap();
        let (_, ok) = Stencils::new(&[line]).d1_real(&[0.0; 20], &[true; 20], 0);
        assert_eq!(ok.iter().filter(|b| !**b).count(), 4);
    }

    #[test]
    fn constant_amplitude_has_no_quantum_potential() {
        let axis = Axis::line(-3.0, 3.0, 64).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |x| Complex64::from_polar(0.4, x));
        let f = polar_decompose(&psi, 1.0).unwrap();
        let q = quantum_potential(&f, &MetricPotentialSystem::flat(1), 1.0).unwrap();
        assert!(q.max_abs() < 1e-12);
    }

    #[test]
    fn quantum_potential_scales_with_lambda_squared() {
        let axis = Axis::line(-5.0, 5.0, 128).unwrap();
        let f = polar_decompose(&ground(axis), 1.0).unwrap();
        let sys = MetricPotentialSystem::flat(1).with_metric(&["1 + 0.1*sin(x)"]).unwrap();
        let a = quantum_potential(&f, &sys, 1.0).unwrap();
        let b = quantum_potential(&f, &sys, 0.5).unwrap();
        for ((_, x), (_, y)) in a.iter_valid().zip(b.iter_valid()) {
            assert!((y - 0.25 * x).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn stationary_madelung_balance() {
        let axis = Axis::line(-7.0, 7.0, 512).unwrap();
        let f = polar_decompose(&ground(axis), 1.0).unwrap();
        let sys = MetricPotentialSystem::harmonic(1);
        let q = quantum_potential(&f, &sys, 1.0).unwrap();
        for (k, v) in q.iter_valid() {
            let x = axis.node(k);
            assert!((v + 0.5 * x * x - 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn two_dimensional_metric_divergence_term() {
        // R = exp(-x²/2 - y²/2), metric diag(1 + 0.1 x, 1): the divergence term is 0.1 ∂ₓ ln R = -0.1 x.
        let ax = Axis::line(-4.0, 4.0, 96).unwrap();
        let psi = WaveFunction::from_fn_2d(ax, ax, |x, y| Complex64::new((-0.5 * (x * x + y * y)).exp(), 0.0));
        let f = polar_decompose(&psi, 1.0).unwrap();
        let sys = MetricPotentialSystem::flat(2).with_metric(&["1 + 0.1*x", "0.05", "1"]).unwrap();
        let q = quantum_potential(&f, &sys, 1.0).unwrap();
        let st = Stencils::new(&[ax, ax]);
        for (k, v) in q.iter_valid() {
            let [x, y] = st.point(k);
            let g11 = 1.0 + 0.1 * x;
            let lap = g11 * (x * x - 1.0) + (y * y - 1.0) + 2.0 * 0.05 * x * y;
            let oracle = -0.5 * (lap - 0.1 * x);
            assert!((v - oracle).abs() < 1e-8, "{v} vs {oracle}");
        }
    }

    #[test]
    fn residuals_of_stationary_state() {
        let axis = Axis::line(-8.0, 8.0, 256).unwrap();
        let sys = MetricPotentialSystem::harmonic(1);
        let op = build_metric_hamiltonian(&sys, 1.0, &[axis]).unwrap();
        let (psi0, _) = ground_state(&op, &ground(axis), 0.0, 1e-12).unwrap();
        let hist = evolve_history(&psi0, &op, 1e-3, 4, 1).unwrap();
        let r = verify_hjm_residual(&hist, 1e-3, &sys, 1.0).unwrap();
        assert!(r.continuity < 1e-6, "{r:?}");
        assert!(r.hjm_without_quantum > 100.0 * r.hjm, "{r:?}");
    }

    fn coherent_residual(n: usize, dt: f64) -> HjmResidual {
        let axis = Axis::line(-8.0, 8.0, n).unwrap();
        let sys = MetricPotentialSystem::harmonic(1);
        let op = build_metric_hamiltonian(&sys, 1.0, &[axis]).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |x| Complex64::new(PI.powf(-0.25) * (-0.5 * (x - 1.0).powi(2)).exp(), 0.0));
        let steps = (0.5 / dt).round() as usize;
        let hist = evolve_history(&psi, &op, dt, steps + 1, 1).unwrap();
        verify_hjm_residual(&hist[steps - 1..=steps + 1], dt, &sys, 1.0).unwrap()
    }

    #[test]
    fn coherent_state_residuals_converge_at_second_order() {
        let coarse = coherent_residual(256, 1e-3);
        let fine = coherent_residual(512, 5e-4);
        let rc = coarse.continuity / fine.continuity;
        let rh = coarse.hjm / fine.hjm;
        assert!((3.5..4.5).contains(&rc), "continuity ratio {rc} ({coarse:?} / {fine:?})");
        assert!((3.5..4.5).contains(&rh), "hjm ratio {rh} ({coarse:?} / {fine:?})");
        assert!(coarse.hjm_without_quantum > 100.0 * coarse.hjm);
    }
}
