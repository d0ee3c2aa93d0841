//! Sparse grid Hamiltonians for a particle in metric, vector and scalar potentials.
//!
//! The kinetic term is assembled as a quadratic form `½ Σ (Dψ)† g (Dψ)`,
//! where `D` discretizes `p̂ − a = −i|λ|∂ − a` on staggered points. Vector
//! potentials enter as link phases `exp(−i a h / |λ|)`, so constant `a` is an
//! exact lattice gauge transform. Diagonal metric entries live on the links
//! between neighbouring nodes, the off-diagonal entry on cell corners with
//! averaged gradients. Because every term has the form `A† g B + B† g A`
//! the assembled matrix is Hermitian for any metric field. Line axes carry
//! homogeneous Dirichlet conditions (zero ghost nodes), periodic axes wrap.

use num_complex::Complex64;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::Axis;
use crate::system::MetricPotentialSystem;
use crate::wavefunction::WaveFunction;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Sparse operator acting on row-major grid fields.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOperator {
    axes: Vec<Axis>,
    lambda_mag: f64,
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl GridOperator {
    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn lambda_mag(&self) -> f64 {
        self.lambda_mag
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<(usize, Complex64)>] {
        &self.rows
    }

    pub fn entry(&self, r: usize, c: usize) -> Complex64 {
        self.rows[r]
            .binary_search_by_key(&c, |&(j, _)| j)
            .map_or(Complex64::new(0.0, 0.0), |k| self.rows[r][k].1)
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows.iter().map(|row| row.iter().map(|&(j, h)| h * v[j]).sum()).collect()
    }

    pub fn apply_wave(&self, psi: &WaveFunction) -> Result<WaveFunction> {
        self.check_grid(psi)?;
        psi.with_amplitudes(self.apply(psi.amplitudes()))
    }

    pub fn check_grid(&self, psi: &WaveFunction) -> Result<()> {
        if psi.axes() != self.axes.as_slice() {
            return Err(Error::InvalidParameter("wavefunction grid differs from operator grid".into()));
        }
        Ok(())
    }

    /// `max |H_rc − conj(H_cr)|` over all stored entries.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, h) in row {
                worst = worst.max((h - self.entry(c, r).conj()).norm());
            }
        }
        worst
    }

    /// `⟨ψ|H|ψ⟩ / ⟨ψ|ψ⟩`.
    pub fn expectation(&self, psi: &WaveFunction) -> Result<f64> {
        self.check_grid(psi)?;
        let hpsi = self.apply(psi.amplitudes());
        let num: Complex64 = psi.amplitudes().iter().zip(&hpsi).map(|(a, b)| a.conj() * b).sum();
        let den: f64 = psi.amplitudes().iter().map(|a| a.norm_sqr()).sum();
        if den == 0.0 {
            return Err(Error::Degenerate("energy of the zero field".into()));
        }
        Ok(num.re / den)
    }

    /// Gershgorin bound on the spectral radius.
    pub fn norm_bound(&self) -> f64 {
        self.rows.iter().map(|row| row.iter().map(|(_, h)| h.norm()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn diagonal(&self) -> Vec<Complex64> {
        (0..self.len()).map(|r| self.entry(r, r)).collect()
    }

    /// Tridiagonal bands `(lower, diag, upper)` when the operator couples only
    /// nearest neighbours on a one-dimensional line.
    pub fn tridiagonal(&self) -> Option<(Vec<Complex64>, Vec<Complex64>, Vec<Complex64>)> {
        if self.axes.len() != 1 || self.axes[0].is_periodic() {
            return None;
        }
        let n = self.len();
        let mut lower = vec![Complex64::new(0.0, 0.0); n];
        let mut diag = vec![Complex64::new(0.0, 0.0); n];
        let mut upper = vec![Complex64::new(0.0, 0.0); n];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, h) in row {
                match c as isize - r as isize {
                    -1 => lower[r] = h,
                    0 => diag[r] = h,
                    1 => upper[r] = h,
                    _ => return None,
                }
            }
        }
        Some((lower, diag, upper))
    }

    /// Row-major dense copy, for small reference computations.
    pub fn dense(&self) -> Vec<Complex64> {
        let n = self.len();
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, h) in row {
                out[r * n + c] = h;
            }
        }
        out
    }
}

struct Assembler {
    shape: [usize; 2],
    axes: Vec<Axis>,
    rows: Vec<BTreeMap<usize, Complex64>>,
}

/// One discrete directional derivative: weighted node values.
type Stencil = Vec<(usize, Complex64)>;

impl Assembler {
    fn new(axes: &[Axis]) -> Self {
        let shape = [axes[0].n, axes.get(1).map_or(1, |a| a.n)];
        Self { shape, axes: axes.to_vec(), rows: vec![BTreeMap::new(); shape[0] * shape[1]] }
    }

    /// Flat index of node `(i, j)`, `None` for a Dirichlet ghost.
    fn index(&self, i: isize, j: isize) -> Option<usize> {
        let wrap = |k: isize, ax: usize| -> Option<usize> {
            let n = self.shape[ax] as isize;
            let periodic = self.axes.get(ax).is_none_or(|a| a.is_periodic());
            if (0..n).contains(&k) {
                Some(k as usize)
            } else if periodic {
                Some(k.rem_euclid(n) as usize)
            } else {
                None
            }
        };
        Some(wrap(i, 0)? * self.shape[1] + wrap(j, 1)?)
    }

    fn coord(&self, ax: usize, k: f64) -> f64 {
        let a = &self.axes[ax];
        let h = a.spacing();
        match a.topology {
            crate::grid::Topology::Periodic => a.min + k * h,
            crate::grid::Topology::Line => a.min + (k + 0.5) * h,
        }
    }

    fn position(&self, i: f64, j: f64) -> [f64; 2] {
        let y = if self.axes.len() > 1 { self.coord(1, j) } else { 0.0 };
        [self.coord(0, i), y]
    }

    /// `(p̂_ax − a_ax) ψ` on the link leaving node `(i, j)` in direction `ax`.
    fn link(&self, sys: &MetricPotentialSystem, lambda: f64, ax: usize, i: isize, j: isize) -> Stencil {
        let h = self.axes[ax].spacing();
        let (ni, nj) = if ax == 0 { (i + 1, j) } else { (i, j + 1) };
        let mid = if ax == 0 { self.position(i as f64 + 0.5, j as f64) } else { self.position(i as f64, j as f64 + 0.5) };
        let a = sys.vector_at(&mid)[ax];
        let u = Complex64::from_polar(1.0, -a * h / lambda);
        let scale = -I * lambda / h;
        let mut out = Vec::with_capacity(2);
        if let Some(k) = self.index(ni, nj) {
            out.push((k, scale * u));
        }
        if let Some(k) = self.index(i, j) {
            out.push((k, -scale));
        }
        out
    }

    /// `H += ½ w (A† B + B† A)` for stencils `A`, `B`; `A == B` gives `½ w A† A` once.
    fn add_form(&mut self, w: f64, a: &Stencil, b: &Stencil, symmetric: bool) {
        let mut put = |x: &Stencil, y: &Stencil| {
            for &(r, alpha) in x {
                for &(c, beta) in y {
                    *self.rows[r].entry(c).or_insert(Complex64::new(0.0, 0.0)) += 0.5 * w * alpha.conj() * beta;
                }
            }
        };
        put(a, b);
        if symmetric {
            put(b, a);
        }
    }

    fn add_diagonal(&mut self, k: usize, v: f64) {
        *self.rows[k].entry(k).or_insert(Complex64::new(0.0, 0.0)) += v;
    }

    fn link_range(&self, ax: usize) -> std::ops::Range<isize> {
        let n = self.shape[ax] as isize;
        if self.axes[ax].is_periodic() {
            0..n
        } else {
            -1..n
        }
    }

    fn finish(self, lambda_mag: f64) -> GridOperator {
        let rows = self
            .rows
            .into_iter()
            .map(|m| m.into_iter().filter(|(_, v)| *v != Complex64::new(0.0, 0.0)).collect())
            .collect();
        GridOperator { axes: self.axes, lambda_mag, rows }
    }
}

fn check_inputs(sys: &MetricPotentialSystem, lambda_mag: f64, axes: &[Axis]) -> Result<()> {
    sys.validate()?;
    if axes.len() != sys.dim {
        return Err(Error::InvalidParameter(format!("{}-D system on a {}-D grid", sys.dim, axes.len())));
    }
    if !(lambda_mag > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda_mag must be positive, got {lambda_mag}")));
    }
    Ok(())
}

/// `Ĥ = ½ (p̂_i − a_i) g^{ij}(q) (p̂_j − a_j) + V` with `p̂ = −i|λ|∂`.
pub fn build_metric_hamiltonian(sys: &MetricPotentialSystem, lambda_mag: f64, axes: &[Axis]) -> Result<GridOperator> {
    check_inputs(sys, lambda_mag, axes)?;
    let mut asm = Assembler::new(axes);
    let [n0, n1] = asm.shape;
    let two_d = axes.len() == 2;

    for i in 0..n0 {
        for j in 0..n1 {
            let q = asm.position(i as f64, j as f64);
            sys.check_point(&q)?;
            let k = asm.index(i as isize, j as isize).expect("interior node");
            asm.add_diagonal(k, sys.potential_at(&q));
        }
    }

    for ax in 0..axes.len() {
        let other = if two_d { 0..(if ax == 0 { n1 } else { n0 }) as isize } else { 0..1 };
        for k in asm.link_range(ax) {
            for m in other.clone() {
                let (i, j) = if ax == 0 { (k, m) } else { (m, k) };
                let mid = if ax == 0 { asm.position(i as f64 + 0.5, j as f64) } else { asm.position(i as f64, j as f64 + 0.5) };
                let g = sys.metric_at(&mid)[ax][ax];
                if !(g > 0.0) || !g.is_finite() {
                    return Err(Error::InvalidSystem {
                        location: format!("q = {:?}", &mid[..axes.len()]),
                        detail: format!("metric diagonal g{ax}{ax} = {g} is not positive"),
                    });
                }
                let d = asm.link(sys, lambda_mag, ax, i, j);
                asm.add_form(g, &d, &d, false);
            }
        }
    }

    if two_d {
        for ci in asm.link_range(0) {
            for cj in asm.link_range(1) {
                let corner = asm.position(ci as f64 + 0.5, cj as f64 + 0.5);
                let g12 = sys.metric_at(&corner)[0][1];
                if g12 == 0.0 {
                    continue;
                }
                // x-gradient averaged over the two x-links bounding the cell, likewise y.
                let mut dx = asm.link(sys, lambda_mag, 0, ci, cj);
                dx.extend(asm.link(sys, lambda_mag, 0, ci, cj + 1));
                let mut dy = asm.link(sys, lambda_mag, 1, ci, cj);
                dy.extend(asm.link(sys, lambda_mag, 1, ci + 1, cj));
                for s in dx.iter_mut().chain(dy.iter_mut()) {
                    s.1 *= 0.5;
                }
                asm.add_form(g12, &dx, &dy, true);
            }
        }
    }
    Ok(asm.finish(lambda_mag))
}

/// Naive ordering `½ g^{ij}(q)(p̂_i − a_i)(p̂_j − a_j) + V`, with the metric
/// multiplying from the left. Not Hermitian for position-dependent metrics.
pub fn build_naive_hamiltonian(sys: &MetricPotentialSystem, lambda_mag: f64, axes: &[Axis]) -> Result<GridOperator> {
    check_inputs(sys, lambda_mag, axes)?;
    let flat = MetricPotentialSystem {
        metric: MetricPotentialSystem::flat(sys.dim).metric,
        potential: crate::expr::Expr::constant(0.0),
        ..sys.clone()
    };
    let mut asm = Assembler::new(axes);
    let [n0, n1] = asm.shape;
    for i in 0..n0 {
        for j in 0..n1 {
            let q = asm.position(i as f64, j as f64);
            sys.check_point(&q)?;
            let g = sys.metric_at(&q);
            let k = asm.index(i as isize, j as isize).expect("interior node");
            asm.add_diagonal(k, sys.potential_at(&q));
            // row k of ½ g(q_k) Σ D†D over the links touching node k
            for ax in 0..axes.len() {
                let (ii, jj) = (i as isize, j as isize);
                let back = if ax == 0 { (ii - 1, jj) } else { (ii, jj - 1) };
                for (li, lj) in [back, (ii, jj)] {
                    let d = asm.link(&flat, lambda_mag, ax, li, lj);
                    if let Some(&(_, alpha)) = d.iter().find(|(c, _)| *c == k) {
                        for &(c, beta) in &d {
                            *asm.rows[k].entry(c).or_insert(Complex64::new(0.0, 0.0)) += 0.5 * g[ax][ax] * alpha.conj() * beta;
                        }
                    }
                }
            }
            if axes.len() == 2 && g[0][1] != 0.0 {
                let (ii, jj) = (i as isize, j as isize);
                let (h0, h1) = (axes[0].spacing(), axes[1].spacing());
                let w = -lambda_mag * lambda_mag * g[0][1] / (4.0 * h0 * h1);
                for (si, sj, s) in [(1, 1, 1.0), (-1, -1, 1.0), (1, -1, -1.0), (-1, 1, -1.0)] {
                    if let Some(c) = asm.index(ii + si, jj + sj) {
                        *asm.rows[k].entry(c).or_insert(Complex64::new(0.0, 0.0)) += w * s;
                    }
                }
            }
        }
    }
    Ok(asm.finish(lambda_mag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line(n: usize, l: f64) -> Axis {
        Axis::line(-l, l, n).unwrap()
    }

    #[test]
    fn harmonic_ground_state_is_eigenvector() {
        let axis = line(512, 7.0);
        let h = build_metric_hamiltonian(&MetricPotentialSystem::harmonic(1), 1.0, &[axis]).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |x| Complex64::new(PI.powf(-0.25) * (-0.5 * x * x).exp(), 0.0));
        let hpsi = h.apply(psi.amplitudes());
        let dx = axis.spacing();
        let err: f64 = hpsi.iter().zip(psi.amplitudes()).map(|(a, b)| (a - 0.5 * b).norm_sqr()).sum::<f64>() * dx;
        assert!(err.sqrt() < 1e-4, "residual {}", err.sqrt());
    }

    #[test]
    fn position_dependent_metric_is_hermitian() {
        let axis = line(200, 5.0);
        let sys = MetricPotentialSystem::flat(1).with_metric(&["1 + 0.1*sin(x)"]).unwrap().with_vector(&["0.3*cos(x)"]).unwrap();
        let h = build_metric_hamiltonian(&sys, 1.0, &[axis]).unwrap();
        assert!(h.hermiticity_defect() < 1e-10);
        let naive = build_naive_hamiltonian(&sys, 1.0, &[axis]).unwrap();
        assert!(naive.hermiticity_defect() > 1e-4);
    }

    #[test]
    fn two_dimensional_tensor_metric_is_hermitian() {
        let ax = Axis::line(-2.0, 2.0, 12).unwrap();
        let ay = Axis::periodic(0.0, 2.0 * PI, 10).unwrap();
        let sys = MetricPotentialSystem::flat(2)
            .with_metric(&["1 + 0.1*sin(x)", "0.2*cos(y)", "1.5 + 0.1*x"])
            .unwrap()
            .with_vector(&["0.4*y", "sin(x)"])
            .unwrap()
            .with_potential("x^2 + cos(y)")
            .unwrap();
        let h = build_metric_hamiltonian(&sys, 0.7, &[ax, ay]).unwrap();
        assert!(h.hermiticity_defect() < 1e-10);
        let naive = build_naive_hamiltonian(&sys, 0.7, &[ax, ay]).unwrap();
        assert!(naive.hermiticity_defect() > 1e-4);
    }

    #[test]
    fn indefinite_metric_rejected() {
        let axis = line(32, 1.0);
        let sys = MetricPotentialSystem::flat(1).with_metric(&["x"]).unwrap();
        assert!(matches!(build_metric_hamiltonian(&sys, 1.0, &[axis]), Err(Error::InvalidSystem { .. })));
    }

    #[test]
    fn flat_two_dimensional_operator_is_separable() {
        // With a flat metric the 2-D operator acts on products as a sum of 1-D operators.
        let ax = line(9, 1.0);
        let ay = line(7, 2.0);
        let h2 = build_metric_hamiltonian(&MetricPotentialSystem::flat(2), 1.0, &[ax, ay]).unwrap();
        let hx = build_metric_hamiltonian(&MetricPotentialSystem::flat(1), 1.0, &[ax]).unwrap();
        let hy = build_metric_hamiltonian(&MetricPotentialSystem::flat(1), 1.0, &[ay]).unwrap();
        let fx: Vec<Complex64> = ax.nodes().iter().map(|&x| Complex64::new(x.cos(), x)).collect();
        let fy: Vec<Complex64> = ay.nodes().iter().map(|y| Complex64::new(1.0 + y * y, 0.0)).collect();
        let prod: Vec<Complex64> = fx.iter().flat_map(|a| fy.iter().map(move |b| a * b)).collect();
        let hxf = hx.apply(&fx);
        let hyf = hy.apply(&fy);
        let lhs = h2.apply(&prod);
        for (i, a) in fx.iter().enumerate() {
            for (j, b) in fy.iter().enumerate() {
                let rhs = hxf[i] * b + a * hyf[j];
                assert!((lhs[i * fy.len() + j] - rhs).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn tridiagonal_bands_only_for_lines() {
        let h = build_metric_hamiltonian(&MetricPotentialSystem::flat(1), 1.0, &[line(16, 1.0)]).unwrap();
        assert!(h.tridiagonal().is_some());
        let ring = Axis::ring(16).unwrap();
        let h = build_metric_hamiltonian(&MetricPotentialSystem::flat(1), 1.0, &[ring]).unwrap();
        assert!(h.tridiagonal().is_none());
    }

    fn spectrum(h: &GridOperator) -> Vec<f64> {
        let n = h.len();
        let m = nalgebra::DMatrix::from_row_slice(n, n, &h.dense());
        let mut e: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    #[test]
    fn constant_vector_potential_shifts_free_spectrum() {
        let (n, lambda, a) = (64, 1.0, 0.37);
        let ring = Axis::periodic(0.0, 8.0, n).unwrap();
        let sys = MetricPotentialSystem::flat(1).with_vector(&["0.37"]).unwrap();
        let e = spectrum(&build_metric_hamiltonian(&sys, lambda, &[ring]).unwrap());
        let h = ring.spacing();
        let mut oracle: Vec<f64> = (0..n as i32)
            .map(|m| {
                let k = 2.0 * PI * f64::from(m) / ring.length();
                lambda * lambda / (h * h) * (1.0 - (k * h - a * h / lambda).cos())
            })
            .collect();
        oracle.sort_by(f64::total_cmp);
        for (x, y) in e.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        // On a Dirichlet line the same potential is pure gauge.
        let l = line(80, 3.0);
        let e0 = spectrum(&build_metric_hamiltonian(&MetricPotentialSystem::flat(1), lambda, &[l]).unwrap());
        let ea = spectrum(&build_metric_hamiltonian(&sys, lambda, &[l]).unwrap());
        for (x, y) in e0.iter().zip(&ea) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
