//! Unitary Cayley propagation `(1 + iτĤ) ψⁿ⁺¹ = (1 − iτĤ) ψⁿ`, `τ = dt / (2|λ|)`,
//! of `i|λ| ∂ₜψ = Ĥψ`.
//!
//! One-dimensional line operators are tridiagonal and solved directly
//! (Thomas algorithm, factored once per propagator). Everything else goes
//! through Jacobi-preconditioned BiCGSTAB.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operator::GridOperator;
use crate::wavefunction::WaveFunction;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// LU factors of a tridiagonal matrix (no pivoting).
#[derive(Debug, Clone)]
struct Thomas {
    lower: Vec<Complex64>,
    upper_mod: Vec<Complex64>,
    pivot: Vec<Complex64>,
}

impl Thomas {
    fn factor(lower: Vec<Complex64>, diag: &[Complex64], upper: &[Complex64]) -> Result<Self> {
        let n = diag.len();
        let mut upper_mod = vec![ZERO; n];
        let mut pivot = vec![ZERO; n];
        for i in 0..n {
            let p = if i == 0 { diag[0] } else { diag[i] - lower[i] * upper_mod[i - 1] };
            if p.norm() < 1e-300 {
                return Err(Error::Degenerate(format!("zero pivot at row {i}")));
            }
            pivot[i] = p;
            upper_mod[i] = upper[i] / p;
        }
        Ok(Self { lower, upper_mod, pivot })
    }

    fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        let n = rhs.len();
        let mut y = vec![ZERO; n];
        for i in 0..n {
            let prev = if i == 0 { ZERO } else { self.lower[i] * y[i - 1] };
            y[i] = (rhs[i] - prev) / self.pivot[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let next = self.upper_mod[i] * y[i + 1];
            y[i] -= next;
        }
        y
    }
}

/// Solver for `(α + β Ĥ) x = b`.
#[derive(Debug, Clone)]
pub struct ShiftedSolver<'a> {
    op: &'a GridOperator,
    alpha: Complex64,
    beta: Complex64,
    direct: Option<Thomas>,
    inv_diag: Vec<Complex64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl<'a> ShiftedSolver<'a> {
    pub const DEFAULT_TOLERANCE: f64 = 1e-14;
    pub const DEFAULT_MAX_ITERATIONS: usize = 2000;

    pub fn new(op: &'a GridOperator, alpha: Complex64, beta: Complex64) -> Result<Self> {
        let direct = match op.tridiagonal() {
            Some((lower, diag, upper)) => {
                let lower: Vec<Complex64> = lower.iter().map(|l| beta * l).collect();
                let diag: Vec<Complex64> = diag.iter().map(|d| alpha + beta * d).collect();
                let upper: Vec<Complex64> = upper.iter().map(|u| beta * u).collect();
                Some(Thomas::factor(lower, &diag, &upper)?)
            }
            None => None,
        };
        let inv_diag = op
            .diagonal()
            .iter()
            .map(|d| {
                let v = alpha + beta * d;
                if v.norm() > 0.0 { 1.0 / v } else { Complex64::new(1.0, 0.0) }
            })
            .collect();
        Ok(Self {
            op,
            alpha,
            beta,
            direct,
            inv_diag,
            tolerance: Self::DEFAULT_TOLERANCE,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
        })
    }

    fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        let hv = self.op.apply(v);
        v.iter().zip(hv).map(|(x, h)| self.alpha * x + self.beta * h).collect()
    }

    pub fn solve(&self, rhs: &[Complex64], guess: &[Complex64]) -> Result<Vec<Complex64>> {
        if let Some(t) = &self.direct {
            return Ok(t.solve(rhs));
        }
        self.bicgstab(rhs, guess)
    }

    fn bicgstab(&self, b: &[Complex64], guess: &[Complex64]) -> Result<Vec<Complex64>> {
        let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 { a.iter().zip(b).map(|(x, y)| x.conj() * y).sum() };
        let nrm = |a: &[Complex64]| -> f64 { a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt() };
        let precond = |v: &[Complex64]| -> Vec<Complex64> { v.iter().zip(&self.inv_diag).map(|(x, d)| x * d).collect() };

        let bnorm = nrm(b);
        if bnorm == 0.0 {
            return Ok(vec![ZERO; b.len()]);
        }
        let mut x = guess.to_vec();
        let ax = self.apply(&x);
        let mut r: Vec<Complex64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let r_hat = r.clone();
        let mut rho = Complex64::new(1.0, 0.0);
        let mut alpha = Complex64::new(1.0, 0.0);
        let mut omega = Complex64::new(1.0, 0.0);
        let mut v = vec![ZERO; b.len()];
        let mut p = vec![ZERO; b.len()];
        let mut rel = nrm(&r) / bnorm;
        if rel <= self.tolerance {
            return Ok(x);
        }
        for _ in 0..self.max_iterations {
            let rho_new = dot(&r_hat, &r);
            if rho_new.norm() == 0.0 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            for k in 0..p.len() {
                p[k] = r[k] + beta * (p[k] - omega * v[k]);
            }
            let y = precond(&p);
            v = self.apply(&y);
            alpha = rho_new / dot(&r_hat, &v);
            let s: Vec<Complex64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
            if nrm(&s) / bnorm <= self.tolerance {
                for k in 0..x.len() {
                    x[k] += alpha * y[k];
                }
                return Ok(x);
            }
            let z = precond(&s);
            let t = self.apply(&z);
            let tt = dot(&t, &t);
            omega = if tt.norm() > 0.0 { dot(&t, &s) / tt } else { ZERO };
            for k in 0..x.len() {
                x[k] += alpha * y[k] + omega * z[k];
                r[k] = s[k] - omega * t[k];
            }
            rho = rho_new;
            rel = nrm(&r) / bnorm;
            if rel <= self.tolerance {
                return Ok(x);
            }
            if omega.norm() == 0.0 {
                break;
            }
        }
        // Accept a stagnated solve only if it is still at round-off level.
        let true_res = {
            let ax = self.apply(&x);
            nrm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm
        };
        if true_res <= 100.0 * self.tolerance {
            return Ok(x);
        }
        Err(Error::SolverDivergence { iterations: self.max_iterations, residual: true_res.max(rel) })
    }
}

/// Cayley propagator of a fixed Hamiltonian and time step.
#[derive(Debug, Clone)]
pub struct Propagator<'a> {
    op: &'a GridOperator,
    tau: f64,
    solver: ShiftedSolver<'a>,
}

impl<'a> Propagator<'a> {
    pub fn new(op: &'a GridOperator, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        let tau = dt / (2.0 * op.lambda_mag());
        let solver = ShiftedSolver::new(op, Complex64::new(1.0, 0.0), I * tau)?;
        Ok(Self { op, tau, solver })
    }

    pub fn step(&self, psi: &[Complex64]) -> Result<Vec<Complex64>> {
        let hpsi = self.op.apply(psi);
        let rhs: Vec<Complex64> = psi.iter().zip(&hpsi).map(|(p, h)| p - I * self.tau * h).collect();
        self.solver.solve(&rhs, psi)
    }
}

/// `n_steps` Cayley steps of size `dt`.
pub fn evolve_grid(psi: &WaveFunction, op: &GridOperator, dt: f64, n_steps: usize) -> Result<WaveFunction> {
    let history = evolve_history(psi, op, dt, n_steps, n_steps.max(1))?;
    Ok(history.into_iter().last().expect("initial snapshot"))
}

/// Snapshots every `stride` steps, starting with the initial state.
pub fn evolve_history(psi: &WaveFunction, op: &GridOperator, dt: f64, n_steps: usize, stride: usize) -> Result<Vec<WaveFunction>> {
    op.check_grid(psi)?;
    let stride = stride.max(1);
    let prop = Propagator::new(op, dt)?;
    let mut cur = psi.amplitudes().to_vec();
    let mut out = vec![psi.clone()];
    for k in 1..=n_steps {
        cur = prop.step(&cur)?;
        if k % stride == 0 || k == n_steps {
            out.push(psi.with_amplitudes(cur.clone())?);
        }
    }
    Ok(out)
}

/// Lowest eigenpair of `op` by shifted inverse iteration from `guess`.
pub fn ground_state(op: &GridOperator, guess: &WaveFunction, shift: f64, tolerance: f64) -> Result<(WaveFunction, f64)> {
    op.check_grid(guess)?;
    let solver = ShiftedSolver::new(op, Complex64::new(-shift, 0.0), Complex64::new(1.0, 0.0))?;
    let mut psi = guess.normalize()?;
    for _ in 0..500 {
        let x = solver.solve(psi.amplitudes(), psi.amplitudes())?;
        psi = psi.with_amplitudes(x)?.normalize()?;
        let energy = op.expectation(&psi)?;
        let hpsi = op.apply(psi.amplitudes());
        let res: f64 = hpsi
            .iter()
            .zip(psi.amplitudes())
            .map(|(h, p)| (h - energy * p).norm_sqr())
            .sum::<f64>()
            .sqrt()
            / psi.amplitudes().iter().map(|p| p.norm_sqr()).sum::<f64>().sqrt();
        if res < tolerance {
            return Ok((psi, energy));
        }
    }
    Err(Error::SolverDivergence { iterations: 500, residual: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use crate::operator::build_metric_hamiltonian;
    use crate::system::MetricPotentialSystem;
    use std::f64::consts::PI;

    fn gaussian(axis: Axis, center: f64, sigma: f64, p0: f64) -> WaveFunction {
        WaveFunction::from_fn_1d(axis, |x| {
            let u = x - center;
            Complex64::from_polar((2.0 * PI * sigma * sigma).powf(-0.25) * (-u * u / (4.0 * sigma * sigma)).exp(), p0 * u)
        })
    }

    #[test]
    fn thomas_matches_dense_solution() {
        let n = 6;
        let lower: Vec<Complex64> = (0..n).map(|i| Complex64::new(0.3 * i as f64, -0.1)).collect();
        let diag: Vec<Complex64> = (0..n).map(|i| Complex64::new(2.0 + i as f64, 0.5)).collect();
        let upper: Vec<Complex64> = (0..n).map(|i| Complex64::new(-0.2, 0.1 * i as f64)).collect();
        let rhs: Vec<Complex64> = (0..n).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let t = Thomas::factor(lower.clone(), &diag, &upper).unwrap();
        let x = t.solve(&rhs);
        for i in 0..n {
            let mut ax = diag[i] * x[i];
            if i > 0 {
                ax += lower[i] * x[i - 1];
            }
            if i + 1 < n {
                ax += upper[i] * x[i + 1];
            }
            assert!((ax - rhs[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn bicgstab_and_direct_agree() {
        let axis = Axis::line(-5.0, 5.0, 128).unwrap();
        let op = build_metric_hamiltonian(&MetricPotentialSystem::harmonic(1), 1.0, &[axis]).unwrap();
        let psi = gaussian(axis, 0.5, 0.7, 1.0);
        let direct = ShiftedSolver::new(&op, Complex64::new(1.0, 0.0), I * 0.01).unwrap();
        let mut krylov = direct.clone();
        krylov.direct = None;
        let a = direct.solve(psi.amplitudes(), psi.amplitudes()).unwrap();
        let b = krylov.solve(psi.amplitudes(), psi.amplitudes()).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn norm_is_conserved() {
        let axis = Axis::line(-10.0, 10.0, 256).unwrap();
        let op = build_metric_hamiltonian(&MetricPotentialSystem::harmonic(1), 1.0, &[axis]).unwrap();
        let psi = gaussian(axis, 1.0, 0.5, 0.5);
        let out = evolve_grid(&psi, &op, 1e-3, 1000).unwrap();
        assert!((out.norm_squared() - psi.norm_squared()).abs() < 1e-8);
    }

    #[test]
    fn free_packet_dispersion() {
        let axis = Axis::line(-25.0, 25.0, 2048).unwrap();
        let sigma: f64 = 0.5;
        let op = build_metric_hamiltonian(&MetricPotentialSystem::flat(1), 1.0, &[axis]).unwrap();
        let out = evolve_grid(&gaussian(axis, 0.0, sigma, 0.0), &op, 2e-3, 1000).unwrap();
        let mean = out.expectation(|x| x[0]);
        let var = out.expectation(|x| (x[0] - mean).powi(2));
        // σ²(t) = σ₀² (1 + (|λ| t / 2σ₀²)²)
        let t = 2.0;
        let analytic = sigma * sigma * (1.0 + (t / (2.0 * sigma * sigma)).powi(2));
        assert!((var / analytic - 1.0).abs() < 5e-3, "{var} vs {analytic}");
    }

    #[test]
    fn discrete_ground_state_is_stationary() {
        let axis = Axis::line(-8.0, 8.0, 256).unwrap();
        let op = build_metric_hamiltonian(&MetricPotentialSystem::harmonic(1), 1.0, &[axis]).unwrap();
        let (psi0, e0) = ground_state(&op, &gaussian(axis, 0.3, 0.8, 0.0), 0.0, 1e-12).unwrap();
        assert!((e0 - 0.5).abs() < 1e-3);
        let period = 2.0 * PI;
        let steps = 2000;
        let out = evolve_grid(&psi0, &op, period / steps as f64, steps).unwrap();
        let drift = out.density().iter().zip(psi0.density()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "density drift {drift:e}");
    }

    #[test]
    fn second_order_in_time() {
        let axis = Axis::line(-8.0, 8.0, 128).unwrap();
        let op = build_metric_hamiltonian(&MetricPotentialSystem::harmonic(1), 1.0, &[axis]).unwrap();
        let psi = gaussian(axis, 1.0, 0.6, 0.0);
        let t = 1.0;
        let reference = evolve_grid(&psi, &op, t / 1600.0, 1600).unwrap();
        let err = |n: usize| {
            let out = evolve_grid(&psi, &op, t / n as f64, n).unwrap();
            out.amplitudes().iter().zip(reference.amplitudes()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
        };
        let ratio = err(50) / err(100);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn two_dimensional_krylov_matches_separable_product() {
        let ax = Axis::line(-5.0, 5.0, 40).unwrap();
        let op = build_metric_hamiltonian(&MetricPotentialSystem::harmonic(2), 1.0, &[ax, ax]).unwrap();
        let op1 = build_metric_hamiltonian(&MetricPotentialSystem::harmonic(1), 1.0, &[ax]).unwrap();
        let fx = gaussian(ax, 1.0, 0.5, 0.0);
        let fy = gaussian(ax, 0.0, 0.7, 0.3);
        let psi = WaveFunction::from_fn_2d(ax, ax, |x, y| {
            let u = x - 1.0;
            let a = (2.0 * PI * 0.25f64).powf(-0.25) * (-u * u / 1.0).exp();
            let b = Complex64::from_polar((2.0 * PI * 0.49f64).powf(-0.25) * (-y * y / (4.0 * 0.49)).exp(), 0.3 * y);
            a * b
        });
        let (dt, n) = (1e-2, 100);
        let out = evolve_grid(&psi, &op, dt, n).unwrap();
        assert!((out.norm_squared() - psi.norm_squared()).abs() < 1e-10);
        let gx = evolve_grid(&fx, &op1, dt, n).unwrap();
        let gy = evolve_grid(&fy, &op1, dt, n).unwrap();
        let m = ax.n;
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                // Cayley of a Kronecker sum differs from the product of Cayleys at O(dt³) per step.
                let prod = gx.amplitudes()[i] * gy.amplitudes()[j];
                worst = worst.max((out.amplitudes()[i * m + j] - prod).norm());
            }
        }
        assert!(worst < 1e-4, "{worst:e}");
    }
}
