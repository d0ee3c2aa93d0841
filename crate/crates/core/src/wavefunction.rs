//! Complex amplitude fields on 1-D or 2-D grids and their polar form
//! `ψ = R exp(iS/|λ|)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::Axis;

/// Relative threshold below which `|ψ|²` is treated as a node.
pub const DEFAULT_NODE_EPS: f64 = 1e-12;

/// Complex field over the tensor grid spanned by `axes` (row-major, axis 0 slowest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveFunction {
    axes: Vec<Axis>,
    amplitudes: Vec<Complex64>,
}

impl WaveFunction {
    pub fn new(axes: Vec<Axis>, amplitudes: Vec<Complex64>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidParameter(format!(
                "wavefunctions live on 1 or 2 axes, got {}",
                axes.len()
            )));
        }
        let expected: usize = axes.iter().map(|a| a.n).product();
        if amplitudes.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "amplitude count {} does not match grid size {}",
                amplitudes.len(),
                expected
            )));
        }
        Ok(Self { axes, amplitudes })
    }

    pub fn from_fn_1d(axis: Axis, f: impl Fn(f64) -> Complex64) -> Self {
        let amplitudes = axis.nodes().into_iter().map(f).collect();
        Self { axes: vec![axis], amplitudes }
    }

    pub fn from_fn_2d(a0: Axis, a1: Axis, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let x1 = a1.nodes();
        let mut amplitudes = Vec::with_capacity(a0.n * a1.n);
        for x0 in a0.nodes() {
            amplitudes.extend(x1.iter().map(|&y| f(x0, y)));
        }
        Self { axes: vec![a0, a1], amplitudes }
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        match self.axes.as_slice() {
            [a] => (a.n, 1),
            [a, b] => (a.n, b.n),
            _ => unreachable!(),
        }
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn with_amplitudes(&self, amplitudes: Vec<Complex64>) -> Result<Self> {
        Self::new(self.axes.clone(), amplitudes)
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    /// Quadrature weight of a single grid point.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.norm_sqr()).collect()
    }

    /// Quadrature of `|ψ|²` over the grid.
    pub fn norm_squared(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.cell_volume()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm_squared();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!("cannot normalize a field with norm {n}")));
        }
        let s = 1.0 / n.sqrt();
        Ok(Self { axes: self.axes.clone(), amplitudes: self.amplitudes.iter().map(|z| z * s).collect() })
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self { axes: self.axes.clone(), amplitudes: self.amplitudes.iter().map(|z| z * c).collect() }
    }

    /// Grid inner product `⟨self|other⟩`.
    pub fn inner(&self, other: &Self) -> Complex64 {
        debug_assert_eq!(self.axes, other.axes);
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * self.cell_volume()
    }

    /// Expectation of a function of the grid coordinates under `|ψ|²`.
    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let (n0, n1) = self.shape();
        let mut acc = 0.0;
        let mut x = [0.0; 2];
        for i in 0..n0 {
            x[0] = self.axes[0].node(i);
            for j in 0..n1 {
                if self.dim() == 2 {
                    x[1] = self.axes[1].node(j);
                }
                acc += self.amplitudes[i * n1 + j].norm_sqr() * f(&x[..self.dim()]);
            }
        }
        acc * self.cell_volume()
    }

    pub fn max_density(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max)
    }
}

/// Modulus/phase decomposition of a [`WaveFunction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarFields {
    pub axes: Vec<Axis>,
    /// `R = |ψ| = √Ω`.
    pub r: Vec<f64>,
    /// `S = |λ| · unwrapped phase`, in action units.
    pub s: Vec<f64>,
    /// `true` where `R² < ε_node · max R²`.
    pub node_mask: Vec<bool>,
    /// Net phase winding around each periodic axis along the reference line (0 for line axes).
    pub winding: Vec<i64>,
    /// Grid index the unwrapping starts from (the density maximum).
    pub reference: usize,
}

impl PolarFields {
    pub fn shape(&self) -> (usize, usize) {
        match self.axes.as_slice() {
            [a] => (a.n, 1),
            [a, b] => (a.n, b.n),
            _ => unreachable!(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_mask.iter().filter(|&&m| m).count()
    }
}

#[inline]
fn wrap_phase(d: f64) -> f64 {
    d - 2.0 * PI * (d / (2.0 * PI)).round()
}

pub fn polar_decompose(psi: &WaveFunction, lambda_mag: f64) -> Result<PolarFields> {
    polar_decompose_with(psi, lambda_mag, DEFAULT_NODE_EPS)
}

/// Splits `psi` into `R` and `S`, unwrapping the phase axis by axis from the
/// density maximum. `S` is fixed only up to the branch constant `2π|λ|k`.
pub fn polar_decompose_with(psi: &WaveFunction, lambda_mag: f64, eps_node: f64) -> Result<PolarFields> {
    if !(lambda_mag > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda_mag must be positive, got {lambda_mag}")));
    }
    let max_density = psi.max_density();
    if !(max_density > 0.0) {
        return Err(Error::Degenerate("polar decomposition of an all-zero field".into()));
    }
    let amps = psi.amplitudes();
    let (n0, n1) = psi.shape();
    let reference = amps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
        .map(|(k, _)| k)
        .unwrap();
    let (i_ref, j_ref) = (reference / n1, reference % n1);
    let phase: Vec<f64> = amps.iter().map(|z| z.arg()).collect();
    let mut unwrapped = vec![0.0; amps.len()];

    // Reference row along axis 1.
    let row = i_ref * n1;
    unwrapped[row + j_ref] = phase[row + j_ref];
    for j in j_ref + 1..n1 {
        unwrapped[row + j] = unwrapped[row + j - 1] + wrap_phase(phase[row + j] - phase[row + j - 1]);
    }
    for j in (0..j_ref).rev() {
        unwrapped[row + j] = unwrapped[row + j + 1] + wrap_phase(phase[row + j] - phase[row + j + 1]);
    }
    // Every column along axis 0, seeded from the reference row.
    for j in 0..n1 {
        for i in i_ref + 1..n0 {
            let (k, kp) = (i * n1 + j, (i - 1) * n1 + j);
            unwrapped[k] = unwrapped[kp] + wrap_phase(phase[k] - phase[kp]);
        }
        for i in (0..i_ref).rev() {
            let (k, kp) = (i * n1 + j, (i + 1) * n1 + j);
            unwrapped[k] = unwrapped[kp] + wrap_phase(phase[k] - phase[kp]);
        }
    }

    let mut winding = vec![0i64; psi.dim()];
    for (axis_idx, axis) in psi.axes().iter().enumerate() {
        if !axis.is_periodic() {
            continue;
        }
        let (count, index): (usize, Box<dyn Fn(usize) -> usize>) = if axis_idx == 0 {
            (n0, Box::new(move |i| i * n1 + j_ref))
        } else {
            (n1, Box::new(move |j| row + j))
        };
        let total: f64 = (0..count)
            .map(|a| wrap_phase(phase[index((a + 1) % count)] - phase[index(a)]))
            .sum();
        winding[axis_idx] = (total / (2.0 * PI)).round() as i64;
    }

    let threshold = eps_node * max_density;
    Ok(PolarFields {
        axes: psi.axes().to_vec(),
        r: amps.iter().map(|z| z.norm()).collect(),
        s: unwrapped.into_iter().map(|p| p * lambda_mag).collect(),
        node_mask: amps.iter().map(|z| z.norm_sqr() < threshold).collect(),
        winding,
        reference,
    })
}

/// Rebuilds `R exp(iS/|λ|)`.
pub fn compose_polar(fields: &PolarFields, lambda_mag: f64) -> WaveFunction {
    let amplitudes = fields
        .r
        .iter()
        .zip(&fields.s)
        .map(|(&r, &s)| Complex64::from_polar(r, s / lambda_mag))
        .collect();
    WaveFunction { axes: fields.axes.clone(), amplitudes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian(x: f64, sigma: f64) -> f64 {
        (2.0 * PI * sigma * sigma).powf(-0.25) * (-(x * x) / (4.0 * sigma * sigma)).exp()
    }

    #[test]
    fn uniform_ring_norm() {
        let axis = Axis::ring(64).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |_| Complex64::new((2.0 * PI).powf(-0.5), 0.0));
        assert!((psi.norm_squared() - 1.0).abs() < 1e-12);
        let tripled = psi.scale(Complex64::new(3.0, 0.0));
        assert!((tripled.norm_squared() - 9.0 * psi.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_norm_matches_closed_form() {
        // ∫ exp(-x²/(2σ²)) dx = σ √(2π) for the unnormalized density.
        let sigma: f64 = 0.5;
        let axis = Axis::line(-10.0, 10.0, 512).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |x| Complex64::new((-(x * x) / (4.0 * sigma * sigma)).exp(), 0.0));
        let closed = sigma * (2.0 * PI).sqrt();
        assert!((psi.norm_squared() - closed).abs() < 1e-8);
    }

    #[test]
    fn normalize_zero_field_is_degenerate() {
        let axis = Axis::ring(16).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |_| Complex64::new(0.0, 0.0));
        assert!(matches!(psi.normalize(), Err(Error::Degenerate(_))));
        assert!(matches!(polar_decompose(&psi, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_winding_phase() {
        let axis = Axis::ring(128).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |t| Complex64::from_polar((2.0 * PI).powf(-0.5), t));
        let f = polar_decompose(&psi, 1.0).unwrap();
        assert_eq!(f.winding, vec![1]);
        let base = f.s[0] - axis.node(0);
        for (i, (&r, &s)) in f.r.iter().zip(&f.s).enumerate() {
            assert!((r - (2.0 * PI).powf(-0.5)).abs() < 1e-14);
            assert!((s - axis.node(i) - base).abs() < 1e-12);
        }
        let turns = base / (2.0 * PI);
        assert!((turns - turns.round()).abs() < 1e-12);
    }

    #[test]
    fn real_gaussian_has_zero_phase() {
        let axis = Axis::line(-6.0, 6.0, 256).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |x| Complex64::new(gaussian(x, 0.7), 0.0));
        let f = polar_decompose(&psi, 1.0).unwrap();
        assert!(f.s.iter().all(|&s| s.abs() < 1e-15));
        for (r, z) in f.r.iter().zip(psi.amplitudes()) {
            assert!((r - z.re).abs() < 1e-15);
        }
    }

    #[test]
    fn plane_wave_phase_vs_cumulative_difference_oracle() {
        let p0 = 2.0;
        let axis = Axis::line(-4.0, 4.0, 400).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |x| Complex64::from_polar(gaussian(x, 1.0), p0 * x));
        let f = polar_decompose(&psi, 1.0).unwrap();
        // Oracle: cumulative sum of arg(ψ_{k+1} ψ_k*), starting from zero at node 0.
        let a = psi.amplitudes();
        let mut oracle = vec![0.0];
        for k in 1..a.len() {
            oracle.push(oracle[k - 1] + (a[k] * a[k - 1].conj()).arg());
        }
        let offset = f.s[0] - oracle[0];
        for k in 0..a.len() {
            assert!((f.s[k] - offset - oracle[k]).abs() < 1e-10);
            // and S = p0 q + const
            assert!((f.s[k] - f.s[0] - p0 * (axis.node(k) - axis.node(0))).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_constant_and_direct_construction() {
        let axis = Axis::ring(32).unwrap();
        let fields = PolarFields {
            axes: vec![axis],
            r: vec![0.3; 32],
            s: vec![0.0; 32],
            node_mask: vec![false; 32],
            winding: vec![0],
            reference: 0,
        };
        let psi = compose_polar(&fields, 1.0);
        assert!(psi.amplitudes().iter().all(|z| (z.re - 0.3).abs() < 1e-15 && z.im == 0.0));

        let r: Vec<f64> = axis.nodes().iter().map(|&t| gaussian(t - PI, 0.6)).collect();
        let fields = PolarFields { r: r.clone(), s: axis.nodes(), ..fields };
        let psi = compose_polar(&fields, 1.0);
        for (i, z) in psi.amplitudes().iter().enumerate() {
            let direct = Complex64::new(0.0, axis.node(i)).exp() * r[i];
            assert!((z - direct).norm() < 1e-14);
        }
    }

    #[test]
    fn joint_grid_unwrap_recovers_gradients() {
        let ring = Axis::ring(32).unwrap();
        let line = Axis::line(-3.0, 3.0, 64).unwrap();
        let psi = WaveFunction::from_fn_2d(ring, line, |t, q| {
            Complex64::from_polar(gaussian(q, 0.8), 2.0 * t + 1.5 * q)
        });
        let f = polar_decompose(&psi, 1.0).unwrap();
        assert_eq!(f.winding, vec![2, 0]);
        let (n0, n1) = f.shape();
        for i in 1..n0 {
            for j in 1..n1 {
                let ds_t = f.s[i * n1 + j] - f.s[(i - 1) * n1 + j];
                let ds_q = f.s[i * n1 + j] - f.s[i * n1 + j - 1];
                assert!((ds_t - 2.0 * ring.spacing()).abs() < 1e-10);
                assert!((ds_q - 1.5 * line.spacing()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn node_mask_marks_zeros() {
        let axis = Axis::line(-3.0, 3.0, 61).unwrap();
        let psi = WaveFunction::from_fn_1d(axis, |x| Complex64::new(x * (-x * x).exp(), 0.0));
        let f = polar_decompose(&psi, 1.0).unwrap();
        assert!(f.node_mask[30]);
        assert!(!f.node_mask[25]);
    }

    proptest! {
        #[test]
        fn polar_round_trip_off_nodes(
            re in proptest::collection::vec(-1.0f64..1.0, 24),
            im in proptest::collection::vec(-1.0f64..1.0, 24),
            lambda in 0.2f64..3.0,
        ) {
            let axis = Axis::ring(24).unwrap();
            let amps: Vec<Complex64> = re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)).collect();
            prop_assume!(amps.iter().any(|z| z.norm() > 1e-3));
            let psi = WaveFunction::new(vec![axis], amps).unwrap().normalize().unwrap();
            let f = polar_decompose(&psi, lambda).unwrap();
            prop_assert!(f.r.iter().all(|&r| r >= 0.0));
            let back = compose_polar(&f, lambda);
            for (k, (a, b)) in psi.amplitudes().iter().zip(back.amplitudes()).enumerate() {
                if !f.node_mask[k] {
                    prop_assert!((a - b).norm() < 1e-10);
                }
            }
        }
    }
}
