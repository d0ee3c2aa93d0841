//! The same pointer pipeline with `Ĥ_I = g Ô₁ p̂₂` for other system observables.
//!
//! Angular momentum and linear momentum (plane waves in a periodic box) both
//! have discrete spectra and run through the spectral measurement state.
//! Position has a continuous spectrum: the window is cut into bins and the
//! exact flow `q̇₁ = 0`, `q̇₂ = g q₁` of `g q̂₁ p̂₂` carries the pointer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{run_ensemble, prepare_initial_state, summarize, MeasurementPipeline};
use crate::rng::stream;
use crate::spectral::{AngularBasis, GaussianPacket, SpectralState};
use crate::stats::{chi_square, ChiSquareTest};
use crate::trajectory::GridSampler;
use crate::wavefunction::WaveFunction;

/// Weight allowed outside the discretization window.
pub const COVERAGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Observable {
    AngularMomentum { l_max: i32 },
    /// Plane waves `exp(2πi l x / L)` on a periodic box of length `L`.
    LinearMomentum { length: f64, l_max: i32 },
    Position { min: f64, max: f64, bin_width: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    Spectral(SpectralState),
    Bins(PositionBins),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionBins {
    pub min: f64,
    pub bin_width: f64,
    pub n_bins: usize,
    pub phi: WaveFunction,
    pub packet: GaussianPacket,
    /// `∫_bin |φ|²` per bin.
    pub reference: Vec<f64>,
}

impl PositionBins {
    pub fn center(&self, k: usize) -> f64 {
        self.min + (k as f64 + 0.5) * self.bin_width
    }

    /// Bin holding the position read off the pointer, `(q₂ − μ₀)/(g t_M)`.
    pub fn infer(&self, q2: f64, g: f64, t_m: f64) -> Option<usize> {
        let q1 = (q2 - self.packet.center) / (g * t_m);
        let u = (q1 - self.min) / self.bin_width;
        (u >= 0.0 && u < self.n_bins as f64 && g != 0.0).then(|| u as usize)
    }
}

fn covered_expansion(basis: AngularBasis, phi: &WaveFunction) -> Result<Vec<(i32, num_complex::Complex64)>> {
    let exp = match basis.expand(phi) {
        Ok(e) => e,
        Err(Error::Truncation { residual, .. }) => {
            return Err(Error::Coverage { covered: 1.0 - residual / phi.norm_squared() });
        }
        Err(e) => return Err(e),
    };
    let captured: f64 = exp.coeffs.iter().map(|(_, c)| c.norm_sqr()).sum();
    let covered = captured / exp.norm;
    if covered < 1.0 - COVERAGE_TOLERANCE {
        return Err(Error::Coverage { covered });
    }
    let scale = captured.sqrt();
    Ok(exp.coeffs.into_iter().map(|(l, c)| (l, c / scale)).collect())
}

/// Builds the measurement of `kind` on the normalized system wavefunction `phi`.
pub fn substitute_observable(kind: Observable, phi: &WaveFunction, packet: GaussianPacket, pipeline: &MeasurementPipeline) -> Result<Prepared> {
    match kind {
        Observable::AngularMomentum { l_max } => {
            let basis = AngularBasis::new(l_max);
            let coeffs = covered_expansion(basis, phi)?;
            Ok(Prepared::Spectral(prepare_initial_state(basis, &coeffs, packet, &pipeline.config)?))
        }
        Observable::LinearMomentum { length, l_max } => {
            let basis = AngularBasis::periodic_box(l_max, length);
            let coeffs = covered_expansion(basis, phi)?;
            Ok(Prepared::Spectral(prepare_initial_state(basis, &coeffs, packet, &pipeline.config)?))
        }
        Observable::Position { min, max, bin_width } => {
            if !(bin_width > 0.0 && max > min) {
                return Err(Error::InvalidParameter("position window needs max > min and a positive bin width".into()));
            }
            if phi.dim() != 1 || phi.axes()[0].is_periodic() {
                return Err(Error::InvalidParameter("position measurement needs a wavefunction on a line".into()));
            }
            let n_bins = ((max - min) / bin_width).round() as usize;
            if n_bins == 0 || ((max - min) - n_bins as f64 * bin_width).abs() > 1e-9 * bin_width {
                return Err(Error::InvalidParameter("position window must hold a whole number of bins".into()));
            }
            let axis = phi.axes()[0];
            let rho = phi.density();
            let h = axis.spacing();
            let mut reference = vec![0.0; n_bins];
            let mut inside = 0.0;
            for (i, r) in rho.iter().enumerate() {
                let u = (axis.node(i) - min) / bin_width;
                if u >= 0.0 && u < n_bins as f64 {
                    reference[u as usize] += r * h;
                    inside += r * h;
                }
            }
            let covered = inside / phi.norm_squared();
            if covered < 1.0 - COVERAGE_TOLERANCE {
                return Err(Error::Coverage { covered });
            }
            for r in &mut reference {
                *r /= inside;
            }
            Ok(Prepared::Bins(PositionBins { min, bin_width, n_bins, phi: phi.clone(), packet, reference }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    /// Eigenvalue or bin centre.
    pub value: f64,
    pub count: u64,
    pub frequency: f64,
    pub reference: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableStats {
    pub n_trials: usize,
    pub n_valid: usize,
    pub unassigned: usize,
    pub bins: Vec<BinStat>,
    pub chi2: ChiSquareTest,
    /// Recorded outcome values of the valid trials, in trial order.
    pub values: Vec<f64>,
}

impl Prepared {
    pub fn run_ensemble(&self, pipeline: &MeasurementPipeline, n_trials: usize, seed: u64) -> Result<ObservableStats> {
        match self {
            Prepared::Spectral(state) => {
                let (records, _) = run_ensemble(state, pipeline, n_trials, seed)?;
                let stats = summarize(&records, state);
                let bins = stats
                    .outcomes
                    .iter()
                    .map(|o| BinStat {
                        value: o.omega,
                        count: o.count,
                        frequency: o.frequency,
                        reference: o.reference,
                        standard_error: o.standard_error,
                    })
                    .collect();
                Ok(ObservableStats {
                    n_trials,
                    n_valid: stats.n_valid,
                    unassigned: stats.ambiguous + stats.overflow,
                    bins,
                    chi2: stats.chi2,
                    values: records.iter().filter_map(|r| r.omega).collect(),
                })
            }
            Prepared::Bins(bins) => bins.run_ensemble(pipeline, n_trials, seed),
        }
    }
}

impl PositionBins {
    fn event<R: Rng + ?Sized>(&self, sampler: &GridSampler, pointer: &Normal<f64>, g: f64, t_m: f64, rng: &mut R) -> Option<usize> {
        let q1 = sampler.sample(rng)[0];
        let q2 = pointer.sample(rng);
        self.infer(q2 + g * q1 * t_m, g, t_m)
    }

    pub fn run_ensemble(&self, pipeline: &MeasurementPipeline, n_trials: usize, seed: u64) -> Result<ObservableStats> {
        pipeline.config.validate()?;
        let sampler = GridSampler::new(&self.phi)?;
        let pointer = Normal::new(self.packet.center, self.packet.sigma)
            .map_err(|e| Error::InvalidParameter(format!("pointer packet: {e}")))?;
        let (g, t_m) = (pipeline.config.g, pipeline.config.t_m);
        let outcomes: Vec<Option<usize>> = (0..n_trials as u64)
            .into_par_iter()
            .map(|t| self.event(&sampler, &pointer, g, t_m, &mut stream(seed, t)))
            .collect();
        let mut counts = vec![0u64; self.n_bins];
        for k in outcomes.iter().flatten() {
            counts[*k] += 1;
        }
        let n_valid = counts.iter().sum::<u64>() as usize;
        let nv = n_valid.max(1) as f64;
        let bins = counts
            .iter()
            .zip(&self.reference)
            .enumerate()
            .map(|(k, (&c, &p))| BinStat {
                value: self.center(k),
                count: c,
                frequency: c as f64 / nv,
                reference: p,
                standard_error: (p * (1.0 - p) / nv).sqrt(),
            })
            .collect();
        Ok(ObservableStats {
            n_trials,
            n_valid,
            unassigned: n_trials - n_valid,
            bins,
            chi2: chi_square(&counts, &self.reference),
            values: outcomes.iter().flatten().map(|&k| self.center(k)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use crate::physics::PhysicalConfig;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn pipeline(g: f64) -> MeasurementPipeline {
        MeasurementPipeline::new(PhysicalConfig { lambda_mag: 1.0, g, t_m: 1.0, sigma: 0.05, sep_factor: 8.0 })
    }

    #[test]
    fn momentum_eigenpacket_shifts_pointer_by_g_p_t() {
        let length = 2.0 * PI;
        let axis = Axis::periodic(0.0, length, 256).unwrap();
        let p0 = 2.0;
        let phi = WaveFunction::from_fn_1d(axis, |x| Complex64::from_polar(length.powf(-0.5), p0 * x));
        let p = pipeline(1.0);
        let prep = substitute_observable(Observable::LinearMomentum { length, l_max: 4 }, &phi, GaussianPacket::new(0.0, 0.05), &p).unwrap();
        let Prepared::Spectral(state) = &prep else { panic!("spectral") };
        let (recs, _) = run_ensemble(state, &p, 200, 3).unwrap();
        for r in &recs {
            assert_eq!(r.omega, Some(p0));
            assert!((r.q2_final - r.q2_initial - p0).abs() < 1e-6);
        }
    }

    #[test]
    fn localized_position_lands_in_its_bin() {
        let axis = Axis::line(-2.0, 2.0, 2048).unwrap();
        let s: f64 = 0.01;
        let phi = WaveFunction::from_fn_1d(axis, |x| {
            Complex64::new((2.0 * PI * s * s).powf(-0.25) * (-(x - 0.3) * (x - 0.3) / (4.0 * s * s)).exp(), 0.0)
        })
        .normalize()
        .unwrap();
        let p = pipeline(5.0);
        let kind = Observable::Position { min: -1.0, max: 1.0, bin_width: 0.2 };
        let prep = substitute_observable(kind, &phi, GaussianPacket::new(0.0, 0.05), &p).unwrap();
        let stats = prep.run_ensemble(&p, 10_000, 8).unwrap();
        let bin = stats.bins.iter().find(|b| (b.value - 0.3).abs() < 1e-9).unwrap();
        assert!(bin.frequency > 0.99, "{bin:?}");
    }

    #[test]
    fn broad_state_matches_plane_wave_weights() {
        let length = 2.0 * PI;
        let axis = Axis::periodic(0.0, length, 512).unwrap();
        let w: f64 = 0.5;
        let phi = WaveFunction::from_fn_1d(axis, |x| {
            let u = x - PI;
            Complex64::from_polar((-u * u / (4.0 * w * w)).exp(), u)
        })
        .normalize()
        .unwrap();
        let p = pipeline(1.0);
        let prep = substitute_observable(Observable::LinearMomentum { length, l_max: 8 }, &phi, GaussianPacket::new(0.0, 0.05), &p).unwrap();
        let stats = prep.run_ensemble(&p, 10_000, 21).unwrap();
        // discrete-Fourier oracle for the bin weights
        let h = axis.spacing();
        let total: f64 = stats.bins.iter().map(|b| b.reference).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for b in &stats.bins {
            let c: Complex64 = axis
                .nodes()
                .iter()
                .zip(phi.amplitudes())
                .map(|(&x, a)| Complex64::from_polar(length.powf(-0.5), -b.value * x) * a * h)
                .sum();
            assert!((c.norm_sqr() - b.reference).abs() < 1e-9);
            assert!((b.frequency - b.reference).abs() <= 3.0 * b.standard_error.max(1e-4), "{b:?}");
        }
    }

    #[test]
    fn narrow_window_is_a_coverage_error() {
        let axis = Axis::line(-2.0, 2.0, 512).unwrap();
        let phi = WaveFunction::from_fn_1d(axis, |x| Complex64::new((-x * x).exp(), 0.0)).normalize().unwrap();
        let kind = Observable::Position { min: -0.5, max: 0.5, bin_width: 0.1 };
        assert!(matches!(
            substitute_observable(kind, &phi, GaussianPacket::new(0.0, 0.05), &pipeline(5.0)),
            Err(Error::Coverage { .. })
        ));
        let ring = Axis::ring(256).unwrap();
        let sharp = WaveFunction::from_fn_1d(ring, |x| Complex64::new((-(x - PI).powi(2) / 0.01).exp(), 0.0))
            .normalize()
            .unwrap();
        assert!(matches!(
            substitute_observable(Observable::AngularMomentum { l_max: 2 }, &sharp, GaussianPacket::new(0.0, 0.05), &pipeline(1.0)),
            Err(Error::Coverage { .. })
        ));
    }
}
