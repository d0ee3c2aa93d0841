//! Exponential law of deviations from the infinitesimal stationary action,
//! the sign-locked (ξ, λ) processes and the separability of composite systems.
//!
//! Only log-weights and normalized samplers are exposed: the normalization
//! constant of the exponential law is never materialized.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of a magnitude held fixed over one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "law")]
pub enum MagnitudeLaw {
    /// Zeroth order: the magnitude never fluctuates.
    #[default]
    Constant,
    /// Narrow uniform law `mean · U(1 - w, 1 + w)`.
    Uniform { relative_half_width: f64 },
}

impl MagnitudeLaw {
    fn draw<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        match *self {
            MagnitudeLaw::Constant => mean,
            MagnitudeLaw::Uniform { relative_half_width: w } => mean * (1.0 + w * (2.0 * rng.random::<f64>() - 1.0)),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        match *self {
            MagnitudeLaw::Constant => Ok(()),
            MagnitudeLaw::Uniform { relative_half_width: w } if (0.0..1.0).contains(&w) => Ok(()),
            MagnitudeLaw::Uniform { relative_half_width: w } => Err(Error::InvalidParameter(format!(
                "{name}: relative half-width must lie in [0, 1), got {w}"
            ))),
        }
    }
}

/// How the shared sign of ξ and λ evolves from one `dt` step to the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "law")]
pub enum SignLaw {
    /// Independent equiprobable sign per step.
    #[default]
    Iid,
    /// Symmetric telegraph process: the sign flips with probability `p` per step.
    Telegraph { flip_probability: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticParams {
    #[serde(default = "one")]
    pub lambda_mag: f64,
    /// `None` stands for τ_λ = ∞ (|λ| fixed for the whole run).
    #[serde(default)]
    pub tau_lambda: Option<f64>,
    #[serde(default = "default_tau_xi")]
    pub tau_xi: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_hierarchy")]
    pub hierarchy_factor: f64,
    #[serde(default)]
    pub xi_mag_law: MagnitudeLaw,
    #[serde(default)]
    pub lambda_mag_law: MagnitudeLaw,
    #[serde(default)]
    pub sign_law: SignLaw,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_tau_xi() -> f64 {
    1e-2
}
fn default_dt() -> f64 {
    1e-3
}
fn default_hierarchy() -> f64 {
    10.0
}

impl Default for StochasticParams {
    fn default() -> Self {
        Self {
            lambda_mag: 1.0,
            tau_lambda: None,
            tau_xi: default_tau_xi(),
            dt: default_dt(),
            hierarchy_factor: default_hierarchy(),
            xi_mag_law: MagnitudeLaw::Constant,
            lambda_mag_law: MagnitudeLaw::Constant,
            sign_law: SignLaw::Iid,
            seed: 0,
        }
    }
}

impl StochasticParams {
    /// Checks `τ_λ ≥ h τ_ξ ≥ h² dt` together with the parameter ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mag > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda_mag must be positive, got {}", self.lambda_mag)));
        }
        if !(self.dt > 0.0 && self.tau_xi > 0.0) {
            return Err(Error::InvalidParameter("tau_xi and dt must be positive".into()));
        }
        if !(self.hierarchy_factor >= 10.0) {
            return Err(Error::InvalidParameter(format!(
                "hierarchy_factor must be at least 10, got {}",
                self.hierarchy_factor
            )));
        }
        let h = self.hierarchy_factor;
        // Relative slack so that e.g. tau_xi = 10 * dt passes despite rounding.
        let slack = 1.0 - 1e-12;
        if self.tau_xi < h * self.dt * slack {
            return Err(Error::Configuration {
                invariant: "timescale hierarchy",
                detail: format!("tau_xi = {} < {h} * dt = {}", self.tau_xi, h * self.dt),
            });
        }
        if let Some(tl) = self.tau_lambda {
            if tl < h * self.tau_xi * slack {
                return Err(Error::Configuration {
                    invariant: "timescale hierarchy",
                    detail: format!("tau_lambda = {tl} < {h} * tau_xi = {}", h * self.tau_xi),
                });
            }
        }
        if let SignLaw::Telegraph { flip_probability: p } = self.sign_law {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParameter(format!("flip probability must lie in (0, 1], got {p}")));
            }
        }
        self.xi_mag_law.validate("xi_mag_law")?;
        self.lambda_mag_law.validate("lambda_mag_law")?;
        Ok(())
    }

    pub fn steps_per_xi_block(&self) -> usize {
        ((self.tau_xi / self.dt).round() as usize).max(1)
    }

    pub fn steps_per_lambda_block(&self) -> Option<usize> {
        self.tau_lambda.map(|tl| ((tl / self.dt).round() as usize).max(1))
    }
}

/// The pair `dA(ξ)`, `dA(-ξ)` and the derived `dS` and `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionIncrement {
    pub d_a_plus: f64,
    pub d_a_minus: f64,
}

impl ActionIncrement {
    pub fn new(d_a_plus: f64, d_a_minus: f64) -> Self {
        Self { d_a_plus, d_a_minus }
    }

    /// Increment whose deviation `dS - dA(ξ)` equals `deviation`.
    pub fn from_deviation(d_a: f64, deviation: f64) -> Self {
        Self { d_a_plus: d_a, d_a_minus: d_a + 2.0 * deviation }
    }

    pub fn d_s(&self) -> f64 {
        0.5 * (self.d_a_plus + self.d_a_minus)
    }

    pub fn z(&self) -> f64 {
        self.d_a_plus - self.d_a_minus
    }

    /// `dS - dA(ξ)`, equal to `-Z/2`.
    pub fn deviation(&self) -> f64 {
        self.d_s() - self.d_a_plus
    }

    /// The same increment seen from `-ξ`.
    pub fn flipped(&self) -> Self {
        Self { d_a_plus: self.d_a_minus, d_a_minus: self.d_a_plus }
    }

    /// Composite increment of two non-interacting subsystems.
    pub fn combine(&self, other: &Self) -> Self {
        Self { d_a_plus: self.d_a_plus + other.d_a_plus, d_a_minus: self.d_a_minus + other.d_a_minus }
    }
}

/// `ln P` of the exponential transition law up to its constant:
/// `-(2/λ)(dS - dA) - θ(S) dt`. Returns `-∞` when `(dS - dA)/λ < 0`,
/// i.e. when the sign lock between λ and ξ is broken.
pub fn transition_log_weight(inc: &ActionIncrement, lambda_signed: f64, theta_s_dt: f64) -> Result<f64> {
    if lambda_signed == 0.0 || !lambda_signed.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be non-zero and finite, got {lambda_signed}")));
    }
    let x = inc.deviation() / lambda_signed;
    if x < 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(-2.0 * x - theta_s_dt)
}

/// Gaussian counter-law `-(2/λ²)(dS - dA)² - θ dt`, kept only as a negative
/// control: it is not additive over independent subsystems.
pub fn gaussian_log_weight(inc: &ActionIncrement, lambda_signed: f64, theta_s_dt: f64) -> Result<f64> {
    if lambda_signed == 0.0 || !lambda_signed.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be non-zero and finite, got {lambda_signed}")));
    }
    let x = inc.deviation() / lambda_signed;
    Ok(-2.0 * x * x - theta_s_dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityCheck {
    pub log_joint: f64,
    pub log_first: f64,
    pub log_second: f64,
}

impl SeparabilityCheck {
    pub fn defect(&self) -> f64 {
        (self.log_joint - self.log_first - self.log_second).abs()
    }
}

pub fn check_separability(
    inc1: &ActionIncrement,
    inc2: &ActionIncrement,
    lambda_signed: f64,
    theta1_dt: f64,
    theta2_dt: f64,
) -> Result<SeparabilityCheck> {
    separability_with(transition_log_weight, inc1, inc2, lambda_signed, theta1_dt, theta2_dt)
}

/// Separability of an arbitrary log-weight law (used for the Gaussian control).
pub fn separability_with(
    law: impl Fn(&ActionIncrement, f64, f64) -> Result<f64>,
    inc1: &ActionIncrement,
    inc2: &ActionIncrement,
    lambda_signed: f64,
    theta1_dt: f64,
    theta2_dt: f64,
) -> Result<SeparabilityCheck> {
    let joint = inc1.combine(inc2);
    Ok(SeparabilityCheck {
        log_joint: law(&joint, lambda_signed, theta1_dt + theta2_dt)?,
        log_first: law(inc1, lambda_signed, theta1_dt)?,
        log_second: law(inc2, lambda_signed, theta2_dt)?,
    })
}

/// Log-additivity over random composite increments, with the Gaussian law as control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilitySummary {
    pub n: usize,
    pub max_defect: f64,
    pub gaussian_max_defect: f64,
    /// Fraction of trials where the Gaussian law misses additivity by more than `1e-12`.
    pub gaussian_failure_fraction: f64,
}

/// Independent sign-locked subsystem pairs with `dA ~ U(-5, 5)` and `θ dt ~ U(-1, 1)`.
pub fn separability_trials<R: Rng + ?Sized>(params: &StochasticParams, n: usize, rng: &mut R) -> Result<SeparabilitySummary> {
    let mut out = SeparabilitySummary { n, max_defect: 0.0, gaussian_max_defect: 0.0, gaussian_failure_fraction: 0.0 };
    let mut failures = 0usize;
    for _ in 0..n {
        let sign: i8 = if rng.random::<bool>() { 1 } else { -1 };
        let lambda = f64::from(sign) * params.lambda_mag;
        let draw = |rng: &mut R| {
            let a = 10.0 * rng.random::<f64>() - 5.0;
            let t = 2.0 * rng.random::<f64>() - 1.0;
            (ActionIncrement::from_deviation(a, sample_deviation(params, sign, rng)), t)
        };
        let (i1, t1) = draw(rng);
        let (i2, t2) = draw(rng);
        let e = check_separability(&i1, &i2, lambda, t1, t2)?;
        let g = separability_with(gaussian_log_weight, &i1, &i2, lambda, t1, t2)?;
        out.max_defect = out.max_defect.max(e.defect());
        out.gaussian_max_defect = out.gaussian_max_defect.max(g.defect());
        if g.defect() > 1e-12 {
            failures += 1;
        }
    }
    out.gaussian_failure_fraction = failures as f64 / n.max(1) as f64;
    Ok(out)
}

/// Draws `dS - dA` from the one-sided exponential density with mean `|λ|/2`
/// and sign `lambda_sign`.
pub fn sample_deviation<R: Rng + ?Sized>(params: &StochasticParams, lambda_sign: i8, rng: &mut R) -> f64 {
    let exp = Exp::new(2.0 / params.lambda_mag).expect("positive rate");
    let magnitude: f64 = exp.sample(rng);
    if lambda_sign < 0 {
        -magnitude
    } else {
        magnitude
    }
}

/// One realization of the sign-locked (ξ, λ) process on a `dt` lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignPath {
    pub dt: f64,
    /// Shared sign of ξ and λ per `dt` step.
    pub signs: Vec<i8>,
    pub steps_per_xi_block: usize,
    /// `|ξ|` per τ_ξ block (mean 1).
    pub xi_magnitudes: Vec<f64>,
    pub steps_per_lambda_block: Option<usize>,
    /// `|λ|` per τ_λ block; a single entry when τ_λ = ∞.
    pub lambda_magnitudes: Vec<f64>,
}

impl SignPath {
    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// Step index holding time `t` (held at the last step past the end).
    pub fn step_at(&self, t: f64) -> usize {
        ((t / self.dt).floor().max(0.0) as usize).min(self.signs.len().saturating_sub(1))
    }

    pub fn sign(&self, step: usize) -> i8 {
        self.signs[step]
    }

    pub fn xi(&self, step: usize) -> f64 {
        f64::from(self.signs[step]) * self.xi_magnitudes[step / self.steps_per_xi_block]
    }

    /// Signed λ at a step; always carries the sign of ξ.
    pub fn lambda(&self, step: usize) -> f64 {
        let block = self.steps_per_lambda_block.map_or(0, |s| step / s);
        f64::from(self.signs[step]) * self.lambda_magnitudes[block]
    }

    pub fn lambda_at(&self, t: f64) -> f64 {
        self.lambda(self.step_at(t))
    }

    pub fn mean(&self) -> f64 {
        self.signs.iter().map(|&s| f64::from(s)).sum::<f64>() / self.signs.len() as f64
    }

    pub fn lag1_autocorrelation(&self) -> f64 {
        let n = self.signs.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let var: f64 = self.signs.iter().map(|&s| (f64::from(s) - m).powi(2)).sum();
        let cov: f64 = self
            .signs
            .windows(2)
            .map(|w| (f64::from(w[0]) - m) * (f64::from(w[1]) - m))
            .sum();
        cov / var
    }
}

pub fn sample_sign_path<R: Rng + ?Sized>(params: &StochasticParams, n_steps: usize, rng: &mut R) -> Result<SignPath> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("sign path needs at least one step".into()));
    }
    let coin = |rng: &mut R| if rng.random::<bool>() { 1i8 } else { -1i8 };
    let mut signs = Vec::with_capacity(n_steps);
    match params.sign_law {
        SignLaw::Iid => signs.extend((0..n_steps).map(|_| coin(rng))),
        SignLaw::Telegraph { flip_probability } => {
            let mut s = coin(rng);
            signs.push(s);
            for _ in 1..n_steps {
                if rng.random::<f64>() < flip_probability {
                    s = -s;
                }
                signs.push(s);
            }
        }
    }
    let per_xi = params.steps_per_xi_block();
    let xi_magnitudes = (0..n_steps.div_ceil(per_xi)).map(|_| params.xi_mag_law.draw(1.0, rng)).collect();
    let per_lambda = params.steps_per_lambda_block();
    let n_lambda = per_lambda.map_or(1, |s| n_steps.div_ceil(s));
    let lambda_magnitudes = (0..n_lambda)
        .map(|_| params.lambda_mag_law.draw(params.lambda_mag, rng))
        .collect();
    Ok(SignPath {
        dt: params.dt,
        signs,
        steps_per_xi_block: per_xi,
        xi_magnitudes,
        steps_per_lambda_block: per_lambda,
        lambda_magnitudes,
    })
}

/// Summary of `n` draws of [`sample_deviation`] with a fixed sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub n: usize,
    pub mean_abs: f64,
    pub std_error: f64,
    pub variance_abs: f64,
    pub variance_std_error: f64,
    /// Fraction of draws whose sign matches the requested λ sign.
    pub sign_lock_fraction: f64,
}

pub fn deviation_statistics<R: Rng + ?Sized>(
    params: &StochasticParams,
    n: usize,
    lambda_sign: i8,
    rng: &mut R,
) -> DeviationStats {
    let draws: Vec<f64> = (0..n).map(|_| sample_deviation(params, lambda_sign, rng)).collect();
    let locked = draws.iter().filter(|&&d| (d >= 0.0) == (lambda_sign > 0)).count();
    let nf = n as f64;
    let mean = draws.iter().map(|d| d.abs()).sum::<f64>() / nf;
    let centred: Vec<f64> = draws.iter().map(|d| (d.abs() - mean).powi(2)).collect();
    let var = centred.iter().sum::<f64>() / (nf - 1.0);
    let m4 = centred.iter().map(|c| c * c).sum::<f64>() / nf;
    DeviationStats {
        n,
        mean_abs: mean,
        std_error: (var / nf).sqrt(),
        variance_abs: var,
        variance_std_error: ((m4 - var * var) / nf).max(0.0).sqrt(),
        sign_lock_fraction: locked as f64 / nf,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn log_weight_examples() {
        let classical = ActionIncrement::new(0.7, 0.7);
        assert_eq!(transition_log_weight(&classical, 1.0, 0.0).unwrap(), 0.0);
        let inc = ActionIncrement::from_deviation(0.3, 0.5);
        assert!((inc.deviation() - 0.5).abs() < 1e-15);
        assert!((transition_log_weight(&inc, 1.0, 0.0).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(transition_log_weight(&inc, -1.0, 0.0).unwrap(), f64::NEG_INFINITY);
        assert!(transition_log_weight(&inc, 0.0, 0.0).is_err());
    }

    #[test]
    fn increment_identities() {
        let inc = ActionIncrement::new(1.25, -0.5);
        assert!((inc.deviation() + inc.z() / 2.0).abs() < 1e-15);
        assert_eq!(inc.flipped().z(), -inc.z());
        assert_eq!(inc.flipped().d_s(), inc.d_s());
    }

    #[test]
    fn separability_examples() {
        let a = ActionIncrement::from_deviation(0.0, 0.2);
        let b = ActionIncrement::from_deviation(0.0, 0.3);
        let c = check_separability(&a, &b, 1.0, 0.0, 0.0).unwrap();
        assert!((c.log_joint + 1.0).abs() < 1e-15);
        assert!((c.log_first + 0.4).abs() < 1e-15);
        assert!((c.log_second + 0.6).abs() < 1e-15);
        let z = ActionIncrement::new(0.0, 0.0);
        let c0 = check_separability(&z, &z, 1.0, 0.0, 0.0).unwrap();
        assert_eq!((c0.log_joint, c0.log_first, c0.log_second), (0.0, 0.0, 0.0));
    }

    #[test]
    fn gaussian_law_is_not_separable() {
        let a = ActionIncrement::from_deviation(0.0, 0.2);
        let b = ActionIncrement::from_deviation(0.0, 0.3);
        let c = separability_with(gaussian_log_weight, &a, &b, 1.0, 0.0, 0.0).unwrap();
        assert!(c.defect() > 0.1);
    }

    #[test]
    fn deviation_sampler_moments() {
        let params = StochasticParams::default();
        let mut rng = stream(11, 0);
        let stats = deviation_statistics(&params, 200_000, 1, &mut rng);
        assert_eq!(stats.sign_lock_fraction, 1.0);
        assert!((stats.mean_abs - 0.5).abs() < 3.0 * stats.std_error + 1e-3);
        assert!((stats.variance_abs - 0.25).abs() < 3.0 * stats.variance_std_error);
        let neg = deviation_statistics(&params, 1000, -1, &mut rng);
        assert_eq!(neg.sign_lock_fraction, 1.0);
    }

    #[test]
    fn classical_limit_concentrates_deviations() {
        let eps = 0.01;
        let mut last = 1.0;
        for &lambda in &[1.0, 0.1, 0.01, 0.001] {
            let params = StochasticParams { lambda_mag: lambda, ..Default::default() };
            let mut rng = stream(5, 1);
            let n = 20_000;
            let frac = (0..n).filter(|_| sample_deviation(&params, 1, &mut rng).abs() > eps).count() as f64 / n as f64;
            assert!(frac <= last);
            last = frac;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn sign_path_contract() {
        let params = StochasticParams { seed: 3, ..Default::default() };
        let a = sample_sign_path(&params, 100_000, &mut stream(params.seed, 0)).unwrap();
        let b = sample_sign_path(&params, 100_000, &mut stream(params.seed, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.mean().abs() < 0.01);
        assert!(a.lag1_autocorrelation().abs() < 0.01);
        for k in (0..a.len()).step_by(997) {
            assert_eq!(a.lambda(k).signum(), a.xi(k).signum());
            assert_eq!(a.lambda(k).abs(), 1.0);
        }
        assert!(sample_sign_path(&params, 0, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn telegraph_sign_path_is_correlated_but_unbiased() {
        let params = StochasticParams { sign_law: SignLaw::Telegraph { flip_probability: 0.1 }, ..Default::default() };
        let p = sample_sign_path(&params, 200_000, &mut stream(9, 0)).unwrap();
        assert!((p.lag1_autocorrelation() - 0.8).abs() < 0.02);
        assert!(p.mean().abs() < 0.05);
    }

    #[test]
    fn magnitude_blocks_are_piecewise_constant() {
        let params = StochasticParams {
            tau_lambda: Some(1.0),
            xi_mag_law: MagnitudeLaw::Uniform { relative_half_width: 0.05 },
            lambda_mag_law: MagnitudeLaw::Uniform { relative_half_width: 0.05 },
            ..Default::default()
        };
        params.validate().unwrap();
        let p = sample_sign_path(&params, 5000, &mut stream(1, 0)).unwrap();
        assert_eq!(p.steps_per_xi_block, 10);
        assert_eq!(p.steps_per_lambda_block, Some(1000));
        for k in 0..p.len() {
            let block_start = k / 10 * 10;
            assert_eq!(p.xi(k).abs(), p.xi(block_start).abs());
            assert!((0.95..=1.05).contains(&p.xi(k).abs()));
        }
        assert_eq!(p.lambda_magnitudes.len(), 5);
    }

    #[test]
    fn hierarchy_violations_are_rejected() {
        let bad = StochasticParams { tau_xi: 5e-3, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Configuration { .. })));
        let bad = StochasticParams { tau_lambda: Some(0.05), ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(StochasticParams::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn exponential_law_is_log_additive(
            d1 in 0.0f64..3.0, d2 in 0.0f64..3.0,
            a1 in -5.0f64..5.0, a2 in -5.0f64..5.0,
            t1 in -1.0f64..1.0, t2 in -1.0f64..1.0,
            lambda in 0.1f64..4.0, negative in any::<bool>(),
        ) {
            let l = if negative { -lambda } else { lambda };
            let s = l.signum();
            let i1 = ActionIncrement::from_deviation(a1, s * d1);
            let i2 = ActionIncrement::from_deviation(a2, s * d2);
            let c = check_separability(&i1, &i2, l, t1, t2).unwrap();
            prop_assert!(c.defect() < 1e-12);
        }
    }
}
