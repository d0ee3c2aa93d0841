//! Goodness-of-fit helpers for ensemble diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper tail `P(χ²_dof ≥ stat)`.
pub fn chi2_sf(stat: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    match ChiSquared::new(dof as f64) {
        Ok(d) => d.sf(stat),
        Err(_) => f64::NAN,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson test of `counts` against `probabilities`; categories with zero
/// probability must have zero counts (otherwise the p-value is 0).
pub fn chi_square(counts: &[u64], probabilities: &[f64]) -> ChiSquareTest {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cats = 0usize;
    let mut impossible = false;
    for (&c, &p) in counts.iter().zip(probabilities) {
        if p > 0.0 {
            let e = p * n as f64;
            stat += (c as f64 - e).powi(2) / e;
            cats += 1;
        } else if c > 0 {
            impossible = true;
        }
    }
    let dof = cats.saturating_sub(1);
    if impossible {
        return ChiSquareTest { statistic: f64::INFINITY, dof, p_value: 0.0 };
    }
    ChiSquareTest { statistic: stat, dof, p_value: chi2_sf(stat, dof) }
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lam = (sn + 0.12 + 0.11 / sn) * d;
    if lam < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = f64::from(k);
        let term = 2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lam * lam).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub n: usize,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsTest {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f);
    }
    KsTest { statistic: d, n, p_value: ks_p_value(d, n) }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn chi2_tail_values() {
        // P(χ²₁ ≥ 3.841) ≈ 0.05, P(χ²₄₉ ≥ 49) ≈ 0.47
        assert!((chi2_sf(3.841_458_820_694_124, 1) - 0.05).abs() < 1e-9);
        let p = chi2_sf(49.0, 49);
        assert!(p > 0.45 && p < 0.49);
    }

    #[test]
    fn chi_square_exact_fit() {
        let t = chi_square(&[50, 30, 20], &[0.5, 0.3, 0.2]);
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.dof, 2);
        assert!((t.p_value - 1.0).abs() < 1e-12);
        assert_eq!(chi_square(&[1, 2], &[1.0, 0.0]).p_value, 0.0);
    }

    #[test]
    fn ks_reference_values() {
        // Kolmogorov distribution: Q(1.358) ≈ 0.05
        let n = 1_000_000;
        let d = 1.358 / (n as f64).sqrt();
        assert!((ks_p_value(d, n) - 0.05).abs() < 1e-3);
        let mut rng = crate::rng::stream(5, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        assert!(ks_test(&xs, |x| x.clamp(0.0, 1.0)).p_value > 0.01);
        assert!(ks_test(&xs, |x| x.clamp(0.0, 1.0).powi(2)).p_value < 1e-6);
    }

    #[test]
    fn mean_se() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
