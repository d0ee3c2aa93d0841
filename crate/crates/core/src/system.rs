//! A particle in external metric, vector and scalar potentials,
//! `H = ½ g^{ij}(q)(p_i − a_i)(p_j − a_j) + V(q)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricPotentialSystem {
    pub dim: usize,
    /// Inverse metric: `[g11]` in one dimension, `[g11, g12, g22]` in two.
    pub metric: Vec<Expr>,
    /// Covector `a_i`, one entry per dimension.
    #[serde(default)]
    pub vector: Vec<Expr>,
    #[serde(default = "zero")]
    pub potential: Expr,
}

fn zero() -> Expr {
    Expr::constant(0.0)
}

impl MetricPotentialSystem {
    pub fn flat(dim: usize) -> Self {
        let metric = match dim {
            1 => vec![Expr::constant(1.0)],
            _ => vec![Expr::constant(1.0), Expr::constant(0.0), Expr::constant(1.0)],
        };
        Self { dim, metric, vector: vec![zero(); dim], potential: zero() }
    }

    /// Flat metric with `V = ½ |q|²`.
    pub fn harmonic(dim: usize) -> Self {
        let v = if dim == 1 { "0.5*x^2" } else { "0.5*(x^2 + y^2)" };
        Self { potential: Expr::parse(v).expect("literal"), ..Self::flat(dim) }
    }

    pub fn with_potential(mut self, v: &str) -> Result<Self> {
        self.potential = Expr::parse(v)?;
        Ok(self)
    }

    pub fn with_metric(mut self, entries: &[&str]) -> Result<Self> {
        self.metric = entries.iter().map(|s| Expr::parse(s)).collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn with_vector(mut self, entries: &[&str]) -> Result<Self> {
        self.vector = entries.iter().map(|s| Expr::parse(s)).collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::InvalidSystem { location: "dim".into(), detail: format!("dimension must be 1 or 2, got {}", self.dim) });
        }
        let want = if self.dim == 1 { 1 } else { 3 };
        if self.metric.len() != want {
            return Err(Error::InvalidSystem {
                location: "metric".into(),
                detail: format!("expected {want} metric entries, got {}", self.metric.len()),
            });
        }
        if !self.vector.is_empty() && self.vector.len() != self.dim {
            return Err(Error::InvalidSystem {
                location: "vector".into(),
                detail: format!("expected {} vector components, got {}", self.dim, self.vector.len()),
            });
        }
        let all = self.metric.iter().chain(&self.vector).chain(std::iter::once(&self.potential));
        for e in all {
            if e.arity() > self.dim {
                return Err(Error::InvalidSystem {
                    location: e.source().to_string(),
                    detail: format!("refers to a coordinate beyond dimension {}", self.dim),
                });
            }
        }
        Ok(())
    }

    /// `g^{ij}(q)` as a 2×2 block; the unused entries are zero in one dimension.
    pub fn metric_at(&self, q: &[f64]) -> [[f64; 2]; 2] {
        match self.metric.as_slice() {
            [g] => [[g.eval(q), 0.0], [0.0, 0.0]],
            [a, b, c] => {
                let off = b.eval(q);
                [[a.eval(q), off], [off, c.eval(q)]]
            }
            _ => [[f64::NAN; 2]; 2],
        }
    }

    pub fn vector_at(&self, q: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, e) in out.iter_mut().zip(&self.vector) {
            *o = e.eval(q);
        }
        out
    }

    pub fn potential_at(&self, q: &[f64]) -> f64 {
        self.potential.eval(q)
    }

    /// Positive-definiteness and finiteness of all fields at `q`.
    pub fn check_point(&self, q: &[f64]) -> Result<()> {
        let g = self.metric_at(q);
        let location = || format!("q = {:?}", &q[..self.dim.min(q.len())]);
        let finite = g.iter().flatten().all(|v| v.is_finite())
            && self.vector_at(q).iter().all(|v| v.is_finite())
            && self.potential_at(q).is_finite();
        if !finite {
            return Err(Error::InvalidSystem { location: location(), detail: "non-finite field value".into() });
        }
        let pd = if self.dim == 1 { g[0][0] > 0.0 } else { g[0][0] > 0.0 && g[0][0] * g[1][1] - g[0][1] * g[0][1] > 0.0 };
        if !pd {
            return Err(Error::InvalidSystem {
                location: location(),
                detail: format!("metric {:?} is not positive definite", g),
            });
        }
        Ok(())
    }

    /// Classical velocity `g^{ij}(p_j − a_j)`.
    pub fn velocity(&self, q: &[f64], momentum: &[f64]) -> [f64; 2] {
        let g = self.metric_at(q);
        let a = self.vector_at(q);
        let k = [momentum[0] - a[0], momentum.get(1).copied().unwrap_or(0.0) - a[1]];
        [g[0][0] * k[0] + g[0][1] * k[1], g[1][0] * k[0] + g[1][1] * k[1]]
    }

    pub fn hamiltonian(&self, q: &[f64], momentum: &[f64]) -> f64 {
        let v = self.velocity(q, momentum);
        let a = self.vector_at(q);
        let k = [momentum[0] - a[0], momentum.get(1).copied().unwrap_or(0.0) - a[1]];
        0.5 * (v[0] * k[0] + v[1] * k[1]) + self.potential_at(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_fields() {
        let s = MetricPotentialSystem::harmonic(2);
        s.validate().unwrap();
        assert_eq!(s.potential_at(&[1.0, 2.0]), 2.5);
        assert_eq!(s.metric_at(&[0.3, 0.1]), [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(s.hamiltonian(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
    }

    #[test]
    fn rejects_indefinite_metric() {
        let s = MetricPotentialSystem::flat(2).with_metric(&["1", "2", "1"]).unwrap();
        assert!(matches!(s.check_point(&[0.0, 0.0]), Err(Error::InvalidSystem { .. })));
        let s1 = MetricPotentialSystem::flat(1).with_metric(&["x"]).unwrap();
        assert!(s1.check_point(&[1.0]).is_ok());
        assert!(s1.check_point(&[-1.0]).is_err());
    }

    #[test]
    fn structural_validation() {
        let mut s = MetricPotentialSystem::flat(1);
        s.potential = Expr::parse("y").unwrap();
        assert!(s.validate().is_err());
        let s = MetricPotentialSystem::flat(2).with_metric(&["1"]).unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn velocity_subtracts_vector_potential() {
        let s = MetricPotentialSystem::flat(1).with_metric(&["2"]).unwrap().with_vector(&["0.5"]).unwrap();
        assert_eq!(s.velocity(&[0.0], &[1.5]), [2.0, 0.0]);
    }
}
