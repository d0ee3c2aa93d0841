//! Discretized configuration space.
//!
//! Two axis topologies are used throughout the crate:
//!
//! * periodic axes (the system ring, periodic boxes) with nodes `min + i h`,
//!   `h = L / n`, integrated by the periodic trapezoid rule;
//! * line axes (the pointer coordinate, metric-system domains) with cell-centred
//!   nodes `min + (i + 1/2) h`, `h = (max - min) / n`. Fields are taken to
//!   vanish outside `[min, max]`, so the trapezoid rule reduces to `h * sum`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Periodic,
    Line,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub topology: Topology,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn periodic(min: f64, period: f64, n: usize) -> Result<Self> {
        Self::new(Topology::Periodic, min, min + period, n)
    }

    pub fn line(min: f64, max: f64, n: usize) -> Result<Self> {
        Self::new(Topology::Line, min, max, n)
    }

    /// The unit ring `θ ∈ [0, 2π)`.
    pub fn ring(n: usize) -> Result<Self> {
        Self::periodic(0.0, 2.0 * PI, n)
    }

    fn new(topology: Topology, min: f64, max: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("axis needs at least one point".into()));
        }
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::InvalidParameter(format!(
                "axis bounds must satisfy min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self { topology, min, max, n })
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.max - self.min
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.length() / self.n as f64
    }

    #[inline]
    pub fn is_periodic(&self) -> bool {
        self.topology == Topology::Periodic
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        match self.topology {
            Topology::Periodic => self.min + i as f64 * self.spacing(),
            Topology::Line => self.min + (i as f64 + 0.5) * self.spacing(),
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Left edge of the cell owned by node 0. Cells tile the axis with width `h`.
    #[inline]
    pub fn cell_origin(&self) -> f64 {
        match self.topology {
            Topology::Periodic => self.min - 0.5 * self.spacing(),
            Topology::Line => self.min,
        }
    }

    /// Maps a periodic coordinate into `[min, max)`; line coordinates pass through.
    #[inline]
    pub fn wrap(&self, x: f64) -> f64 {
        match self.topology {
            Topology::Periodic => self.min + (x - self.min).rem_euclid(self.length()),
            Topology::Line => x,
        }
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        match self.topology {
            Topology::Periodic => x.is_finite(),
            Topology::Line => x >= self.min && x <= self.max,
        }
    }

    /// Same axis with twice as many points.
    pub fn refined(&self) -> Self {
        Self { n: 2 * self.n, ..*self }
    }
}

/// The joint system-ring × pointer-line grid of the measurement model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_theta: usize,
    pub q2_min: f64,
    pub q2_max: f64,
    pub n_q2: usize,
}

impl GridSpec {
    pub const MIN_THETA: usize = 8;
    pub const MIN_Q2: usize = 32;

    pub fn new(n_theta: usize, q2_min: f64, q2_max: f64, n_q2: usize) -> Result<Self> {
        let spec = Self { n_theta, q2_min, q2_max, n_q2 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_theta < Self::MIN_THETA {
            return Err(Error::InvalidParameter(format!(
                "n_theta = {} is below the minimum {}",
                self.n_theta,
                Self::MIN_THETA
            )));
        }
        if self.n_q2 < Self::MIN_Q2 {
            return Err(Error::InvalidParameter(format!(
                "n_q2 = {} is below the minimum {}",
                self.n_q2,
                Self::MIN_Q2
            )));
        }
        if !(self.q2_max > self.q2_min) {
            return Err(Error::InvalidParameter(format!(
                "q2 range [{}, {}] is empty",
                self.q2_min, self.q2_max
            )));
        }
        Ok(())
    }

    pub fn d_theta(&self) -> f64 {
        2.0 * PI / self.n_theta as f64
    }

    pub fn d_q2(&self) -> f64 {
        (self.q2_max - self.q2_min) / self.n_q2 as f64
    }

    pub fn theta_axis(&self) -> Axis {
        Axis { topology: Topology::Periodic, min: 0.0, max: 2.0 * PI, n: self.n_theta }
    }

    pub fn q2_axis(&self) -> Axis {
        Axis { topology: Topology::Line, min: self.q2_min, max: self.q2_max, n: self.n_q2 }
    }

    pub fn refined(&self) -> Self {
        Self { n_theta: 2 * self.n_theta, n_q2: 2 * self.n_q2, ..*self }
    }
}
