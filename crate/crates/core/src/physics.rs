//! Physical constants and measurement parameters. Units: ħ = 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HBAR: f64 = 1.0;

/// Smallest admissible packet separation factor.
pub const MIN_SEP_FACTOR: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConfig {
    /// `|λ|` in units of ħ.
    #[serde(default = "default_lambda")]
    pub lambda_mag: f64,
    /// System–pointer coupling.
    pub g: f64,
    /// Duration of the measurement interaction.
    pub t_m: f64,
    /// Standard deviation of the pointer density `|φ(q₂)|²`.
    pub sigma: f64,
    /// Required packet separation in units of `sigma`.
    #[serde(default = "default_sep")]
    pub sep_factor: f64,
}

fn default_lambda() -> f64 {
    HBAR
}

fn default_sep() -> f64 {
    8.0
}

impl PhysicalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mag > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda_mag must be positive, got {}", self.lambda_mag)));
        }
        if !(self.t_m > 0.0) {
            return Err(Error::InvalidParameter(format!("t_m must be positive, got {}", self.t_m)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.g.is_finite() {
            return Err(Error::InvalidParameter("g must be finite".into()));
        }
        Ok(())
    }

    /// Half-width of the outcome window around each pointer centre.
    pub fn window_half_width(&self) -> f64 {
        0.5 * self.sep_factor * self.sigma
    }

    /// Packet non-overlap: `|g| t_M Δω_min ≥ k σ` with `k ≥ 6`.
    pub fn check_separation(&self, min_gap: f64) -> Result<()> {
        if self.sep_factor < MIN_SEP_FACTOR {
            return Err(Error::Configuration {
                invariant: "packet separation",
                detail: format!("sep_factor = {} is below the minimum {MIN_SEP_FACTOR}", self.sep_factor),
            });
        }
        let spread = self.g.abs() * self.t_m * min_gap;
        let needed = self.sep_factor * self.sigma;
        if spread < needed {
            return Err(Error::Configuration {
                invariant: "packet separation",
                detail: format!(
                    "|g| t_M Δω = {spread:.4} < sep_factor σ = {needed:.4}; narrow the packet or strengthen the coupling"
                ),
            });
        }
        Ok(())
    }
}
