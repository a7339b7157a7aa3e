//! Built-in integrands over the unit cube.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimand {
    /// `f ≡ 1`.
    Constant,
    /// Indicator of `x² + y² < 1` on the square; integral `π/4`.
    QuarterCircle,
    /// `∏ sin(π xᵢ)`; integral `(2/π)^d`.
    ProductOfSines,
}

impl Estimand {
    pub const ALL: [Estimand; 3] = [Estimand::Constant, Estimand::QuarterCircle, Estimand::ProductOfSines];

    pub fn name(self) -> &'static str {
        match self {
            Estimand::Constant => "constant",
            Estimand::QuarterCircle => "quarter-circle",
            Estimand::ProductOfSines => "product-of-sines",
        }
    }

    /// Dimension used when none is given.
    pub fn default_dim(self) -> usize {
        match self {
            Estimand::Constant => 1,
            Estimand::QuarterCircle | Estimand::ProductOfSines => 2,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Estimand::Constant => 1.0,
            Estimand::QuarterCircle => {
                if x.iter().take(2).map(|v| v * v).sum::<f64>() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Estimand::ProductOfSines => x.iter().map(|v| (PI * v).sin()).product(),
        }
    }

    /// The exact integral over the d-cube.
    pub fn exact(self, d: usize) -> f64 {
        match self {
            Estimand::Constant => 1.0,
            Estimand::QuarterCircle => PI / 4.0,
            Estimand::ProductOfSines => (2.0 / PI).powi(d as i32),
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimand::ALL
            .into_iter()
            .find(|e| e.name() == s || e.name().replace('-', "_") == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimand `{s}`")))
    }
}
