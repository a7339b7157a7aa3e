//! Uses of a synchronized random number: splitting a simulation space
//! between nodes, parallel Monte Carlo over the parts, and parallel Las
//! Vegas search over a shared permutation.
//!
//! Nodes agree on a split by drawing the same K-bit value; nothing else is
//! exchanged.

mod estimand;
mod lasvegas;
mod montecarlo;
mod partition;

pub use estimand::Estimand;
pub use lasvegas::{parallel_las_vegas_search, probe_order, probe_sets, SearchOutcome};
pub use montecarlo::{monte_carlo, parallel_monte_carlo, McEstimate, McJob, RegionEstimate};
pub use partition::{split_axis_2d, split_circular, split_unfolded, Partition, Region, Space, MAX_CELLS};

use crate::control::Controller;
use crate::error::{invalid, Error, Result};
use crate::overlay::CircuitHandle;

/// A K-bit value drawn from a synchronized random circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SharedRandom {
    value: u64,
    k_bits: u32,
}

impl SharedRandom {
    pub fn new(value: u64, k_bits: u32) -> Result<Self> {
        if !(1..=64).contains(&k_bits) {
            return invalid(format!("K must lie in 1..=64, got {k_bits}"));
        }
        if k_bits < 64 && value >> k_bits != 0 {
            return invalid(format!("value {value} does not fit in {k_bits} bits"));
        }
        Ok(SharedRandom { value, k_bits })
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn k_bits(&self) -> u32 {
        self.k_bits
    }

    /// Draws K bits at both ends of a synchronized random circuit and
    /// checks they agree.
    pub fn draw(ctrl: &mut Controller, a: &CircuitHandle, b: &CircuitHandle, k_bits: u32) -> Result<Self> {
        let x = ctrl.sync_random(a, k_bits)?;
        let y = ctrl.sync_random(b, k_bits)?;
        if x != y {
            return Err(Error::Desync(format!("ends drew {x:#x} and {y:#x}")));
        }
        SharedRandom::new(x, k_bits)
    }
}

/// `value · 2^(-K)`. Exact for K ≤ 53; above that the low bits are
/// rounded away by the `f64` mantissa (never up to 1.0).
pub fn to_fraction(r: SharedRandom) -> f64 {
    let f = r.value as f64 / 2f64.powi(r.k_bits as i32);
    if f < 1.0 {
        f
    } else {
        1.0 - f64::EPSILON / 2.0
    }
}

/// A point of the unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPoint(Vec<f64>);

impl UnitPoint {
    pub fn new(coordinates: Vec<f64>) -> Result<Self> {
        if coordinates.is_empty() {
            return invalid("a point needs at least one coordinate");
        }
        if let Some(x) = coordinates.iter().find(|x| !(0.0..1.0).contains(*x)) {
            return invalid(format!("coordinate {x} outside [0, 1)"));
        }
        Ok(UnitPoint(coordinates))
    }

    #[inline]
    pub fn coordinates(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions() {
        assert_eq!(to_fraction(SharedRandom::new(0, 8).unwrap()), 0.0);
        assert_eq!(to_fraction(SharedRandom::new(255, 8).unwrap()), 255.0 / 256.0);
        assert_eq!(to_fraction(SharedRandom::new(1, 1).unwrap()), 0.5);
        assert!(to_fraction(SharedRandom::new(u64::MAX, 64).unwrap()) < 1.0);
        assert!(SharedRandom::new(256, 8).is_err());
        assert!(SharedRandom::new(0, 0).is_err());
    }

    #[test]
    fn points_are_checked() {
        assert!(UnitPoint::new(vec![0.0, 0.999]).is_ok());
        assert!(UnitPoint::new(vec![1.0]).is_err());
        assert!(UnitPoint::new(vec![]).is_err());
    }
}
