//! The qubit-carrying link: pulse-by-pulse transmission with loss,
//! bit-flip noise, and an optional intercept-resend adversary.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

impl Basis {
    pub fn random(rng: &mut impl Rng) -> Self {
        if rng.gen::<bool>() {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        }
    }

    pub fn as_bit(self) -> bool {
        matches!(self, Basis::Diagonal)
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        }
    }
}

/// A prepared pulse: the basis it was encoded in and the bit it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QubitSymbol {
    pub basis: Basis,
    pub bit: bool,
}

impl QubitSymbol {
    pub fn random(rng: &mut impl Rng) -> Self {
        QubitSymbol {
            basis: Basis::random(rng),
            bit: rng.gen(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Eavesdropper {
    #[default]
    None,
    InterceptResend,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantumLinkParams {
    pub loss_probability: f64,
    pub flip_probability: f64,
    pub eavesdropper: Eavesdropper,
    pub seed: u64,
}

impl Default for QuantumLinkParams {
    fn default() -> Self {
        QuantumLinkParams {
            loss_probability: 0.1,
            flip_probability: 0.01,
            eavesdropper: Eavesdropper::None,
            seed: 0,
        }
    }
}

impl QuantumLinkParams {
    pub fn perfect(seed: u64) -> Self {
        QuantumLinkParams {
            loss_probability: 0.0,
            flip_probability: 0.0,
            eavesdropper: Eavesdropper::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("loss_probability", self.loss_probability),
            ("flip_probability", self.flip_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Lost,
    Measured(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    pub pulse_index: usize,
    pub outcome: Outcome,
}

impl DetectionRecord {
    pub fn bit(&self) -> Option<bool> {
        match self.outcome {
            Outcome::Lost => None,
            Outcome::Measured(b) => Some(b),
        }
    }
}

/// Sends `symbols` over the link and measures each surviving pulse in the
/// matching entry of `receiver_bases`.
///
/// Per pulse, in this order: loss; the adversary (measure in a random
/// basis, re-prepare in that basis); the receiver's measurement, which
/// reproduces the pulse bit on a basis match (then flipped with
/// `flip_probability`) and is uniform otherwise. All draws come from the
/// single stream `substream(params.seed, "quantum-link")`.
pub fn transmit_pulses(
    symbols: &[QubitSymbol],
    receiver_bases: &[Basis],
    params: &QuantumLinkParams,
) -> Result<Vec<DetectionRecord>> {
    if symbols.len() != receiver_bases.len() {
        return invalid(format!(
            "{} symbols but {} receiver bases",
            symbols.len(),
            receiver_bases.len()
        ));
    }
    params.validate()?;
    let mut rng = rng::substream(params.seed, "quantum-link");
    let records = symbols
        .iter()
        .zip(receiver_bases)
        .enumerate()
        .map(|(pulse_index, (&sent, &measure_basis))| {
            let outcome = if rng.gen::<f64>() < params.loss_probability {
                Outcome::Lost
            } else {
                let mut pulse = sent;
                if params.eavesdropper == Eavesdropper::InterceptResend {
                    let eve_basis = Basis::random(&mut rng);
                    let eve_bit = measure(&mut rng, pulse, eve_basis, 0.0);
                    pulse = QubitSymbol {
                        basis: eve_basis,
                        bit: eve_bit,
                    };
                }
                Outcome::Measured(measure(
                    &mut rng,
                    pulse,
                    measure_basis,
                    params.flip_probability,
                ))
            };
            DetectionRecord {
                pulse_index,
                outcome,
            }
        })
        .collect();
    Ok(records)
}

fn measure(rng: &mut impl Rng, pulse: QubitSymbol, basis: Basis, flip: f64) -> bool {
    if pulse.basis == basis {
        let flipped = flip > 0.0 && rng.gen::<f64>() < flip;
        pulse.bit ^ flipped
    } else {
        rng.gen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_symbols(n: usize, seed: u64) -> Vec<QubitSymbol> {
        let mut r = rng::substream(seed, "test-symbols");
        (0..n).map(|_| QubitSymbol::random(&mut r)).collect()
    }

    fn three_sigma(n: usize, p: f64) -> f64 {
        3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn certain_loss_loses_everything() {
        let symbols = random_symbols(500, 1);
        let bases: Vec<_> = symbols.iter().map(|s| s.basis).collect();
        let params = QuantumLinkParams {
            loss_probability: 1.0,
            ..QuantumLinkParams::perfect(3)
        };
        let out = transmit_pulses(&symbols, &bases, &params).unwrap();
        assert!(out.iter().all(|d| d.outcome == Outcome::Lost));
    }

    #[test]
    fn noiseless_matched_channel_is_identity() {
        let symbols = random_symbols(2000, 2);
        let bases: Vec<_> = symbols.iter().map(|s| s.basis).collect();
        let out = transmit_pulses(&symbols, &bases, &QuantumLinkParams::perfect(9)).unwrap();
        for (s, d) in symbols.iter().zip(&out) {
            assert_eq!(d.bit(), Some(s.bit));
        }
        let idx: Vec<_> = out.iter().map(|d| d.pulse_index).collect();
        assert_eq!(idx, (0..2000).collect::<Vec<_>>());
    }

    /// Enumerates the adversary's basis choice, its measured bit, and the
    /// receiver's outcome for a matched sender/receiver basis; returns the
    /// exact probability that the receiver's bit differs from the sent bit.
    fn intercept_resend_error_oracle() -> f64 {
        let sent = false;
        let mut err = 0.0;
        for eve_basis_matches in [true, false] {
            for eve_bit in [false, true] {
                let p_eve_bit = match (eve_basis_matches, eve_bit == sent) {
                    (true, true) => 1.0,
                    (true, false) => 0.0,
                    (false, _) => 0.5,
                };
                // the receiver measures in the sender's basis
                let p_receiver_wrong = if eve_basis_matches {
                    if eve_bit == sent { 0.0 } else { 1.0 }
                } else {
                    0.5
                };
                err += 0.5 * p_eve_bit * p_receiver_wrong;
            }
        }
        err
    }

    #[test]
    fn intercept_resend_induces_quarter_error() {
        let expected = intercept_resend_error_oracle();
        assert!((expected - 0.25).abs() < 1e-12);
        let n = 100_000;
        let symbols = random_symbols(n, 4);
        let bases: Vec<_> = symbols.iter().map(|s| s.basis).collect();
        let params = QuantumLinkParams {
            eavesdropper: Eavesdropper::InterceptResend,
            ..QuantumLinkParams::perfect(5)
        };
        let out = transmit_pulses(&symbols, &bases, &params).unwrap();
        let errors = symbols
            .iter()
            .zip(&out)
            .filter(|(s, d)| d.bit() != Some(s.bit))
            .count();
        let frac = errors as f64 / n as f64;
        assert!((frac - expected).abs() <= 0.01, "error fraction {frac}");
    }

    #[test]
    fn loss_fraction_is_binomial() {
        let n = 20_000;
        let symbols = random_symbols(n, 6);
        let bases: Vec<_> = symbols.iter().map(|s| s.basis).collect();
        for p in [0.1, 0.5, 0.9] {
            let params = QuantumLinkParams {
                loss_probability: p,
                ..QuantumLinkParams::perfect(11)
            };
            let out = transmit_pulses(&symbols, &bases, &params).unwrap();
            let lost = out.iter().filter(|d| d.outcome == Outcome::Lost).count();
            let frac = lost as f64 / n as f64;
            assert!((frac - p).abs() <= three_sigma(n, p), "p={p} frac={frac}");
        }
    }

    #[test]
    fn mismatched_basis_is_uniform() {
        let n = 20_000;
        let symbols: Vec<_> = (0..n)
            .map(|_| QubitSymbol {
                basis: Basis::Rectilinear,
                bit: false,
            })
            .collect();
        let bases = vec![Basis::Diagonal; n];
        let out = transmit_pulses(&symbols, &bases, &QuantumLinkParams::perfect(12)).unwrap();
        let zeros = out.iter().filter(|d| d.bit() == Some(false)).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.5).abs() <= three_sigma(n, 0.5));
    }

    #[test]
    fn same_seed_same_records() {
        let symbols = random_symbols(1000, 7);
        let bases: Vec<_> = random_symbols(1000, 8).iter().map(|s| s.basis).collect();
        let params = QuantumLinkParams::default();
        let a = transmit_pulses(&symbols, &bases, &params).unwrap();
        let b = transmit_pulses(&symbols, &bases, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_length_mismatch_and_bad_probabilities() {
        let symbols = random_symbols(3, 1);
        assert!(transmit_pulses(&symbols, &[Basis::Diagonal], &QuantumLinkParams::default()).is_err());
        let bad = QuantumLinkParams {
            loss_probability: 1.5,
            ..QuantumLinkParams::default()
        };
        let bases = vec![Basis::Diagonal; 3];
        assert!(transmit_pulses(&symbols, &bases, &bad).is_err());
    }
}
