//! BB84 sessions over one quantum link plus its classical channel,
//! distilling byte-identical key pools at both endpoints.
//!
//! A session runs: transmission, sifting, QBER estimation on a disclosed
//! sample, the abort check, block-parity reconciliation with a final digest
//! check, removal of every disclosed bit, and Toeplitz privacy
//! amplification. Protocol messages ride the `qkd-sift` label; framing is
//! in [`wire`].

pub mod amplify;
pub mod pool;
pub mod qber;
pub mod reconcile;
pub mod session;
pub mod sift;
pub mod wire;

pub use amplify::{binary_entropy, output_bit_len, privacy_amplify, toeplitz_hash, AmplifiedKey};
pub use pool::{KeyPool, LedgerEntry};
pub use qber::{choose_sample, estimate_qber};
pub use reconcile::{block_parities, discard_mismatched, key_digest, reconcile, Reconciled};
pub use session::{run_session, SessionReport};
pub use sift::{sift, sift_indices, SiftedKey};

use crate::error::{invalid, Result};

pub const QKD_LABEL: &str = "qkd-sift";

/// Bits of the final digest comparison; removed from the key afterwards.
pub const DIGEST_BITS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QkdSessionParams {
    pub pulse_count: usize,
    pub sample_fraction: f64,
    pub qber_abort_threshold: f64,
    pub reconciliation_block_size: usize,
    pub privacy_safety_margin_bits: usize,
    pub seed: u64,
}

impl Default for QkdSessionParams {
    fn default() -> Self {
        QkdSessionParams {
            pulse_count: 10_000,
            sample_fraction: 0.1,
            qber_abort_threshold: 0.11,
            reconciliation_block_size: 4,
            privacy_safety_margin_bits: 64,
            seed: 0,
        }
    }
}

impl QkdSessionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return invalid(format!("sample_fraction {} not in (0, 1)", self.sample_fraction));
        }
        if !(self.qber_abort_threshold > 0.0 && self.qber_abort_threshold < 1.0) {
            return invalid(format!(
                "qber_abort_threshold {} not in (0, 1)",
                self.qber_abort_threshold
            ));
        }
        if self.reconciliation_block_size == 0 {
            return invalid("reconciliation_block_size must be positive");
        }
        if self.pulse_count < 16 * self.reconciliation_block_size {
            return invalid(format!(
                "pulse_count {} below 16 x block size {}",
                self.pulse_count, self.reconciliation_block_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QkdStatus {
    Ok,
    AbortedQber,
    AbortedInsufficient,
}

impl QkdStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QkdStatus::Ok => "ok",
            QkdStatus::AbortedQber => "aborted_qber",
            QkdStatus::AbortedInsufficient => "aborted_insufficient",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            QkdStatus::Ok => 0,
            QkdStatus::AbortedQber => 1,
            QkdStatus::AbortedInsufficient => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(QkdStatus::Ok),
            1 => Some(QkdStatus::AbortedQber),
            2 => Some(QkdStatus::AbortedInsufficient),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QkdOutcome {
    pub status: QkdStatus,
    pub qber_estimate: f64,
    pub distilled_bits: usize,
}

/// Packs bits MSB-first; the last byte is zero-padded.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count)
        .map(|i| bytes.get(i / 8).is_some_and(|b| b & (0x80 >> (i % 8)) != 0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pack_roundtrip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let packed = pack_bits(&bits);
            prop_assert_eq!(packed.len(), bits.len().div_ceil(8));
            prop_assert_eq!(unpack_bits(&packed, bits.len()), bits);
        }
    }

    #[test]
    fn params_validation() {
        assert!(QkdSessionParams::default().validate().is_ok());
        let d = QkdSessionParams::default();
        let p = QkdSessionParams {
            pulse_count: 16 * d.reconciliation_block_size - 1,
            ..d
        };
        assert!(p.validate().is_err());
        let p = QkdSessionParams {
            sample_fraction: 1.0,
            ..QkdSessionParams::default()
        };
        assert!(p.validate().is_err());
    }
}
