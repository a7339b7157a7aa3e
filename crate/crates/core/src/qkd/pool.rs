use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One consumption of pool bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub offset: usize,
    pub len: usize,
    pub purpose: String,
}

/// Distilled key material held at one end of a link. Both ends of a link
/// hold identical material and consume it at identical offsets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyPool {
    session_counter: u64,
    material: Vec<u8>,
    consumed_offset: usize,
    low_watermark: usize,
    ledger: Vec<LedgerEntry>,
}

impl KeyPool {
    pub fn new(low_watermark: usize) -> Self {
        KeyPool {
            low_watermark,
            ..KeyPool::default()
        }
    }

    /// A pool pre-loaded with `material`, as if distilled earlier.
    pub fn with_material(material: Vec<u8>, low_watermark: usize) -> Self {
        KeyPool {
            material,
            low_watermark,
            ..KeyPool::default()
        }
    }

    pub fn session_counter(&self) -> u64 {
        self.session_counter
    }

    pub fn material(&self) -> &[u8] {
        &self.material
    }

    pub fn consumed_offset(&self) -> usize {
        self.consumed_offset
    }

    pub fn low_watermark(&self) -> usize {
        self.low_watermark
    }

    pub fn set_low_watermark(&mut self, bytes: usize) {
        self.low_watermark = bytes;
    }

    pub fn available(&self) -> usize {
        self.material.len() - self.consumed_offset
    }

    pub fn below_watermark(&self) -> bool {
        self.available() < self.low_watermark
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    /// Appends the output of one successful session.
    pub fn append_session(&mut self, bytes: &[u8]) {
        self.material.extend_from_slice(bytes);
        self.session_counter += 1;
    }

    /// Hands out the next `len` bytes. They are never handed out again.
    pub fn take(&mut self, len: usize, purpose: &str) -> Result<(usize, Vec<u8>)> {
        if len > self.available() {
            return Err(Error::KeyExhausted(format!(
                "{purpose}: need {len} bytes, {} available",
                self.available()
            )));
        }
        let offset = self.consumed_offset;
        let bytes = self.material[offset..offset + len].to_vec();
        self.consumed_offset += len;
        self.ledger.push(LedgerEntry {
            offset,
            len,
            purpose: purpose.to_string(),
        });
        Ok((offset, bytes))
    }

    /// Like [`take`](Self::take) but only if the local offset equals the
    /// peer's; used by the responding end of a reservation.
    pub fn take_at(&mut self, offset: usize, len: usize, purpose: &str) -> Result<Vec<u8>> {
        if offset != self.consumed_offset {
            return Err(Error::Desync(format!(
                "{purpose}: peer reserved at offset {offset}, local offset is {}",
                self.consumed_offset
            )));
        }
        self.take(len, purpose).map(|(_, b)| b)
    }

    /// Checks that ledger entries are in bounds and never overlap.
    pub fn audit(&self) -> Result<()> {
        let mut entries: Vec<_> = self.ledger.iter().collect();
        entries.sort_by_key(|e| e.offset);
        let mut end = 0;
        for e in entries {
            if e.offset < end {
                return Err(Error::InvalidInput(format!(
                    "key bytes at offset {} consumed twice ({})",
                    e.offset, e.purpose
                )));
            }
            end = e.offset + e.len;
        }
        if end > self.material.len() || end > self.consumed_offset {
            return Err(Error::InvalidInput("ledger runs past consumed material".into()));
        }
        Ok(())
    }

    pub fn consumed_total(&self) -> usize {
        self.ledger.iter().map(|e| e.len).sum()
    }

    pub fn material_digest(&self) -> [u8; 32] {
        Sha256::digest(&self.material).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn take_advances_and_exhausts() {
        let mut p = KeyPool::with_material((0..10).collect(), 5);
        assert_eq!(p.take(3, "a").unwrap(), (0, vec![0, 1, 2]));
        assert_eq!(p.take(3, "b").unwrap(), (3, vec![3, 4, 5]));
        assert!(p.below_watermark());
        assert!(matches!(p.take(5, "c"), Err(Error::KeyExhausted(_))));
        assert_eq!(p.available(), 4);
        p.audit().unwrap();
        assert_eq!(p.consumed_total(), 6);
    }

    #[test]
    fn take_at_detects_offset_disagreement() {
        let mut p = KeyPool::with_material(vec![7; 16], 0);
        assert!(matches!(p.take_at(2, 4, "x"), Err(Error::Desync(_))));
        assert_eq!(p.take_at(0, 4, "x").unwrap(), vec![7; 4]);
    }

    #[test]
    fn audit_catches_overlap() {
        let mut p = KeyPool::with_material(vec![0; 16], 0);
        p.take(8, "a").unwrap();
        p.ledger.push(LedgerEntry {
            offset: 4,
            len: 2,
            purpose: "forged".into(),
        });
        assert!(p.audit().is_err());
    }

    #[test]
    fn append_counts_sessions() {
        let mut p = KeyPool::new(0);
        p.append_session(&[1, 2]);
        p.append_session(&[3]);
        assert_eq!(p.session_counter(), 2);
        assert_eq!(p.material(), &[1, 2, 3]);
    }
}
