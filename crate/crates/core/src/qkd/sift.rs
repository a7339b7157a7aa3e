use crate::error::{invalid, Result};
use crate::quantum::{Basis, DetectionRecord, QubitSymbol};

/// Bits kept after sifting, with the pulse index each came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftedKey {
    pub bits: Vec<bool>,
    pub source_indices: Vec<usize>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Pulse indices that were detected and measured in the sender's basis.
pub fn sift_indices(sender_bases: &[Basis], receiver_bases: &[Basis], detected: &[bool]) -> Result<Vec<usize>> {
    if sender_bases.len() != receiver_bases.len() || sender_bases.len() != detected.len() {
        return invalid(format!(
            "sift inputs differ in length: {} / {} / {}",
            sender_bases.len(),
            receiver_bases.len(),
            detected.len()
        ));
    }
    Ok((0..sender_bases.len())
        .filter(|&i| detected[i] && sender_bases[i] == receiver_bases[i])
        .collect())
}

/// Both parties' sifted keys; they share `source_indices`.
pub fn sift(
    sender: &[QubitSymbol],
    receiver_bases: &[Basis],
    detections: &[DetectionRecord],
) -> Result<(SiftedKey, SiftedKey)> {
    if detections.len() != sender.len() {
        return invalid(format!(
            "{} detections for {} pulses",
            detections.len(),
            sender.len()
        ));
    }
    let sender_bases: Vec<_> = sender.iter().map(|s| s.basis).collect();
    let detected: Vec<_> = detections.iter().map(|d| d.bit().is_some()).collect();
    let kept = sift_indices(&sender_bases, receiver_bases, &detected)?;
    let sender_key = SiftedKey {
        bits: kept.iter().map(|&i| sender[i].bit).collect(),
        source_indices: kept.clone(),
    };
    let receiver_key = SiftedKey {
        bits: kept
            .iter()
            .map(|&i| detections[i].bit().expect("kept pulses were measured"))
            .collect(),
        source_indices: kept,
    };
    Ok((sender_key, receiver_key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{transmit_pulses, QuantumLinkParams};
    use crate::rng;

    fn symbols(n: usize, seed: u64) -> Vec<QubitSymbol> {
        let mut r = rng::substream(seed, "sift-test");
        (0..n).map(|_| QubitSymbol::random(&mut r)).collect()
    }

    #[test]
    fn all_matching_keeps_everything() {
        let s = symbols(300, 1);
        let bases: Vec<_> = s.iter().map(|x| x.basis).collect();
        let det = transmit_pulses(&s, &bases, &QuantumLinkParams::perfect(2)).unwrap();
        let (a, b) = sift(&s, &bases, &det).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a.bits, b.bits);
        assert_eq!(a.source_indices, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn all_differing_keeps_nothing() {
        let s = symbols(300, 3);
        let bases: Vec<_> = s
            .iter()
            .map(|x| Basis::from_bit(!x.basis.as_bit()))
            .collect();
        let det = transmit_pulses(&s, &bases, &QuantumLinkParams::perfect(4)).unwrap();
        let (a, b) = sift(&s, &bases, &det).unwrap();
        assert!(a.is_empty() && b.is_empty());
    }

    #[test]
    fn random_bases_keep_half() {
        let n = 10_000;
        let s = symbols(n, 5);
        let bases: Vec<_> = symbols(n, 6).iter().map(|x| x.basis).collect();
        let det = transmit_pulses(&s, &bases, &QuantumLinkParams::perfect(7)).unwrap();
        let (a, _) = sift(&s, &bases, &det).unwrap();
        let frac = a.len() as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((frac - 0.5).abs() <= 3.0 * sigma, "kept {frac}");
    }

    #[test]
    fn lost_pulses_dropped_and_lengths_checked() {
        let bases = [Basis::Rectilinear, Basis::Diagonal];
        assert_eq!(sift_indices(&bases, &bases, &[false, true]).unwrap(), vec![1]);
        assert!(sift_indices(&bases, &bases[..1], &[true, true]).is_err());
    }
}
