use rand::seq::index;
use rand::Rng;

use super::SiftedKey;
use crate::error::{invalid, Result};

/// Picks `ceil(fraction * len)` positions (at least one) of a sifted key
/// and returns the corresponding pulse indices in increasing order.
pub fn choose_sample(key: &SiftedKey, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    if key.is_empty() {
        return Vec::new();
    }
    let size = ((fraction * key.len() as f64).ceil() as usize).clamp(1, key.len());
    let mut picks: Vec<usize> = index::sample(rng, key.len(), size).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|p| key.source_indices[p]).collect()
}

/// Compares `local` against the peer's disclosed `(pulse_index, bit)`
/// pairs. Returns the disagreement fraction and the key with the disclosed
/// positions removed.
pub fn estimate_qber(local: &SiftedKey, disclosed: &[(usize, bool)]) -> Result<(f64, SiftedKey)> {
    if disclosed.is_empty() {
        return invalid("empty QBER sample");
    }
    let mut disclosed_sorted = disclosed.to_vec();
    disclosed_sorted.sort_unstable_by_key(|d| d.0);
    let mut errors = 0usize;
    let mut remaining = SiftedKey::default();
    let mut sample = disclosed_sorted.iter().peekable();
    for (&bit, &idx) in local.bits.iter().zip(&local.source_indices) {
        match sample.peek() {
            Some(&&(s_idx, peer_bit)) if s_idx == idx => {
                if peer_bit != bit {
                    errors += 1;
                }
                sample.next();
            }
            _ => {
                remaining.bits.push(bit);
                remaining.source_indices.push(idx);
            }
        }
    }
    if let Some((idx, _)) = sample.next() {
        return invalid(format!("disclosed index {idx} not in the sifted key"));
    }
    Ok((errors as f64 / disclosed.len() as f64, remaining))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn key(bits: Vec<bool>) -> SiftedKey {
        let n = bits.len();
        SiftedKey {
            bits,
            source_indices: (0..n).map(|i| 3 * i + 1).collect(),
        }
    }

    fn full_disclosure(k: &SiftedKey) -> Vec<(usize, bool)> {
        k.source_indices.iter().copied().zip(k.bits.iter().copied()).collect()
    }

    #[test]
    fn identical_and_complement() {
        let mut r = rng::substream(1, "q");
        let bits: Vec<bool> = (0..500).map(|_| r.gen()).collect();
        let k = key(bits.clone());
        let (q, rest) = estimate_qber(&k, &full_disclosure(&k)).unwrap();
        assert_eq!(q, 0.0);
        assert!(rest.is_empty());
        let flipped = key(bits.iter().map(|b| !b).collect());
        assert_eq!(estimate_qber(&k, &full_disclosure(&flipped)).unwrap().0, 1.0);
    }

    #[test]
    fn planted_flips_counted() {
        let mut r = rng::substream(2, "q");
        let bits: Vec<bool> = (0..1000).map(|_| r.gen()).collect();
        let mut peer = bits.clone();
        let planted = index::sample(&mut r, 1000, 37).into_vec();
        for &p in &planted {
            peer[p] = !peer[p];
        }
        // direct count oracle
        let count = bits.iter().zip(&peer).filter(|(a, b)| a != b).count();
        assert_eq!(count, 37);
        let k = key(bits);
        let (q, _) = estimate_qber(&k, &full_disclosure(&key(peer))).unwrap();
        assert!((q - 0.037).abs() < 1e-12);
    }

    #[test]
    fn sample_is_removed_and_sized() {
        let k = key(vec![true; 200]);
        let mut r = rng::substream(3, "q");
        let sample = choose_sample(&k, 0.1, &mut r);
        assert_eq!(sample.len(), 20);
        let disclosed: Vec<_> = sample.iter().map(|&i| (i, true)).collect();
        let (_, rest) = estimate_qber(&k, &disclosed).unwrap();
        assert_eq!(rest.len(), 180);
        assert!(rest.source_indices.iter().all(|i| !sample.contains(i)));
    }

    #[test]
    fn empty_or_foreign_sample_rejected() {
        let k = key(vec![true; 10]);
        assert!(estimate_qber(&k, &[]).is_err());
        assert!(estimate_qber(&k, &[(2, true)]).is_err());
    }
}
