//! Single-pass block-parity reconciliation: blocks whose parities disagree
//! are discarded by both parties, then a digest of the whole remaining key
//! catches blocks that carried an even number of errors.

use sha2::{Digest, Sha256};

use super::pack_bits;
use crate::error::{invalid, Error, Result};

/// Parity of each consecutive `block_size` chunk; a short final chunk is
/// its own block.
pub fn block_parities(bits: &[bool], block_size: usize) -> Vec<bool> {
    bits.chunks(block_size.max(1))
        .map(|c| c.iter().fold(false, |acc, &b| acc ^ b))
        .collect()
}

/// Keeps the blocks whose local and peer parities agree.
pub fn discard_mismatched(bits: &[bool], block_size: usize, own: &[bool], peer: &[bool]) -> Result<Vec<bool>> {
    let blocks = bits.chunks(block_size.max(1));
    if blocks.len() != own.len() || own.len() != peer.len() {
        return invalid(format!(
            "{} blocks, {} local parities, {} peer parities",
            blocks.len(),
            own.len(),
            peer.len()
        ));
    }
    Ok(blocks
        .zip(own.iter().zip(peer))
        .filter(|(_, (a, b))| a == b)
        .flat_map(|(block, _)| block.iter().copied())
        .collect())
}

/// First 8 bytes of `SHA-256(len: u32 LE || bits packed MSB-first)`.
pub fn key_digest(bits: &[bool]) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update((bits.len() as u32).to_le_bytes());
    h.update(pack_bits(bits));
    h.finalize()[..8].try_into().expect("8 bytes")
}

/// Removes the last bit of every block: one bit per disclosed parity.
pub fn drop_parity_bits(bits: &[bool], block_size: usize) -> Vec<bool> {
    bits.chunks(block_size.max(1))
        .flat_map(|c| c[..c.len() - 1].iter().copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconciled {
    pub local: Vec<bool>,
    pub peer: Vec<bool>,
    pub kept_blocks: usize,
    pub total_blocks: usize,
}

/// Runs the parity pass for both parties and the final digest check.
pub fn reconcile(local: &[bool], peer: &[bool], block_size: usize) -> Result<Reconciled> {
    if local.len() != peer.len() {
        return invalid(format!("key lengths differ: {} vs {}", local.len(), peer.len()));
    }
    if block_size == 0 {
        return invalid("block size must be positive");
    }
    let own_p = block_parities(local, block_size);
    let peer_p = block_parities(peer, block_size);
    let kept_blocks = own_p.iter().zip(&peer_p).filter(|(a, b)| a == b).count();
    let local_out = discard_mismatched(local, block_size, &own_p, &peer_p)?;
    let peer_out = discard_mismatched(peer, block_size, &peer_p, &own_p)?;
    if key_digest(&local_out) != key_digest(&peer_out) {
        return Err(Error::ReconciliationFailed);
    }
    Ok(Reconciled {
        local: local_out,
        peer: peer_out,
        kept_blocks,
        total_blocks: own_p.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::index;
    use rand::Rng;

    fn random_bits(n: usize, seed: u64) -> Vec<bool> {
        let mut r = rng::substream(seed, "rec");
        (0..n).map(|_| r.gen()).collect()
    }

    #[test]
    fn zero_errors_is_identity() {
        let k = random_bits(1000, 1);
        let out = reconcile(&k, &k, 16).unwrap();
        assert_eq!(out.local, k);
        assert_eq!(out.peer, k);
        assert_eq!(out.kept_blocks, out.total_blocks);
    }

    #[test]
    fn single_flip_discards_one_block() {
        let k = random_bits(64, 2);
        let mut peer = k.clone();
        peer[19] = !peer[19];
        let out = reconcile(&k, &peer, 8).unwrap();
        assert_eq!(out.local.len(), 56);
        assert_eq!(out.local, out.peer);
        assert_eq!(out.kept_blocks, 7);
    }

    #[test]
    fn two_flips_in_one_block_fail_the_digest() {
        let k = random_bits(64, 3);
        let mut peer = k.clone();
        peer[1] = !peer[1];
        peer[2] = !peer[2];
        assert_eq!(reconcile(&k, &peer, 8).unwrap_err(), Error::ReconciliationFailed);
    }

    #[test]
    fn parity_bits_dropped_per_block() {
        let bits = random_bits(20, 4);
        let stripped = drop_parity_bits(&bits, 8);
        assert_eq!(stripped.len(), 20 - 3);
        assert_eq!(&stripped[..7], &bits[..7]);
        assert_eq!(&stripped[7..14], &bits[8..15]);
    }

    /// Independent oracle: plants Bernoulli(q) errors and counts blocks
    /// with an even number of errors, which are exactly the blocks whose
    /// parities agree.
    fn retention_oracle(q: f64, block: usize, len: usize, trials: usize, seed: u64) -> (f64, f64) {
        let mut r = rng::substream(seed, "retention-oracle");
        let blocks = len / block;
        let fractions: Vec<f64> = (0..trials)
            .map(|_| {
                let kept = (0..blocks)
                    .filter(|_| (0..block).filter(|_| r.gen::<f64>() < q).count() % 2 == 0)
                    .count();
                kept as f64 / blocks as f64
            })
            .collect();
        mean_and_se(&fractions)
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn surviving_fraction_matches_oracle() {
        let (q, block, len, trials) = (0.02, 16, 4096, 100);
        let (oracle_mean, oracle_se) = retention_oracle(q, block, len, trials, 99);
        let mut r = rng::substream(5, "planted");
        let fractions: Vec<f64> = (0..trials)
            .map(|t| {
                let local = random_bits(len, 1000 + t as u64);
                let mut peer = local.clone();
                let flips = (0..len).filter(|_| r.gen::<f64>() < q).count();
                for p in index::sample(&mut r, len, flips) {
                    peer[p] = !peer[p];
                }
                let own = block_parities(&local, block);
                let theirs = block_parities(&peer, block);
                discard_mismatched(&local, block, &own, &theirs).unwrap().len() as f64 / len as f64
            })
            .collect();
        let (mean, se) = mean_and_se(&fractions);
        let combined = (se * se + oracle_se * oracle_se).sqrt();
        assert!(
            (mean - oracle_mean).abs() <= 3.0 * combined,
            "impl {mean} vs oracle {oracle_mean} (se {combined})"
        );
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(reconcile(&[true], &[true, false], 8).is_err());
        assert!(discard_mismatched(&[true; 16], 8, &[true], &[true, true]).is_err());
    }
}
