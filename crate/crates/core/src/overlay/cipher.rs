//! Payload protection for overlay datagrams.
//!
//! * `keyed_stream`: block `j` of the keystream for sequence `s` is
//!   `SHA-256(key || s: u64 LE || j: u32 LE)`; blocks are concatenated and
//!   truncated to the payload length, then XORed with the payload.
//! * `one_time_pad`: the payload is XORed with fresh pool bytes.
//! * Tags are `HMAC-SHA256(tag_key, circuit_id: u64 LE || sequence_id: u64 LE
//!   || key_epoch: u32 LE || frame_type: u8 || pad_offset: u32 LE ||
//!   ciphertext)` truncated to 16 bytes.

use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

pub const TAG_LEN: usize = 16;
pub const KEY_LEN: usize = 32;

pub type Tag = [u8; TAG_LEN];

pub fn keystream(key: &[u8; KEY_LEN], sequence_id: u64, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut block = 0u32;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(key);
        h.update(sequence_id.to_le_bytes());
        h.update(block.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        block += 1;
    }
    out.truncate(len);
    out
}

pub fn xor_in_place(data: &mut [u8], pad: &[u8]) {
    for (d, p) in data.iter_mut().zip(pad) {
        *d ^= p;
    }
}

/// Fields covered by the tag besides the ciphertext.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagInput {
    pub circuit_id: u64,
    pub sequence_id: u64,
    pub key_epoch: u32,
    pub frame_type: u8,
    pub pad_offset: u32,
}

pub fn tag(key: &[u8; KEY_LEN], input: &TagInput, ciphertext: &[u8]) -> Tag {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(&input.circuit_id.to_le_bytes());
    mac.update(&input.sequence_id.to_le_bytes());
    mac.update(&input.key_epoch.to_le_bytes());
    mac.update(&[input.frame_type]);
    mac.update(&input.pad_offset.to_le_bytes());
    mac.update(ciphertext);
    mac.finalize().into_bytes()[..TAG_LEN].try_into().expect("16 bytes")
}

pub fn verify(key: &[u8; KEY_LEN], input: &TagInput, ciphertext: &[u8], expected: &Tag) -> bool {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(&input.circuit_id.to_le_bytes());
    mac.update(&input.sequence_id.to_le_bytes());
    mac.update(&input.key_epoch.to_le_bytes());
    mac.update(&[input.frame_type]);
    mac.update(&input.pad_offset.to_le_bytes());
    mac.update(ciphertext);
    mac.verify_truncated_left(expected).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keystream_first_block_is_plain_sha256() {
        let key = [7u8; 32];
        let ks = keystream(&key, 3, 40);
        let mut h = Sha256::new();
        h.update(key);
        h.update(3u64.to_le_bytes());
        h.update(0u32.to_le_bytes());
        assert_eq!(&ks[..32], h.finalize().as_slice());
        assert_eq!(ks.len(), 40);
        assert_ne!(keystream(&key, 4, 40), ks);
    }

    #[test]
    fn tag_detects_any_change() {
        let key = [1u8; 32];
        let input = TagInput {
            circuit_id: 1,
            sequence_id: 2,
            key_epoch: 0,
            frame_type: 1,
            pad_offset: 0,
        };
        let ct = b"ciphertext".to_vec();
        let t = tag(&key, &input, &ct);
        assert!(verify(&key, &input, &ct, &t));
        let mut bad = ct.clone();
        bad[0] ^= 1;
        assert!(!verify(&key, &input, &bad, &t));
        let other = TagInput { key_epoch: 1, ..input };
        assert!(!verify(&key, &other, &ct, &t));
        assert!(!verify(&[2u8; 32], &input, &ct, &t));
    }
}
