//! Wire formats of the overlay (all integers little-endian).
//!
//! Datagram frame, label `overlay-data`:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 1 | version (1) |
//! | 1 | 1 | frame type (1 data, 2 ack) |
//! | 2 | 8 | circuit_id |
//! | 10 | 8 | sequence_id |
//! | 18 | 4 | key_epoch |
//! | 22 | 4 | pad_offset (one-time pad only, else 0) |
//! | 26 | 4 | ciphertext length `n` |
//! | 30 | n | ciphertext |
//! | 30+n | 16 | auth tag |
//!
//! Control records, label `overlay-ctl` (inside an exchange):
//! `1 | circuit_id u64 | epoch u32 | purpose u8 | offset u64 | len u32`
//! reserves pool bytes; `2 | status u8` acknowledges it.
//! Offset echoes, label `overlay-sync`, one-way:
//! `3 | circuit_id u64 | calls u64 | consumed u64`.

use super::cipher::{Tag, TAG_LEN};
use crate::error::{Error, Result};

pub const DATA_LABEL: &str = "overlay-data";
pub const CTL_LABEL: &str = "overlay-ctl";
pub const SYNC_LABEL: &str = "overlay-sync";

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Data = 1,
    Ack = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub frame_type: FrameType,
    pub circuit_id: u64,
    pub sequence_id: u64,
    pub key_epoch: u32,
    pub pad_offset: u32,
    pub ciphertext: Vec<u8>,
    pub auth_tag: Tag,
}

impl Datagram {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len() + TAG_LEN);
        out.push(VERSION);
        out.push(self.frame_type as u8);
        out.extend_from_slice(&self.circuit_id.to_le_bytes());
        out.extend_from_slice(&self.sequence_id.to_le_bytes());
        out.extend_from_slice(&self.key_epoch.to_le_bytes());
        out.extend_from_slice(&self.pad_offset.to_le_bytes());
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.auth_tag);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN + TAG_LEN {
            return Err(Error::Malformed(format!("datagram of {} bytes", buf.len())));
        }
        if buf[0] != VERSION {
            return Err(Error::Malformed(format!("datagram version {}", buf[0])));
        }
        let frame_type = match buf[1] {
            1 => FrameType::Data,
            2 => FrameType::Ack,
            t => return Err(Error::Malformed(format!("frame type {t}"))),
        };
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
        let n = u32_at(26) as usize;
        if buf.len() != HEADER_LEN + n + TAG_LEN {
            return Err(Error::Malformed(format!(
                "ciphertext length {n} inconsistent with frame of {} bytes",
                buf.len()
            )));
        }
        Ok(Datagram {
            frame_type,
            circuit_id: u64_at(2),
            sequence_id: u64_at(10),
            key_epoch: u32_at(18),
            pad_offset: u32_at(22),
            ciphertext: buf[HEADER_LEN..HEADER_LEN + n].to_vec(),
            auth_tag: buf[HEADER_LEN + n..].try_into().expect("16 bytes"),
        })
    }
}

/// Circuit id of a raw frame, for routing before full parsing.
pub fn peek_circuit_id(buf: &[u8]) -> Option<u64> {
    buf.get(2..10).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservePurpose {
    Open = 0,
    Refresh = 1,
    SyncBlock = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReserveStatus {
    Ok = 0,
    Desync = 1,
    Exhausted = 2,
    UnknownCircuit = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Reserve {
        circuit_id: u64,
        epoch: u32,
        purpose: ReservePurpose,
        offset: u64,
        len: u32,
    },
    ReserveAck {
        status: ReserveStatus,
    },
    Echo {
        circuit_id: u64,
        calls: u64,
        consumed: u64,
    },
}

impl Control {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match *self {
            Control::Reserve {
                circuit_id,
                epoch,
                purpose,
                offset,
                len,
            } => {
                out.push(1);
                out.extend_from_slice(&circuit_id.to_le_bytes());
                out.extend_from_slice(&epoch.to_le_bytes());
                out.push(purpose as u8);
                out.extend_from_slice(&offset.to_le_bytes());
                out.extend_from_slice(&len.to_le_bytes());
            }
            Control::ReserveAck { status } => {
                out.push(2);
                out.push(status as u8);
            }
            Control::Echo {
                circuit_id,
                calls,
                consumed,
            } => {
                out.push(3);
                out.extend_from_slice(&circuit_id.to_le_bytes());
                out.extend_from_slice(&calls.to_le_bytes());
                out.extend_from_slice(&consumed.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let bad = || Error::Malformed(format!("control record of {} bytes", buf.len()));
        let u64_at = |o: usize| -> Result<u64> {
            Ok(u64::from_le_bytes(buf.get(o..o + 8).ok_or_else(bad)?.try_into().expect("8")))
        };
        let u32_at = |o: usize| -> Result<u32> {
            Ok(u32::from_le_bytes(buf.get(o..o + 4).ok_or_else(bad)?.try_into().expect("4")))
        };
        match buf.first() {
            Some(1) if buf.len() == 26 => Ok(Control::Reserve {
                circuit_id: u64_at(1)?,
                epoch: u32_at(9)?,
                purpose: match buf[13] {
                    0 => ReservePurpose::Open,
                    1 => ReservePurpose::Refresh,
                    2 => ReservePurpose::SyncBlock,
                    _ => return Err(bad()),
                },
                offset: u64_at(14)?,
                len: u32_at(22)?,
            }),
            Some(2) if buf.len() == 2 => Ok(Control::ReserveAck {
                status: match buf[1] {
                    0 => ReserveStatus::Ok,
                    1 => ReserveStatus::Desync,
                    2 => ReserveStatus::Exhausted,
                    3 => ReserveStatus::UnknownCircuit,
                    _ => return Err(bad()),
                },
            }),
            Some(3) if buf.len() == 25 => Ok(Control::Echo {
                circuit_id: u64_at(1)?,
                calls: u64_at(9)?,
                consumed: u64_at(17)?,
            }),
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let d = Datagram {
            frame_type: FrameType::Data,
            circuit_id: 0x0102,
            sequence_id: 7,
            key_epoch: 3,
            pad_offset: 9,
            ciphertext: vec![0xAA, 0xBB],
            auth_tag: [0xCC; 16],
        };
        let b = d.encode();
        assert_eq!(b.len(), 30 + 2 + 16);
        assert_eq!(&b[..4], &[1, 1, 0x02, 0x01]);
        assert_eq!(b[10], 7);
        assert_eq!(b[18], 3);
        assert_eq!(b[22], 9);
        assert_eq!(b[26], 2);
        assert_eq!(&b[30..32], &[0xAA, 0xBB]);
        assert_eq!(peek_circuit_id(&b), Some(0x0102));
    }

    #[test]
    fn malformed_frames_rejected() {
        assert!(Datagram::decode(&[1, 1, 0]).is_err());
        let mut b = Datagram {
            frame_type: FrameType::Ack,
            circuit_id: 1,
            sequence_id: 1,
            key_epoch: 0,
            pad_offset: 0,
            ciphertext: vec![],
            auth_tag: [0; 16],
        }
        .encode();
        b.push(0);
        assert!(Datagram::decode(&b).is_err());
        assert!(Control::decode(&[9]).is_err());
    }

    proptest! {
        #[test]
        fn datagram_roundtrip(cid in any::<u64>(), seq in any::<u64>(), epoch in any::<u32>(),
                              off in any::<u32>(), ct in proptest::collection::vec(any::<u8>(), 0..64),
                              tag in any::<[u8; 16]>(), ack in any::<bool>()) {
            let d = Datagram {
                frame_type: if ack { FrameType::Ack } else { FrameType::Data },
                circuit_id: cid, sequence_id: seq, key_epoch: epoch, pad_offset: off,
                ciphertext: ct, auth_tag: tag,
            };
            prop_assert_eq!(Datagram::decode(&d.encode()).unwrap(), d);
        }

        #[test]
        fn control_roundtrip(cid in any::<u64>(), a in any::<u64>(), b in any::<u64>(), e in any::<u32>(), l in any::<u32>()) {
            for c in [
                Control::Reserve { circuit_id: cid, epoch: e, purpose: ReservePurpose::Refresh, offset: a, len: l },
                Control::ReserveAck { status: ReserveStatus::Desync },
                Control::Echo { circuit_id: cid, calls: a, consumed: b },
            ] {
                prop_assert_eq!(Control::decode(&c.encode()).unwrap(), c);
            }
        }
    }
}
