//! QKD protocol records carried on the `qkd-sift` label (inside the
//! exchange header). Every record is
//! `body_len: u32 LE | tag: u8 | body`, where `body_len` counts the tag
//! and body. Bit vectors are `count: u32 LE | bits packed MSB-first`;
//! index lists are `count: u32 LE | u32 LE ...`.

use super::{pack_bits, unpack_bits};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QkdMessage {
    /// Sender's bases, one bit per pulse (1 = diagonal).
    SiftRequest { bases: Vec<bool> },
    /// Receiver's detection mask and bases.
    SiftResponse { detected: Vec<bool>, bases: Vec<bool> },
    /// Sampled pulse indices and the sender's bits at them.
    SampleRequest { indices: Vec<u32>, bits: Vec<bool> },
    SampleResponse { bits: Vec<bool> },
    ParityRequest { block_size: u32, parities: Vec<bool> },
    ParityResponse { parities: Vec<bool> },
    DigestRequest { digest: [u8; 8] },
    DigestResponse { matches: bool },
    AmplifyRequest { out_bits: u32, seed: Vec<u8> },
    AmplifyResponse { out_bits: u32 },
    Close { status: u8, distilled_bits: u32 },
    CloseAck { status: u8 },
}

const SIFT_REQ: u8 = 1;
const SIFT_RESP: u8 = 2;
const SAMPLE_REQ: u8 = 3;
const SAMPLE_RESP: u8 = 4;
const PARITY_REQ: u8 = 5;
const PARITY_RESP: u8 = 6;
const DIGEST_REQ: u8 = 7;
const DIGEST_RESP: u8 = 8;
const AMPLIFY_REQ: u8 = 9;
const AMPLIFY_RESP: u8 = 10;
const CLOSE: u8 = 11;
const CLOSE_ACK: u8 = 12;

fn put_bits(out: &mut Vec<u8>, bits: &[bool]) {
    out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
    out.extend_from_slice(&pack_bits(bits));
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Malformed(format!("need {n} bytes, {} left", self.buf.len())));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bits(&mut self) -> Result<Vec<bool>> {
        let count = self.u32()? as usize;
        let bytes = self.take(count.div_ceil(8))?;
        Ok(unpack_bits(bytes, count))
    }

    fn u32s(&mut self) -> Result<Vec<u32>> {
        let count = self.u32()? as usize;
        (0..count).map(|_| self.u32()).collect()
    }
}

impl QkdMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let tag = match self {
            QkdMessage::SiftRequest { bases } => {
                put_bits(&mut body, bases);
                SIFT_REQ
            }
            QkdMessage::SiftResponse { detected, bases } => {
                put_bits(&mut body, detected);
                put_bits(&mut body, bases);
                SIFT_RESP
            }
            QkdMessage::SampleRequest { indices, bits } => {
                body.extend_from_slice(&(indices.len() as u32).to_le_bytes());
                for i in indices {
                    body.extend_from_slice(&i.to_le_bytes());
                }
                put_bits(&mut body, bits);
                SAMPLE_REQ
            }
            QkdMessage::SampleResponse { bits } => {
                put_bits(&mut body, bits);
                SAMPLE_RESP
            }
            QkdMessage::ParityRequest { block_size, parities } => {
                body.extend_from_slice(&block_size.to_le_bytes());
                put_bits(&mut body, parities);
                PARITY_REQ
            }
            QkdMessage::ParityResponse { parities } => {
                put_bits(&mut body, parities);
                PARITY_RESP
            }
            QkdMessage::DigestRequest { digest } => {
                body.extend_from_slice(digest);
                DIGEST_REQ
            }
            QkdMessage::DigestResponse { matches } => {
                body.push(u8::from(*matches));
                DIGEST_RESP
            }
            QkdMessage::AmplifyRequest { out_bits, seed } => {
                body.extend_from_slice(&out_bits.to_le_bytes());
                body.extend_from_slice(&(seed.len() as u32).to_le_bytes());
                body.extend_from_slice(seed);
                AMPLIFY_REQ
            }
            QkdMessage::AmplifyResponse { out_bits } => {
                body.extend_from_slice(&out_bits.to_le_bytes());
                AMPLIFY_RESP
            }
            QkdMessage::Close { status, distilled_bits } => {
                body.push(*status);
                body.extend_from_slice(&distilled_bits.to_le_bytes());
                CLOSE
            }
            QkdMessage::CloseAck { status } => {
                body.push(*status);
                CLOSE_ACK
            }
        };
        let mut out = Vec::with_capacity(5 + body.len());
        out.extend_from_slice(&((body.len() + 1) as u32).to_le_bytes());
        out.push(tag);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf };
        let len = r.u32()? as usize;
        if len != r.buf.len() || len == 0 {
            return Err(Error::Malformed(format!(
                "record length {len} but {} bytes follow",
                r.buf.len()
            )));
        }
        let tag = r.u8()?;
        let msg = match tag {
            SIFT_REQ => QkdMessage::SiftRequest { bases: r.bits()? },
            SIFT_RESP => QkdMessage::SiftResponse {
                detected: r.bits()?,
                bases: r.bits()?,
            },
            SAMPLE_REQ => QkdMessage::SampleRequest {
                indices: r.u32s()?,
                bits: r.bits()?,
            },
            SAMPLE_RESP => QkdMessage::SampleResponse { bits: r.bits()? },
            PARITY_REQ => QkdMessage::ParityRequest {
                block_size: r.u32()?,
                parities: r.bits()?,
            },
            PARITY_RESP => QkdMessage::ParityResponse { parities: r.bits()? },
            DIGEST_REQ => QkdMessage::DigestRequest {
                digest: r.take(8)?.try_into().expect("8 bytes"),
            },
            DIGEST_RESP => QkdMessage::DigestResponse { matches: r.u8()? != 0 },
            AMPLIFY_REQ => {
                let out_bits = r.u32()?;
                let n = r.u32()? as usize;
                QkdMessage::AmplifyRequest {
                    out_bits,
                    seed: r.take(n)?.to_vec(),
                }
            }
            AMPLIFY_RESP => QkdMessage::AmplifyResponse { out_bits: r.u32()? },
            CLOSE => QkdMessage::Close {
                status: r.u8()?,
                distilled_bits: r.u32()?,
            },
            CLOSE_ACK => QkdMessage::CloseAck { status: r.u8()? },
            other => return Err(Error::Malformed(format!("unknown QKD tag {other}"))),
        };
        if !r.buf.is_empty() {
            return Err(Error::Malformed(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(msg)
    }
}
