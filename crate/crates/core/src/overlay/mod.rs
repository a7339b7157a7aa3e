//! The four secure communication abstractions exported to applications:
//! lossy datagrams, reliable datagrams, reliable byte streams and
//! synchronized random numbers.
//!
//! This module holds the per-end circuit state machine and the wire
//! formats. Circuits are opened and driven through
//! [`Controller`](crate::control::Controller), which owns the network and
//! the key pools.

pub mod cipher;
pub mod endpoint;
pub mod frame;

use std::fmt;
use std::str::FromStr;

use crate::classical::NodeId;
use crate::error::{invalid, Error, Result};

pub use endpoint::{Endpoint, StepOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CircuitKind {
    SecureLossyDatagram,
    SecureReliableDatagram,
    SecureReliableBytestream,
    SynchronizedRandom,
}

impl CircuitKind {
    pub const ALL: [CircuitKind; 4] = [
        CircuitKind::SecureLossyDatagram,
        CircuitKind::SecureReliableDatagram,
        CircuitKind::SecureReliableBytestream,
        CircuitKind::SynchronizedRandom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CircuitKind::SecureLossyDatagram => "lossy",
            CircuitKind::SecureReliableDatagram => "reliable",
            CircuitKind::SecureReliableBytestream => "bytestream",
            CircuitKind::SynchronizedRandom => "syncrand",
        }
    }

    pub fn is_datagram(self) -> bool {
        self != CircuitKind::SynchronizedRandom
    }

    pub fn is_reliable(self) -> bool {
        matches!(
            self,
            CircuitKind::SecureReliableDatagram | CircuitKind::SecureReliableBytestream
        )
    }
}

impl fmt::Display for CircuitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CircuitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lossy" | "secure_lossy_datagram" => Ok(CircuitKind::SecureLossyDatagram),
            "reliable" | "secure_reliable_datagram" => Ok(CircuitKind::SecureReliableDatagram),
            "bytestream" | "stream" | "secure_reliable_bytestream" => {
                Ok(CircuitKind::SecureReliableBytestream)
            }
            "syncrand" | "synchronized_random" => Ok(CircuitKind::SynchronizedRandom),
            other => invalid(format!("unknown circuit kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipherMode {
    OneTimePad,
    KeyedStream,
}

impl FromStr for CipherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_time_pad" | "otp" => Ok(CipherMode::OneTimePad),
            "keyed_stream" | "stream" => Ok(CipherMode::KeyedStream),
            other => invalid(format!("unknown cipher mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircuitConfig {
    pub kind: CircuitKind,
    /// Roll the epoch once this many data datagrams (both directions)
    /// went out under it.
    pub key_refresh_datagrams: Option<u64>,
    /// Roll the epoch this many ticks after it was installed.
    pub key_refresh_ticks: Option<u64>,
    pub cipher_mode: CipherMode,
    pub max_datagram_bytes: usize,
    /// Transmissions per datagram before it is declared undeliverable.
    pub retransmit_limit: u32,
    pub ack_timeout_ticks: u64,
    /// Unacknowledged datagrams in flight per direction.
    pub window: usize,
    /// Pad bytes reserved per direction per epoch in one-time-pad mode.
    pub otp_pad_bytes: usize,
    /// Synchronized random: draws between offset echoes.
    pub echo_period: u64,
    /// Synchronized random: pool bytes reserved per refill.
    pub sync_block_bytes: usize,
}

impl CircuitConfig {
    pub fn new(kind: CircuitKind) -> Self {
        CircuitConfig {
            kind,
            key_refresh_datagrams: Some(1024),
            key_refresh_ticks: None,
            cipher_mode: CipherMode::KeyedStream,
            max_datagram_bytes: 1024,
            retransmit_limit: 50,
            ack_timeout_ticks: 4,
            window: 64,
            otp_pad_bytes: 4096,
            echo_period: 16,
            sync_block_bytes: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_datagram()
            && self.key_refresh_datagrams.is_none()
            && self.key_refresh_ticks.is_none()
        {
            return invalid("datagram circuits need key_refresh_datagrams or key_refresh_ticks");
        }
        if self.key_refresh_datagrams == Some(0) || self.key_refresh_ticks == Some(0) {
            return invalid("refresh triggers must be positive");
        }
        let positive = [
            ("max_datagram_bytes", self.max_datagram_bytes as u64),
            ("retransmit_limit", self.retransmit_limit as u64),
            ("ack_timeout_ticks", self.ack_timeout_ticks),
            ("window", self.window as u64),
            ("echo_period", self.echo_period),
            ("sync_block_bytes", self.sync_block_bytes as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.cipher_mode == CipherMode::OneTimePad && self.otp_pad_bytes < self.max_datagram_bytes {
            return invalid("otp_pad_bytes must cover at least one maximal datagram");
        }
        Ok(())
    }

    /// Pool bytes consumed when an epoch is installed.
    pub fn epoch_material_len(&self) -> usize {
        match (self.kind, self.cipher_mode) {
            (CircuitKind::SynchronizedRandom, _) => self.sync_block_bytes,
            (_, CipherMode::KeyedStream) => 4 * cipher::KEY_LEN,
            (_, CipherMode::OneTimePad) => 2 * cipher::KEY_LEN + 2 * self.otp_pad_bytes,
        }
    }
}

/// Monotone per-end counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CircuitStats {
    /// Data datagrams transmitted for the first time.
    pub sent: u64,
    /// Datagrams (or stream chunks) accepted and surfaced at this end.
    pub delivered: u64,
    /// Inbound frames discarded: failed authentication, unknown epoch,
    /// malformed.
    pub dropped: u64,
    pub duplicates: u64,
    pub retransmitted: u64,
    pub acked: u64,
    pub failed: u64,
    pub key_bytes_consumed: u64,
    pub plaintext_bytes_sent: u64,
    pub random_draws: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CircuitState {
    Open,
    /// Still usable; something went wrong (delivery failure, failed
    /// refresh) and was reported.
    Degraded(String),
    /// Synchronized random offsets diverged; the circuit must be reopened.
    Desynced,
    Closed,
}

/// One end's view of a circuit or of a multi-hop path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CircuitHandle {
    pub circuit_id: u64,
    pub kind: CircuitKind,
    pub local: NodeId,
    pub peer: NodeId,
}

impl CircuitHandle {
    /// The same circuit seen from the other end.
    pub fn reversed(&self) -> CircuitHandle {
        CircuitHandle {
            circuit_id: self.circuit_id,
            kind: self.kind,
            local: self.peer.clone(),
            peer: self.local.clone(),
        }
    }
}

/// Snapshot returned by [`Controller::circuit_info`](crate::control::Controller::circuit_info).
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitInfo {
    pub handle: CircuitHandle,
    pub epoch: u32,
    pub state: CircuitState,
    pub stats: CircuitStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub sequence_id: u64,
    pub key_epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryConfirmation {
    pub sequence_id: u64,
    pub ticks: u64,
}
