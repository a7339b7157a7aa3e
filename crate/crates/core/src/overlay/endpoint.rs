//! One end of a circuit. Purely local: it consumes inbound frames and the
//! current tick and yields frames for the peer. Key material is installed
//! by the controller after both ends agreed on it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::cipher::{self, TagInput, KEY_LEN};
use super::frame::{Control, Datagram, FrameType};
use super::{CipherMode, CircuitConfig, CircuitKind, CircuitState, CircuitStats, SendReceipt};
use crate::error::{invalid, Error, Result};

/// Sequence ids remembered for duplicate suppression.
pub const DEDUP_WINDOW: u64 = 1 << 16;

#[derive(Debug, Clone)]
struct EpochKeys {
    send_key: [u8; KEY_LEN],
    recv_key: [u8; KEY_LEN],
    send_tag: [u8; KEY_LEN],
    recv_tag: [u8; KEY_LEN],
    send_pad: Vec<u8>,
    recv_pad: Vec<u8>,
    pad_cursor: usize,
}

fn key_at(material: &[u8], slot: usize) -> [u8; KEY_LEN] {
    material[slot * KEY_LEN..(slot + 1) * KEY_LEN]
        .try_into()
        .expect("32-byte slot")
}

impl EpochKeys {
    /// Splits an epoch reservation. Side 0 is the end that opened the
    /// circuit; "0→1" material protects what side 0 sends.
    fn split(config: &CircuitConfig, side: u8, material: &[u8]) -> Self {
        let mine_first = side == 0;
        let pick = |a: [u8; KEY_LEN], b: [u8; KEY_LEN]| if mine_first { (a, b) } else { (b, a) };
        match config.cipher_mode {
            // [stream 0→1][tag 0→1][stream 1→0][tag 1→0]
            CipherMode::KeyedStream => {
                let (send_key, recv_key) = pick(key_at(material, 0), key_at(material, 2));
                let (send_tag, recv_tag) = pick(key_at(material, 1), key_at(material, 3));
                EpochKeys {
                    send_key,
                    recv_key,
                    send_tag,
                    recv_tag,
                    send_pad: Vec::new(),
                    recv_pad: Vec::new(),
                    pad_cursor: 0,
                }
            }
            // [tag 0→1][tag 1→0][pad 0→1][pad 1→0]
            CipherMode::OneTimePad => {
                let (send_tag, recv_tag) = pick(key_at(material, 0), key_at(material, 1));
                let p = config.otp_pad_bytes;
                let pad01 = material[2 * KEY_LEN..2 * KEY_LEN + p].to_vec();
                let pad10 = material[2 * KEY_LEN + p..2 * KEY_LEN + 2 * p].to_vec();
                let (send_pad, recv_pad) = if mine_first { (pad01, pad10) } else { (pad10, pad01) };
                EpochKeys {
                    send_key: [0; KEY_LEN],
                    recv_key: [0; KEY_LEN],
                    send_tag,
                    recv_tag,
                    send_pad,
                    recv_pad,
                    pad_cursor: 0,
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    frame: Vec<u8>,
    epoch: u32,
    last_sent: u64,
    attempts: u32,
}

/// What one step produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutput {
    /// Frames for the peer, in send order.
    pub frames: Vec<Vec<u8>>,
    /// Datagrams given up on: `(sequence_id, attempts)`.
    pub failures: Vec<(u64, u32)>,
    /// Set when this step discovered an offset disagreement.
    pub desync: bool,
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    circuit_id: u64,
    config: CircuitConfig,
    side: u8,
    epochs: BTreeMap<u32, EpochKeys>,
    epoch: u32,
    next_seq: u64,
    sent_in_epoch: u64,
    unacked: BTreeMap<u64, InFlight>,
    queue: VecDeque<Vec<u8>>,
    seen: BTreeSet<u64>,
    seen_floor: u64,
    inbox: VecDeque<Vec<u8>>,
    stream_next: u64,
    reorder: BTreeMap<u64, Vec<u8>>,
    read_buf: VecDeque<u8>,
    peer_closed: bool,
    closed: bool,
    sync_block: VecDeque<u8>,
    sync_calls: u64,
    sync_consumed: u64,
    own_echoes: BTreeMap<u64, u64>,
    peer_echoes: BTreeMap<u64, u64>,
    stats: CircuitStats,
    state: CircuitState,
}

impl Endpoint {
    pub fn new(circuit_id: u64, config: CircuitConfig, side: u8) -> Self {
        Endpoint {
            circuit_id,
            config,
            side,
            epochs: BTreeMap::new(),
            epoch: 0,
            next_seq: 1,
            sent_in_epoch: 0,
            unacked: BTreeMap::new(),
            queue: VecDeque::new(),
            seen: BTreeSet::new(),
            seen_floor: 0,
            inbox: VecDeque::new(),
            stream_next: 1,
            reorder: BTreeMap::new(),
            read_buf: VecDeque::new(),
            peer_closed: false,
            closed: false,
            sync_block: VecDeque::new(),
            sync_calls: 0,
            sync_consumed: 0,
            own_echoes: BTreeMap::new(),
            peer_echoes: BTreeMap::new(),
            stats: CircuitStats::default(),
            state: CircuitState::Open,
        }
    }

    pub fn circuit_id(&self) -> u64 {
        self.circuit_id
    }

    pub fn config(&self) -> &CircuitConfig {
        &self.config
    }

    pub fn side(&self) -> u8 {
        self.side
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn stats(&self) -> CircuitStats {
        self.stats
    }

    pub fn stats_mut(&mut self) -> &mut CircuitStats {
        &mut self.stats
    }

    pub fn state(&self) -> &CircuitState {
        &self.state
    }

    pub fn set_state(&mut self, state: CircuitState) {
        self.state = state;
    }

    pub fn sent_in_epoch(&self) -> u64 {
        self.sent_in_epoch
    }

    /// Installs the material of `epoch` and makes it current. For the
    /// synchronized random kind the material is appended to the draw block.
    pub fn install_epoch(&mut self, epoch: u32, material: &[u8]) {
        assert_eq!(material.len(), self.config.epoch_material_len(), "epoch material length");
        self.stats.key_bytes_consumed += material.len() as u64;
        self.epoch = epoch;
        self.sent_in_epoch = 0;
        if self.config.kind == CircuitKind::SynchronizedRandom {
            self.sync_block.extend(material);
        } else {
            self.epochs
                .insert(epoch, EpochKeys::split(&self.config, self.side, material));
        }
    }

    /// Oldest epoch an in-flight datagram of this end still refers to.
    pub fn oldest_live_epoch(&self) -> u32 {
        self.unacked
            .values()
            .map(|f| f.epoch)
            .min()
            .unwrap_or(self.epoch)
            .min(self.epoch)
    }

    pub fn retire_epochs_below(&mut self, epoch: u32) {
        self.epochs.retain(|&e, _| e >= epoch);
    }

    /// The datagram `seq` is queued or awaiting its acknowledgement.
    pub fn in_flight(&self, seq: u64) -> bool {
        seq >= self.next_seq || self.unacked.contains_key(&seq)
    }

    pub fn write_closed(&self) -> bool {
        self.closed
    }

    /// Unacknowledged and queued data are both empty.
    pub fn idle(&self) -> bool {
        self.unacked.is_empty() && self.queue.is_empty()
    }

    fn refresh_due(&self) -> bool {
        matches!(self.config.key_refresh_datagrams, Some(n) if self.sent_in_epoch >= n)
    }

    fn can_seal(&self, len: usize) -> bool {
        let Some(keys) = self.epochs.get(&self.epoch) else {
            return false;
        };
        if self.config.cipher_mode == CipherMode::OneTimePad
            && keys.send_pad.len() - keys.pad_cursor < len
        {
            return false;
        }
        !self.refresh_due()
    }

    /// True when sending `len` more bytes needs a new epoch first.
    pub fn needs_epoch_for(&self, len: usize) -> bool {
        !self.can_seal(len)
    }

    /// True when queued data is stuck waiting for key material.
    pub fn blocked_on_key(&self) -> bool {
        match self.queue.front() {
            Some(p) => self.unacked.len() < self.config.window && !self.can_seal(p.len()),
            None => false,
        }
    }

    fn check_kind(&self, expected: &[CircuitKind]) -> Result<()> {
        if expected.contains(&self.config.kind) {
            Ok(())
        } else {
            Err(Error::WrongKind(format!(
                "circuit {} is {}, operation needs {}",
                self.circuit_id,
                self.config.kind,
                expected.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(" or ")
            )))
        }
    }

    fn check_open(&self) -> Result<()> {
        match self.state {
            CircuitState::Closed => Err(Error::CircuitUnavailable(format!(
                "circuit {} is closed",
                self.circuit_id
            ))),
            CircuitState::Desynced => Err(Error::Desync(format!(
                "circuit {} lost offset agreement",
                self.circuit_id
            ))),
            _ => Ok(()),
        }
    }

    fn seal(&mut self, frame_type: FrameType, sequence_id: u64, epoch: u32, plaintext: &[u8]) -> Vec<u8> {
        let keys = self.epochs.get_mut(&epoch).expect("sealing epoch installed");
        let mut ciphertext = plaintext.to_vec();
        let mut pad_offset = 0u32;
        match self.config.cipher_mode {
            CipherMode::KeyedStream => {
                cipher::xor_in_place(&mut ciphertext, &cipher::keystream(&keys.send_key, sequence_id, plaintext.len()));
            }
            CipherMode::OneTimePad => {
                pad_offset = keys.pad_cursor as u32;
                cipher::xor_in_place(&mut ciphertext, &keys.send_pad[keys.pad_cursor..keys.pad_cursor + plaintext.len()]);
                keys.pad_cursor += plaintext.len();
            }
        }
        let input = TagInput {
            circuit_id: self.circuit_id,
            sequence_id,
            key_epoch: epoch,
            frame_type: frame_type as u8,
            pad_offset,
        };
        let auth_tag = cipher::tag(&keys.send_tag, &input, &ciphertext);
        Datagram {
            frame_type,
            circuit_id: self.circuit_id,
            sequence_id,
            key_epoch: epoch,
            pad_offset,
            ciphertext,
            auth_tag,
        }
        .encode()
    }

    fn seal_data(&mut self, plaintext: &[u8]) -> (u64, Vec<u8>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.sent_in_epoch += 1;
        self.stats.sent += 1;
        self.stats.plaintext_bytes_sent += plaintext.len() as u64;
        let frame = self.seal(FrameType::Data, seq, self.epoch, plaintext);
        (seq, frame)
    }

    fn check_size(&self, len: usize) -> Result<()> {
        if len > self.config.max_datagram_bytes {
            return invalid(format!(
                "payload of {len} bytes exceeds max_datagram_bytes {}",
                self.config.max_datagram_bytes
            ));
        }
        Ok(())
    }

    /// Seals one lossy datagram. The caller transmits the frame once.
    pub fn send_lossy(&mut self, payload: &[u8]) -> Result<(SendReceipt, Vec<u8>)> {
        self.check_kind(&[CircuitKind::SecureLossyDatagram])?;
        self.check_open()?;
        self.check_size(payload.len())?;
        if !self.can_seal(payload.len()) {
            return Err(Error::KeyExhausted(format!(
                "circuit {} epoch {} has no key for {} bytes",
                self.circuit_id,
                self.epoch,
                payload.len()
            )));
        }
        let key_epoch = self.epoch;
        let (sequence_id, frame) = self.seal_data(payload);
        Ok((SendReceipt { sequence_id, key_epoch }, frame))
    }

    /// Queues a reliable datagram; returns the sequence id it will carry.
    pub fn submit(&mut self, payload: &[u8]) -> Result<u64> {
        self.check_kind(&[CircuitKind::SecureReliableDatagram])?;
        self.check_open()?;
        self.check_size(payload.len())?;
        self.queue.push_back(payload.to_vec());
        // ids are assigned at seal time, in queue order
        Ok(self.next_seq + self.queue.len() as u64 - 1)
    }

    pub fn stream_write(&mut self, bytes: &[u8]) -> Result<()> {
        self.check_kind(&[CircuitKind::SecureReliableBytestream])?;
        self.check_open()?;
        if self.closed {
            return invalid(format!("stream {} already closed for writing", self.circuit_id));
        }
        for chunk in bytes.chunks(self.config.max_datagram_bytes) {
            self.queue.push_back(chunk.to_vec());
        }
        Ok(())
    }

    /// Queues the end-of-stream marker (an empty chunk).
    pub fn stream_close(&mut self) -> Result<()> {
        self.check_kind(&[CircuitKind::SecureReliableBytestream])?;
        if !self.closed {
            self.closed = true;
            self.queue.push_back(Vec::new());
        }
        Ok(())
    }

    pub fn stream_read(&mut self, max: usize) -> Vec<u8> {
        let n = max.min(self.read_buf.len());
        self.read_buf.drain(..n).collect()
    }

    pub fn stream_buffered(&self) -> usize {
        self.read_buf.len()
    }

    /// The peer closed and every byte before the close was read.
    pub fn stream_finished(&self) -> bool {
        self.peer_closed && self.read_buf.is_empty()
    }

    pub fn recv(&mut self) -> Option<Vec<u8>> {
        self.inbox.pop_front()
    }

    pub fn pending_recv(&self) -> usize {
        self.inbox.len()
    }

    /// Seals queued data while the window and the key allow.
    pub fn flush(&mut self, now: u64) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        while self.unacked.len() < self.config.window {
            let Some(front) = self.queue.front() else { break };
            if !self.can_seal(front.len()) {
                break;
            }
            let payload = self.queue.pop_front().expect("front exists");
            let epoch = self.epoch;
            let (seq, frame) = self.seal_data(&payload);
            self.unacked.insert(
                seq,
                InFlight {
                    frame: frame.clone(),
                    epoch,
                    last_sent: now,
                    attempts: 1,
                },
            );
            out.push(frame);
        }
        out
    }

    /// Processes inbound frames and echoes, then timers, then the queue.
    pub fn step(&mut self, now: u64, frames: &[Vec<u8>], echoes: &[Control]) -> StepOutput {
        let mut out = StepOutput::default();
        for f in frames {
            if let Some(ack) = self.handle_frame(f) {
                out.frames.push(ack);
            }
        }
        for e in echoes {
            if let Control::Echo { calls, consumed, .. } = *e {
                self.peer_echoes.insert(calls, consumed);
            }
        }
        if self.check_echoes() {
            out.desync = true;
        }
        if self.config.kind.is_reliable() {
            let due: Vec<u64> = self
                .unacked
                .iter()
                .filter(|(_, f)| now.saturating_sub(f.last_sent) >= self.config.ack_timeout_ticks)
                .map(|(&s, _)| s)
                .collect();
            for seq in due {
                let f = self.unacked.get_mut(&seq).expect("due entry");
                if f.attempts >= self.config.retransmit_limit {
                    let attempts = f.attempts;
                    self.unacked.remove(&seq);
                    self.stats.failed += 1;
                    self.state = CircuitState::Degraded(format!(
                        "datagram {seq} undeliverable after {attempts} attempts"
                    ));
                    out.failures.push((seq, attempts));
                } else {
                    f.attempts += 1;
                    f.last_sent = now;
                    self.stats.retransmitted += 1;
                    out.frames.push(f.frame.clone());
                }
            }
            out.frames.extend(self.flush(now));
        }
        out
    }

    fn duplicate(&mut self, seq: u64) -> bool {
        if seq <= self.seen_floor || !self.seen.insert(seq) {
            return true;
        }
        if seq > self.seen_floor + DEDUP_WINDOW {
            self.seen_floor = seq - DEDUP_WINDOW;
            let floor = self.seen_floor;
            self.seen.retain(|&s| s > floor);
        }
        false
    }

    /// Returns an acknowledgement to send back, if any.
    fn handle_frame(&mut self, bytes: &[u8]) -> Option<Vec<u8>> {
        let Ok(d) = Datagram::decode(bytes) else {
            self.stats.dropped += 1;
            return None;
        };
        if d.circuit_id != self.circuit_id {
            self.stats.dropped += 1;
            return None;
        }
        let Some(keys) = self.epochs.get(&d.key_epoch) else {
            self.stats.dropped += 1;
            return None;
        };
        let input = TagInput {
            circuit_id: d.circuit_id,
            sequence_id: d.sequence_id,
            key_epoch: d.key_epoch,
            frame_type: d.frame_type as u8,
            pad_offset: d.pad_offset,
        };
        if !cipher::verify(&keys.recv_tag, &input, &d.ciphertext, &d.auth_tag) {
            self.stats.dropped += 1;
            return None;
        }
        if d.frame_type == FrameType::Ack {
            if self.unacked.remove(&d.sequence_id).is_some() {
                self.stats.acked += 1;
            }
            return None;
        }
        let mut plaintext = d.ciphertext.clone();
        match self.config.cipher_mode {
            CipherMode::KeyedStream => {
                let ks = cipher::keystream(&keys.recv_key, d.sequence_id, plaintext.len());
                cipher::xor_in_place(&mut plaintext, &ks);
            }
            CipherMode::OneTimePad => {
                let start = d.pad_offset as usize;
                let Some(pad) = keys.recv_pad.get(start..start + plaintext.len()) else {
                    self.stats.dropped += 1;
                    return None;
                };
                cipher::xor_in_place(&mut plaintext, pad);
            }
        }
        let ack = self
            .config
            .kind
            .is_reliable()
            .then(|| self.seal(FrameType::Ack, d.sequence_id, d.key_epoch, &[]));
        if self.duplicate(d.sequence_id) {
            self.stats.duplicates += 1;
            return ack;
        }
        match self.config.kind {
            CircuitKind::SecureReliableBytestream => {
                self.reorder.insert(d.sequence_id, plaintext);
                while let Some(chunk) = self.reorder.remove(&self.stream_next) {
                    self.stream_next += 1;
                    if chunk.is_empty() {
                        self.peer_closed = true;
                    } else {
                        self.stats.delivered += 1;
                        self.read_buf.extend(chunk);
                    }
                }
            }
            _ => {
                self.stats.delivered += 1;
                self.inbox.push_back(plaintext);
            }
        }
        ack
    }

    /// Draws `n_bits` from the synchronized block. `Ok(None)` means the
    /// block is short and must be refilled first. The second value is an
    /// offset echo to send to the peer when an echo point was reached.
    pub fn draw(&mut self, n_bits: u32) -> Result<Option<(u64, Option<Control>)>> {
        self.check_kind(&[CircuitKind::SynchronizedRandom])?;
        if !(1..=64).contains(&n_bits) {
            return invalid(format!("n_bits must lie in 1..=64, got {n_bits}"));
        }
        self.check_echoes();
        self.check_open()?;
        let bytes = n_bits.div_ceil(8) as usize;
        if self.sync_block.len() < bytes {
            return Ok(None);
        }
        let mut value = 0u64;
        for b in self.sync_block.drain(..bytes) {
            value = (value << 8) | b as u64;
        }
        value >>= 8 * bytes as u32 - n_bits;
        self.sync_calls += 1;
        self.sync_consumed += bytes as u64;
        self.stats.random_draws += 1;
        let echo = (self.sync_calls % self.config.echo_period == 0).then(|| {
            self.own_echoes.insert(self.sync_calls, self.sync_consumed);
            Control::Echo {
                circuit_id: self.circuit_id,
                calls: self.sync_calls,
                consumed: self.sync_consumed,
            }
        });
        Ok(Some((value, echo)))
    }

    /// Compares echo points both ends passed. Marks the circuit desynced
    /// and returns true on the first disagreement.
    fn check_echoes(&mut self) -> bool {
        if self.state == CircuitState::Desynced {
            return false;
        }
        let bad = self
            .peer_echoes
            .iter()
            .any(|(calls, theirs)| matches!(self.own_echoes.get(calls), Some(mine) if mine != theirs));
        if bad {
            self.state = CircuitState::Desynced;
        }
        let settled: Vec<u64> = self
            .peer_echoes
            .keys()
            .filter(|c| self.own_echoes.contains_key(c))
            .copied()
            .collect();
        for c in settled {
            self.peer_echoes.remove(&c);
            self.own_echoes.remove(&c);
        }
        bad
    }

    pub fn sync_available(&self) -> usize {
        self.sync_block.len()
    }
}
