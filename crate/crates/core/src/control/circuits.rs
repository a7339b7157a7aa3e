//! The data-plane surface of the controller: opening circuits, the four
//! abstractions' operations, and epoch reservations.

use super::{Circuit, Controller, LinkId};
use crate::classical::NodeId;
use crate::error::{Error, Result};
use crate::exchange::Exchange;
use crate::mgmt::{Event, EventKind, Scope, Severity};
use crate::overlay::frame::{self, Control, ReservePurpose, ReserveStatus};
use crate::overlay::{
    CircuitConfig, CircuitHandle, CircuitInfo, CircuitKind, CircuitState, DeliveryConfirmation,
    Endpoint, SendReceipt,
};
use crate::rng;

/// Ticks a circuit waits before retrying an automatic refresh that failed.
const REFRESH_BACKOFF_TICKS: u64 = 64;

/// Where a handle points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Target {
    Direct { cid: u64, side: usize },
    /// `forward` is true at the path's first node.
    Path { pid: u64, forward: bool },
}

impl Controller {
    /// Opens a circuit from `local` to `peer` over their link. Both ends
    /// start at epoch 0 with material reserved at the same pool offset.
    pub fn open_circuit(&mut self, local: &NodeId, peer: &NodeId, config: CircuitConfig) -> Result<CircuitHandle> {
        let cid = self.open_hop(local, peer, config, None)?;
        Ok(CircuitHandle {
            circuit_id: cid,
            kind: config.kind,
            local: local.clone(),
            peer: peer.clone(),
        })
    }

    pub(super) fn open_hop(
        &mut self,
        local: &NodeId,
        peer: &NodeId,
        config: CircuitConfig,
        scope: Option<Scope>,
    ) -> Result<u64> {
        config.validate()?;
        self.check_node(local)?;
        self.check_node(peer)?;
        let link_id = self
            .link_between(local, peer)
            .map_err(|_| Error::CircuitUnavailable(format!("no link between `{local}` and `{peer}`")))?;
        let link = self.link(link_id)?;
        if link.down {
            return Err(Error::CircuitUnavailable(format!("link {link_id} is down")));
        }
        let local_pool = if *local == link.spec.a { 0 } else { 1 };
        for _ in 0..self.settings.max_refill_sessions {
            if !self.links[&link_id].pools[local_pool].below_watermark() {
                break;
            }
            let _ = self.run_qkd_session(link_id);
        }
        let cid = self.next_id;
        self.next_id += 1;
        self.circuits.insert(
            cid,
            Circuit {
                kind: config.kind,
                config,
                link: link_id,
                nodes: [local.clone(), peer.clone()],
                ends: [Endpoint::new(cid, config, 0), Endpoint::new(cid, config, 1)],
                pool: [local_pool, 1 - local_pool],
                epoch_started: self.net.now(),
                scope: scope.unwrap_or(Scope::Link(link_id)),
                rpc: 0,
                failures: Vec::new(),
                desync_reported: false,
                refresh_backoff_until: 0,
            },
        );
        let len = config.epoch_material_len();
        match self.reserve(cid, ReservePurpose::Open, 0, len) {
            Ok((m0, m1)) => {
                let c = self.circuits.get_mut(&cid).expect("just inserted");
                c.ends[0].install_epoch(0, &m0);
                c.ends[1].install_epoch(0, &m1);
                c.epoch_started = self.net.now();
                Ok(cid)
            }
            Err(e) => {
                self.circuits.remove(&cid);
                Err(match e {
                    Error::CircuitUnavailable(m) => Error::CircuitUnavailable(m),
                    other => Error::CircuitUnavailable(other.to_string()),
                })
            }
        }
    }

    /// Runs sessions until the pool at `pool` holds `len` bytes.
    fn ensure_pool(&mut self, link_id: LinkId, pool: usize, len: usize) -> Result<()> {
        let mut tries = 0;
        while self.link(link_id)?.pools[pool].available() < len {
            if tries == self.settings.max_refill_sessions || self.link(link_id)?.down {
                return Err(Error::KeyExhausted(format!(
                    "link {link_id}: need {len} bytes, {} available after {tries} sessions",
                    self.link(link_id)?.pools[pool].available()
                )));
            }
            tries += 1;
            let _ = self.run_qkd_session(link_id);
        }
        Ok(())
    }

    /// Agrees on `len` pool bytes with the peer: the opening end proposes
    /// its offset, the other end takes the same offset or refuses.
    /// Returns each end's copy.
    fn reserve(&mut self, cid: u64, purpose: ReservePurpose, epoch: u32, len: usize) -> Result<(Vec<u8>, Vec<u8>)> {
        let c = self
            .circuits
            .get(&cid)
            .ok_or(Error::UnknownCircuit(cid))?;
        let (link_id, pools, nodes) = (c.link, c.pool, c.nodes.clone());
        self.ensure_pool(link_id, pools[0], len)?;
        let c = self.circuits.get_mut(&cid).expect("checked above");
        let id_base = rng::mix(cid, c.rpc << 32);
        c.rpc += 1;
        let label = format!("circuit {cid} {purpose:?} epoch {epoch}").to_lowercase();
        let exchange = self.settings.exchange;
        let link = self.links.get_mut(&link_id).expect("circuit link exists");
        let [p0, p1] = &mut link.pools;
        let (mine, theirs) = if pools[0] == 0 { (p0, p1) } else { (p1, p0) };
        let offset = mine.consumed_offset();
        let request = Control::Reserve {
            circuit_id: cid,
            epoch,
            purpose,
            offset: offset as u64,
            len: len as u32,
        }
        .encode();
        let mut their_copy = None;
        let mut handler = |body: &[u8]| -> Vec<u8> {
            let status = match Control::decode(body) {
                Ok(Control::Reserve { offset, len, .. }) => {
                    match theirs.take_at(offset as usize, len as usize, &label) {
                        Ok(bytes) => {
                            their_copy = Some(bytes);
                            ReserveStatus::Ok
                        }
                        Err(Error::Desync(_)) => ReserveStatus::Desync,
                        Err(_) => ReserveStatus::Exhausted,
                    }
                }
                _ => ReserveStatus::UnknownCircuit,
            };
            Control::ReserveAck { status }.encode()
        };
        let reply = Exchange::new(&mut self.net, &nodes[0], &nodes[1], frame::CTL_LABEL, id_base, exchange)
            .call(&request, &mut handler);
        let reply = match reply {
            Ok(r) => r,
            Err(Error::Timeout(t)) => {
                return Err(Error::CircuitUnavailable(format!(
                    "reservation handshake for circuit {cid} timed out after {t} ticks"
                )))
            }
            Err(e) => return Err(e),
        };
        match Control::decode(&reply)? {
            Control::ReserveAck { status: ReserveStatus::Ok } => {
                let (_, bytes) = mine.take(len, &label)?;
                let theirs = their_copy.expect("peer accepted the reservation");
                self.watch_link(link_id);
                Ok((bytes, theirs))
            }
            Control::ReserveAck { status: ReserveStatus::Desync } => Err(Error::Desync(format!(
                "peer pool offset differs from {offset} on link {link_id}"
            ))),
            Control::ReserveAck { status } => Err(Error::KeyExhausted(format!(
                "peer refused reservation: {status:?}"
            ))),
            other => Err(Error::Malformed(format!("expected reservation ack, got {other:?}"))),
        }
    }

    /// Installs a new epoch at both ends of `cid`.
    pub(super) fn refresh_circuit(&mut self, cid: u64) -> Result<u32> {
        let c = self.circuits.get(&cid).ok_or(Error::UnknownCircuit(cid))?;
        if c.ends[0].state() == &CircuitState::Closed {
            return Err(Error::CircuitUnavailable(format!("circuit {cid} is closed")));
        }
        let epoch = c.ends[0].epoch() + 1;
        let purpose = if c.kind == CircuitKind::SynchronizedRandom {
            ReservePurpose::SyncBlock
        } else {
            ReservePurpose::Refresh
        };
        let len = c.config.epoch_material_len();
        let now = self.net.now();
        match self.reserve(cid, purpose, epoch, len) {
            Ok((m0, m1)) => {
                let now = self.net.now();
                let c = self.circuits.get_mut(&cid).expect("circuit");
                c.ends[0].install_epoch(epoch, &m0);
                c.ends[1].install_epoch(epoch, &m1);
                c.epoch_started = now;
                let keep = c.ends[0]
                    .oldest_live_epoch()
                    .min(c.ends[1].oldest_live_epoch())
                    .saturating_sub(1);
                for e in &mut c.ends {
                    e.retire_epochs_below(keep);
                }
                let e = Event::new(now, c.scope, EventKind::EpochRolled, Severity::Info)
                    .with("circuit", cid)
                    .with("epoch", epoch);
                self.emit(e);
                Ok(epoch)
            }
            Err(err) => {
                let c = self.circuits.get_mut(&cid).expect("circuit");
                c.refresh_backoff_until = now + REFRESH_BACKOFF_TICKS;
                let degraded = !matches!(c.ends[0].state(), CircuitState::Desynced);
                if degraded {
                    for e in &mut c.ends {
                        e.set_state(CircuitState::Degraded(format!("key refresh failed: {err}")));
                    }
                }
                let reason = err.to_string().replace(char::is_whitespace, "_");
                let e = Event::new(self.net.now(), c.scope, EventKind::SessionAborted, Severity::Critical)
                    .with("status", "refresh_failed")
                    .with("circuit", cid)
                    .with("reason", reason);
                self.emit(e);
                Err(err)
            }
        }
    }

    pub(super) fn resolve(&self, h: &CircuitHandle) -> Result<Target> {
        if let Some(c) = self.circuits.get(&h.circuit_id) {
            let side = c
                .side_of(&h.local)
                .filter(|&s| c.nodes[1 - s] == h.peer)
                .ok_or_else(|| Error::InvalidInput(format!("handle does not match circuit {}", h.circuit_id)))?;
            return Ok(Target::Direct { cid: h.circuit_id, side });
        }
        if let Some(p) = self.paths.get(&h.circuit_id) {
            let first = &p.nodes[0];
            let last = p.nodes.last().expect("path has nodes");
            if h.local == *first && h.peer == *last {
                return Ok(Target::Path { pid: p.id, forward: true });
            }
            if h.local == *last && h.peer == *first {
                return Ok(Target::Path { pid: p.id, forward: false });
            }
            return Err(Error::InvalidInput(format!("handle does not match path {}", p.id)));
        }
        Err(Error::UnknownCircuit(h.circuit_id))
    }

    /// The circuit end a handle sends and receives at.
    fn entry(&self, h: &CircuitHandle) -> Result<(u64, usize)> {
        Ok(match self.resolve(h)? {
            Target::Direct { cid, side } => (cid, side),
            Target::Path { pid, forward } => self.paths[&pid].entry(forward),
        })
    }

    fn check_kind(h: &CircuitHandle, kind: CircuitKind) -> Result<()> {
        if h.kind == kind {
            Ok(())
        } else {
            Err(Error::WrongKind(format!("{} handle used for a {kind} operation", h.kind)))
        }
    }

    pub(super) fn end_mut(&mut self, cid: u64, side: usize) -> &mut Endpoint {
        &mut self.circuits.get_mut(&cid).expect("circuit").ends[side]
    }

    pub(super) fn transmit(&mut self, cid: u64, side: usize, frames: Vec<Vec<u8>>) -> Result<()> {
        let c = &self.circuits[&cid];
        let (from, to) = (c.nodes[side].clone(), c.nodes[1 - side].clone());
        for f in frames {
            self.net.send(&from, &to, frame::DATA_LABEL, f)?;
        }
        Ok(())
    }

    /// Seals whatever the end's window and key allow, and sends it.
    pub(super) fn flush_end(&mut self, cid: u64, side: usize) -> Result<()> {
        let now = self.net.now();
        let frames = self.end_mut(cid, side).flush(now);
        self.transmit(cid, side, frames)
    }

    pub(super) fn send_lossy_at(&mut self, cid: u64, side: usize, payload: &[u8]) -> Result<SendReceipt> {
        if self.circuits[&cid].ends[side].needs_epoch_for(payload.len()) {
            if payload.len() > self.circuits[&cid].config.max_datagram_bytes {
                return Err(Error::InvalidInput(format!(
                    "payload of {} bytes exceeds max_datagram_bytes",
                    payload.len()
                )));
            }
            self.refresh_circuit(cid).map_err(|e| match e {
                Error::KeyExhausted(m) => Error::KeyExhausted(m),
                other => Error::KeyExhausted(other.to_string()),
            })?;
        }
        let (receipt, frame) = self.end_mut(cid, side).send_lossy(payload)?;
        self.transmit(cid, side, vec![frame])?;
        Ok(receipt)
    }

    /// Encrypts and sends one datagram, once.
    pub fn send_lossy(&mut self, h: &CircuitHandle, payload: &[u8]) -> Result<SendReceipt> {
        Self::check_kind(h, CircuitKind::SecureLossyDatagram)?;
        let (cid, side) = self.entry(h)?;
        self.send_lossy_at(cid, side, payload)
    }

    /// Queues a reliable datagram and transmits it if the window allows;
    /// returns its sequence id on the first hop.
    pub fn submit_reliable(&mut self, h: &CircuitHandle, payload: &[u8]) -> Result<u64> {
        Self::check_kind(h, CircuitKind::SecureReliableDatagram)?;
        let (cid, side) = self.entry(h)?;
        let seq = self.end_mut(cid, side).submit(payload)?;
        self.flush_end(cid, side)?;
        Ok(seq)
    }

    /// Sends a reliable datagram and pumps until it is acknowledged (end
    /// to end on a path).
    pub fn send_reliable(&mut self, h: &CircuitHandle, payload: &[u8]) -> Result<DeliveryConfirmation> {
        let started = self.net.now();
        let failures_before = self.failure_marks(h)?;
        let seq = self.submit_reliable(h, payload)?;
        match self.resolve(h)? {
            Target::Direct { cid, side } => {
                while self.circuits[&cid].ends[side].in_flight(seq) {
                    self.pump_bounded(started)?;
                }
                let c = &self.circuits[&cid];
                if let Some(&(_, _, attempts)) = c.failures.iter().find(|f| f.0 == side && f.1 == seq) {
                    return Err(Error::DeliveryFailed { sequence_id: seq, attempts });
                }
            }
            Target::Path { pid, .. } => {
                while !self.path_idle(pid) {
                    self.pump_bounded(started)?;
                    self.check_path_failures(h, &failures_before)?;
                }
                self.check_path_failures(h, &failures_before)?;
            }
        }
        Ok(DeliveryConfirmation {
            sequence_id: seq,
            ticks: self.net.now() - started,
        })
    }

    fn pump_bounded(&mut self, started: u64) -> Result<()> {
        if self.net.now() - started > self.settings.max_wait_ticks {
            return Err(Error::Timeout(self.net.now() - started));
        }
        self.pump()
    }

    /// Failure counts of the circuits a handle runs over.
    fn failure_marks(&self, h: &CircuitHandle) -> Result<Vec<(u64, usize)>> {
        Ok(self
            .circuits_of(h)?
            .into_iter()
            .map(|cid| (cid, self.circuits[&cid].failures.len()))
            .collect())
    }

    pub(super) fn circuits_of(&self, h: &CircuitHandle) -> Result<Vec<u64>> {
        Ok(match self.resolve(h)? {
            Target::Direct { cid, .. } => vec![cid],
            Target::Path { pid, .. } => self.paths[&pid].all_circuits(),
        })
    }

    fn check_path_failures(&self, h: &CircuitHandle, before: &[(u64, usize)]) -> Result<()> {
        for &(cid, n) in before {
            if let Some(&(_, seq, attempts)) = self.circuits[&cid].failures.get(n) {
                let _ = h;
                return Err(Error::DeliveryFailed { sequence_id: seq, attempts });
            }
        }
        Ok(())
    }

    /// Next surfaced datagram at the handle's end.
    pub fn recv(&mut self, h: &CircuitHandle) -> Result<Option<Vec<u8>>> {
        if !matches!(h.kind, CircuitKind::SecureLossyDatagram | CircuitKind::SecureReliableDatagram) {
            return Err(Error::WrongKind(format!("recv on a {} handle", h.kind)));
        }
        let (cid, side) = self.entry(h)?;
        Ok(self.end_mut(cid, side).recv())
    }

    pub fn recv_all(&mut self, h: &CircuitHandle) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        while let Some(p) = self.recv(h)? {
            out.push(p);
        }
        Ok(out)
    }

    pub fn stream_write(&mut self, h: &CircuitHandle, bytes: &[u8]) -> Result<()> {
        Self::check_kind(h, CircuitKind::SecureReliableBytestream)?;
        let (cid, side) = self.entry(h)?;
        self.end_mut(cid, side).stream_write(bytes)?;
        self.flush_end(cid, side)
    }

    pub fn stream_close(&mut self, h: &CircuitHandle) -> Result<()> {
        Self::check_kind(h, CircuitKind::SecureReliableBytestream)?;
        let (cid, side) = self.entry(h)?;
        self.end_mut(cid, side).stream_close()?;
        self.flush_end(cid, side)
    }

    /// Up to `max` in-order bytes received at the handle's end.
    pub fn stream_read(&mut self, h: &CircuitHandle, max: usize) -> Result<Vec<u8>> {
        Self::check_kind(h, CircuitKind::SecureReliableBytestream)?;
        let (cid, side) = self.entry(h)?;
        Ok(self.end_mut(cid, side).stream_read(max))
    }

    /// The peer closed its direction and every byte was read.
    pub fn stream_finished(&self, h: &CircuitHandle) -> Result<bool> {
        Self::check_kind(h, CircuitKind::SecureReliableBytestream)?;
        let (cid, side) = self.entry(h)?;
        Ok(self.circuits[&cid].ends[side].stream_finished())
    }

    /// Pumps until everything written at the handle's end was delivered
    /// end to end.
    pub fn stream_drain(&mut self, h: &CircuitHandle) -> Result<()> {
        Self::check_kind(h, CircuitKind::SecureReliableBytestream)?;
        self.drain(h)
    }

    /// Pumps until all queued data from the handle's end is delivered.
    pub fn drain(&mut self, h: &CircuitHandle) -> Result<()> {
        let started = self.net.now();
        let before = self.failure_marks(h)?;
        let ids = self.circuits_of(h)?;
        let (cid, side) = self.entry(h)?;
        loop {
            let done = match self.resolve(h)? {
                Target::Direct { .. } => self.circuits[&cid].ends[side].idle(),
                Target::Path { pid, .. } => self.path_idle(pid),
            };
            self.check_path_failures(h, &before)?;
            if done {
                break;
            }
            self.pump_bounded(started)?;
        }
        let _ = ids;
        Ok(())
    }

    /// Draws `n_bits` (1 to 64) from the synchronized random stream. Equal
    /// call schedules at both ends yield equal values.
    pub fn sync_random(&mut self, h: &CircuitHandle, n_bits: u32) -> Result<u64> {
        Self::check_kind(h, CircuitKind::SynchronizedRandom)?;
        match self.resolve(h)? {
            Target::Direct { cid, side } => self.draw_at(cid, side, n_bits),
            Target::Path { pid, forward: true } => self.path_sync_draw(pid, n_bits),
            Target::Path { pid, forward: false } => self.path_sync_receive(pid, n_bits),
        }
    }

    pub(super) fn draw_at(&mut self, cid: u64, side: usize, n_bits: u32) -> Result<u64> {
        let node = self.circuits[&cid].nodes[side].clone();
        self.apply_echoes(&node);
        for _ in 0..2 {
            let drawn = self.end_mut(cid, side).draw(n_bits);
            match drawn {
                Ok(Some((value, echo))) => {
                    if let Some(echo) = echo {
                        let c = &self.circuits[&cid];
                        let (from, to) = (c.nodes[side].clone(), c.nodes[1 - side].clone());
                        self.net.send(&from, &to, frame::SYNC_LABEL, echo.encode())?;
                    }
                    return Ok(value);
                }
                Ok(None) => {
                    self.refresh_circuit(cid)?;
                }
                Err(e @ Error::Desync(_)) => {
                    self.report_desync(cid);
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::KeyExhausted(format!("circuit {cid}: refill left the block short")))
    }

    /// Hands echoes already delivered to `node` to their circuits.
    fn apply_echoes(&mut self, node: &NodeId) {
        let mut inbound = std::collections::BTreeMap::new();
        self.route_echoes(node, &mut inbound);
        let now = self.net.now();
        for ((cid, side), (_, echoes)) in inbound {
            let out = self.end_mut(cid, side).step(now, &[], &echoes);
            if out.desync {
                self.report_desync(cid);
            }
        }
    }

    /// Rolls the epoch of the circuit (every hop of a path).
    pub fn refresh_key(&mut self, h: &CircuitHandle) -> Result<u32> {
        let ids = self.circuits_of(h)?;
        let mut epoch = 0;
        for cid in ids {
            epoch = self.refresh_circuit(cid)?;
        }
        let (cid, side) = self.entry(h)?;
        let _ = epoch;
        Ok(self.circuits[&cid].ends[side].epoch())
    }

    pub fn circuit_info(&self, h: &CircuitHandle) -> Result<CircuitInfo> {
        let (cid, side) = self.entry(h)?;
        let end = &self.circuits[&cid].ends[side];
        let mut state = end.state().clone();
        for id in self.circuits_of(h)? {
            for e in &self.circuits[&id].ends {
                if state == CircuitState::Open && e.state() != &CircuitState::Open {
                    state = e.state().clone();
                }
            }
        }
        let stats = end.stats();
        Ok(CircuitInfo {
            handle: h.clone(),
            epoch: end.epoch(),
            state,
            stats,
        })
    }

    /// The opposite end of a handle's entry circuit, for inspection.
    pub fn circuit_link(&self, h: &CircuitHandle) -> Result<LinkId> {
        let (cid, _) = self.entry(h)?;
        Ok(self.circuits[&cid].link)
    }

    pub fn close_circuit(&mut self, h: &CircuitHandle) -> Result<()> {
        for cid in self.circuits_of(h)? {
            for e in &mut self.circuits.get_mut(&cid).expect("circuit").ends {
                e.set_state(CircuitState::Closed);
            }
        }
        Ok(())
    }

    /// Ids of all circuits, including path hops.
    pub fn circuit_ids(&self) -> Vec<u64> {
        self.circuits.keys().copied().collect()
    }

    /// Statistics of both ends of a circuit, opener first.
    pub fn circuit_end_stats(&self, cid: u64) -> Result<[crate::overlay::CircuitStats; 2]> {
        let c = self.circuits.get(&cid).ok_or(Error::UnknownCircuit(cid))?;
        Ok([c.ends[0].stats(), c.ends[1].stats()])
    }

    /// Cipher mode and link of a circuit, for accounting.
    pub fn circuit_config(&self, cid: u64) -> Result<(CircuitConfig, LinkId)> {
        let c = self.circuits.get(&cid).ok_or(Error::UnknownCircuit(cid))?;
        Ok((c.config, c.link))
    }
}
