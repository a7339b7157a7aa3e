//! Multi-hop paths through trusted relays.
//!
//! Each hop is its own circuit with its own keys. A relay decrypts what
//! arrives on one hop and re-encrypts it onto the next, so it sees the
//! plaintext; every forwarded payload is recorded in the relay log.
//!
//! Synchronized random over a path: the first node draws from a sync
//! circuit shared with the first relay and tells it how many bits it drew;
//! the relay draws the same value and forwards it over reliable hops.

use std::collections::BTreeSet;

use super::{Controller, LinkId};
use crate::classical::NodeId;
use crate::error::{Error, Result};
use crate::mgmt::Scope;
use crate::overlay::{CircuitConfig, CircuitHandle, CircuitKind, CircuitState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSpec {
    /// Endpoints first and last, relays between.
    pub nodes: Vec<NodeId>,
}

impl PathSpec {
    pub fn new(nodes: Vec<NodeId>) -> Self {
        PathSpec { nodes }
    }

    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

/// Handles for both endpoints. A one-hop path is a direct circuit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathHandle {
    pub path_id: u64,
    pub kind: CircuitKind,
    /// Held by the first node.
    pub a: CircuitHandle,
    /// Held by the last node.
    pub b: CircuitHandle,
}

/// A payload as a relay saw it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayRecord {
    pub tick: u64,
    pub relay: NodeId,
    pub path_id: u64,
    /// The hop circuit the payload arrived on.
    pub circuit_id: u64,
    pub plaintext: Vec<u8>,
}

#[derive(Debug, Clone)]
pub(super) struct Path {
    pub id: u64,
    pub kind: CircuitKind,
    pub nodes: Vec<NodeId>,
    /// `hops[i]` joins `nodes[i]` (side 0) to `nodes[i + 1]` (side 1).
    pub hops: Vec<u64>,
    pub hop_links: Vec<LinkId>,
    /// Shared by the first two nodes on synchronized random paths.
    pub sync_hop: Option<u64>,
    /// `(relay index, forward)` pairs whose stream close was passed on.
    closes_forwarded: BTreeSet<(usize, bool)>,
}

impl Path {
    /// The circuit end an endpoint sends and receives at.
    pub fn entry(&self, forward: bool) -> (u64, usize) {
        if forward {
            (self.hops[0], 0)
        } else {
            (*self.hops.last().expect("path has hops"), 1)
        }
    }

    pub fn all_circuits(&self) -> Vec<u64> {
        self.hops.iter().copied().chain(self.sync_hop).collect()
    }
}

impl Controller {
    /// Builds a path. Every interior node must be trusted. Fails with
    /// [`Error::PathUnavailable`] naming the first hop (1-based) that
    /// could not be opened; hops opened before it are closed again.
    pub fn establish_path(&mut self, spec: &PathSpec, config: CircuitConfig) -> Result<PathHandle> {
        config.validate()?;
        if spec.nodes.len() < 2 {
            return Err(Error::InvalidInput("a path needs at least two nodes".into()));
        }
        for n in &spec.nodes {
            self.check_node(n)?;
        }
        let distinct: BTreeSet<&NodeId> = spec.nodes.iter().collect();
        if distinct.len() != spec.nodes.len() {
            return Err(Error::InvalidInput("a path may not visit a node twice".into()));
        }
        for n in &spec.nodes[1..spec.nodes.len() - 1] {
            if !self.is_trusted(n) {
                return Err(Error::InvalidInput(format!("relay `{n}` is not trusted")));
            }
        }
        let first = spec.nodes[0].clone();
        let last = spec.nodes[spec.nodes.len() - 1].clone();
        if spec.nodes.len() == 2 {
            let h = self
                .open_circuit(&first, &last, config)
                .map_err(|e| Error::PathUnavailable { hop: 1, reason: e.to_string() })?;
            return Ok(PathHandle {
                path_id: h.circuit_id,
                kind: config.kind,
                b: h.reversed(),
                a: h,
            });
        }
        let pid = self.next_id;
        self.next_id += 1;
        let scope = Some(Scope::Path(pid));
        let hop_config = if config.kind == CircuitKind::SynchronizedRandom {
            CircuitConfig {
                kind: CircuitKind::SecureReliableDatagram,
                ..config
            }
        } else {
            config
        };
        let mut hops = Vec::new();
        let mut opened = Vec::new();
        for (i, pair) in spec.nodes.windows(2).enumerate() {
            match self.open_hop(&pair[0], &pair[1], hop_config, scope) {
                Ok(cid) => {
                    hops.push(cid);
                    opened.push(cid);
                }
                Err(e) => {
                    for cid in opened {
                        self.circuits.remove(&cid);
                    }
                    return Err(Error::PathUnavailable { hop: i + 1, reason: e.to_string() });
                }
            }
        }
        let mut sync_hop = None;
        if config.kind == CircuitKind::SynchronizedRandom {
            match self.open_hop(&spec.nodes[0], &spec.nodes[1], config, scope) {
                Ok(cid) => sync_hop = Some(cid),
                Err(e) => {
                    for cid in opened {
                        self.circuits.remove(&cid);
                    }
                    return Err(Error::PathUnavailable { hop: 1, reason: e.to_string() });
                }
            }
        }
        let hop_links = hops.iter().map(|c| self.circuits[c].link).collect();
        self.paths.insert(
            pid,
            Path {
                id: pid,
                kind: config.kind,
                nodes: spec.nodes.clone(),
                hops,
                hop_links,
                sync_hop,
                closes_forwarded: BTreeSet::new(),
            },
        );
        let a = CircuitHandle {
            circuit_id: pid,
            kind: config.kind,
            local: first,
            peer: last,
        };
        Ok(PathHandle {
            path_id: pid,
            kind: config.kind,
            b: a.reversed(),
            a,
        })
    }

    /// Everything relays saw, in forwarding order.
    pub fn relay_log(&self) -> &[RelayRecord] {
        &self.relay_log
    }

    /// Hop circuit ids of a multi-hop path, first hop first.
    pub fn path_hops(&self, path_id: u64) -> Result<Vec<u64>> {
        self.paths
            .get(&path_id)
            .map(|p| p.hops.clone())
            .ok_or(Error::UnknownCircuit(path_id))
    }

    pub(super) fn path_idle(&self, pid: u64) -> bool {
        self.paths[&pid]
            .all_circuits()
            .iter()
            .all(|c| self.circuits[c].ends.iter().all(|e| e.idle()))
    }

    /// Moves whatever reached each relay onto the next hop.
    pub(super) fn forward_relays(&mut self) -> Result<()> {
        let paths: Vec<Path> = self.paths.values().cloned().collect();
        for p in paths {
            if self.circuits[&p.hops[0]].ends[0].state() == &CircuitState::Closed {
                continue;
            }
            for i in 1..p.nodes.len() - 1 {
                for forward in [true, false] {
                    let (from, to) = if forward {
                        ((p.hops[i - 1], 1), (p.hops[i], 0))
                    } else {
                        ((p.hops[i], 0), (p.hops[i - 1], 1))
                    };
                    self.relay_step(&p, i, forward, from, to)?;
                }
            }
        }
        Ok(())
    }

    fn relay_step(&mut self, p: &Path, i: usize, forward: bool, from: (u64, usize), to: (u64, usize)) -> Result<()> {
        let relay = p.nodes[i].clone();
        match p.kind {
            CircuitKind::SecureReliableBytestream => {
                let bytes = self.end_mut(from.0, from.1).stream_read(usize::MAX);
                if !bytes.is_empty() {
                    self.record(&relay, p.id, from.0, bytes.clone());
                    self.end_mut(to.0, to.1).stream_write(&bytes)?;
                    self.flush_end(to.0, to.1)?;
                }
                let finished = self.circuits[&from.0].ends[from.1].stream_finished();
                if finished && self.paths.get_mut(&p.id).expect("path").closes_forwarded.insert((i, forward)) {
                    self.end_mut(to.0, to.1).stream_close()?;
                    self.flush_end(to.0, to.1)?;
                }
            }
            kind => {
                while let Some(payload) = self.end_mut(from.0, from.1).recv() {
                    let payload = if kind == CircuitKind::SynchronizedRandom && i == 1 {
                        if !forward {
                            continue;
                        }
                        let sync = p.sync_hop.expect("sync path has a sync hop");
                        let Some(&n_bits) = payload.first() else { continue };
                        let value = match self.draw_at(sync, 1, n_bits as u32) {
                            Ok(v) => v,
                            Err(Error::Desync(_)) => continue,
                            Err(e) => return Err(e),
                        };
                        let mut out = vec![n_bits];
                        out.extend_from_slice(&value.to_le_bytes());
                        self.record(&relay, p.id, from.0, value.to_le_bytes().to_vec());
                        out
                    } else {
                        self.record(&relay, p.id, from.0, payload.clone());
                        payload
                    };
                    if kind == CircuitKind::SecureLossyDatagram {
                        // a lossy hop may drop; so may the relay when the
                        // next hop has no key left
                        let _ = self.send_lossy_at(to.0, to.1, &payload);
                    } else {
                        self.end_mut(to.0, to.1).submit(&payload)?;
                        self.flush_end(to.0, to.1)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn record(&mut self, relay: &NodeId, path_id: u64, circuit_id: u64, plaintext: Vec<u8>) {
        self.relay_log.push(RelayRecord {
            tick: self.net.now(),
            relay: relay.clone(),
            path_id,
            circuit_id,
            plaintext,
        });
    }

    /// The first node's side of a path draw.
    pub(super) fn path_sync_draw(&mut self, pid: u64, n_bits: u32) -> Result<u64> {
        let p = &self.paths[&pid];
        let (sync, hop0) = (p.sync_hop.expect("sync path"), p.hops[0]);
        let value = self.draw_at(sync, 0, n_bits)?;
        self.end_mut(hop0, 0).submit(&[n_bits as u8])?;
        self.flush_end(hop0, 0)?;
        Ok(value)
    }

    /// The last node's side: waits for the relayed value.
    pub(super) fn path_sync_receive(&mut self, pid: u64, n_bits: u32) -> Result<u64> {
        if !(1..=64).contains(&n_bits) {
            return Err(Error::InvalidInput(format!("n_bits must lie in 1..=64, got {n_bits}")));
        }
        let (cid, side) = self.paths[&pid].entry(false);
        let started = self.net.now();
        loop {
            if let Some(msg) = self.end_mut(cid, side).recv() {
                if msg.len() != 9 {
                    return Err(Error::Malformed(format!("relayed draw of {} bytes", msg.len())));
                }
                if msg[0] as u32 != n_bits {
                    let sync = self.paths[&pid].sync_hop.expect("sync path");
                    self.report_desync(sync);
                    return Err(Error::Desync(format!(
                        "path {pid}: peer drew {} bits, this end asked for {n_bits}",
                        msg[0]
                    )));
                }
                self.end_mut(cid, side).stats_mut().random_draws += 1;
                return Ok(u64::from_le_bytes(msg[1..9].try_into().expect("8 bytes")));
            }
            if self.net.now() - started > self.settings.max_wait_ticks {
                return Err(Error::Timeout(self.net.now() - started));
            }
            self.pump()?;
        }
    }
}
