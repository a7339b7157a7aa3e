//! Control plane: one in-process controller owning nodes, links, their
//! key pools, circuits, trusted-relay paths and the policy registry.
//!
//! The controller is also the simulation driver. [`Controller::pump`]
//! runs one tick: inbound frames are handed to circuit ends, timers fire,
//! relays forward, refresh triggers are checked and the classical network
//! advances.

mod circuits;
mod path;
pub mod policy;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::classical::{ClassicalChannelParams, ClassicalNetwork, NodeId};
use crate::error::{Error, Result};
use crate::exchange::ExchangeConfig;
use crate::mgmt::{Event, EventKind, EventLog, LinkObservation, Scope, Severity, ThresholdWatcher, Thresholds};
use crate::overlay::frame::{self, Control};
use crate::overlay::{CircuitConfig, CircuitKind, Endpoint, StepOutput};
use crate::qkd::{run_session, KeyPool, QkdSessionParams, QkdStatus, SessionReport};
use crate::quantum::QuantumLinkParams;

pub use path::{PathHandle, PathSpec, RelayRecord};
pub use policy::{Action, Condition, Op, Policy, PolicyRegistry};

pub type LinkId = u32;

/// Events processed per emission before policy evaluation stops
/// (actions that emit events could otherwise feed each other forever).
const CASCADE_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub quantum: QuantumLinkParams,
    pub classical: ClassicalChannelParams,
    pub qkd: QkdSessionParams,
    /// Pool bytes below which opening a circuit first runs a session.
    pub low_watermark: usize,
    /// Sessions run when the link is configured.
    pub prefill_sessions: u32,
}

impl LinkSpec {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        LinkSpec {
            a,
            b,
            quantum: QuantumLinkParams::default(),
            classical: ClassicalChannelParams::default(),
            qkd: QkdSessionParams::default(),
            low_watermark: 256,
            prefill_sessions: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkStats {
    pub sessions: u64,
    pub sessions_ok: u64,
    pub aborted_qber: u64,
    pub aborted_insufficient: u64,
    /// Timeouts, digest mismatches and protocol errors.
    pub failed: u64,
    pub distilled_bits: u64,
    pub last_qber: Option<f64>,
}

#[derive(Debug)]
struct Link {
    spec: LinkSpec,
    /// `pools[0]` is held by `spec.a`.
    pools: [KeyPool; 2],
    nonce: u64,
    down: bool,
    stats: LinkStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerSettings {
    pub exchange: ExchangeConfig,
    /// Step node contexts on separate threads.
    pub parallel_nodes: bool,
    /// Sessions tried when a reservation finds the pool short.
    pub max_refill_sessions: u32,
    /// Bound on ticks a blocking call may pump.
    pub max_wait_ticks: u64,
    pub thresholds: Thresholds,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        ControllerSettings {
            exchange: ExchangeConfig::default(),
            parallel_nodes: false,
            max_refill_sessions: 4,
            max_wait_ticks: 200_000,
            thresholds: Thresholds::default(),
        }
    }
}

/// One executed (or failed) policy action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionRecord {
    pub tick: u64,
    pub policy: String,
    pub action: String,
    pub scope: Scope,
    pub outcome: std::result::Result<String, String>,
}

impl fmt::Display for ActionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tick={} policy={} action=\"{}\" scope={} ",
            self.tick, self.policy, self.action, self.scope
        )?;
        match &self.outcome {
            Ok(m) => write!(f, "result=ok detail=\"{m}\""),
            Err(m) => write!(f, "result=error detail=\"{m}\""),
        }
    }
}

#[derive(Debug)]
struct Circuit {
    kind: CircuitKind,
    config: CircuitConfig,
    link: LinkId,
    /// `nodes[0]` opened the circuit and drives its reservations.
    nodes: [NodeId; 2],
    ends: [Endpoint; 2],
    /// Index into the link's pools used by each end.
    pool: [usize; 2],
    epoch_started: u64,
    scope: Scope,
    rpc: u64,
    /// `(side, sequence_id, attempts)` of datagrams given up on.
    failures: Vec<(usize, u64, u32)>,
    desync_reported: bool,
    /// No automatic refresh before this tick (set after a failed one).
    refresh_backoff_until: u64,
}

impl Circuit {
    fn side_of(&self, node: &NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n == node)
    }
}

pub struct Controller {
    net: ClassicalNetwork,
    nodes: BTreeMap<NodeId, bool>,
    links: BTreeMap<LinkId, Link>,
    link_by_pair: BTreeMap<(NodeId, NodeId), LinkId>,
    circuits: BTreeMap<u64, Circuit>,
    paths: BTreeMap<u64, path::Path>,
    next_id: u64,
    policies: PolicyRegistry,
    log: EventLog,
    watcher: ThresholdWatcher,
    actions: Vec<ActionRecord>,
    relay_log: Vec<RelayRecord>,
    settings: ControllerSettings,
    pending_events: VecDeque<Event>,
    dispatching: bool,
}

fn pair_key(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl Controller {
    pub fn new(settings: ControllerSettings) -> Self {
        Controller {
            net: ClassicalNetwork::new(ClassicalChannelParams::default()),
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            link_by_pair: BTreeMap::new(),
            circuits: BTreeMap::new(),
            paths: BTreeMap::new(),
            next_id: 1,
            policies: PolicyRegistry::new(),
            log: EventLog::new(),
            watcher: ThresholdWatcher::new(),
            actions: Vec::new(),
            relay_log: Vec::new(),
            settings,
            pending_events: VecDeque::new(),
            dispatching: false,
        }
    }

    pub fn settings(&self) -> &ControllerSettings {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut ControllerSettings {
        &mut self.settings
    }

    pub fn now(&self) -> u64 {
        self.net.now()
    }

    pub fn network(&self) -> &ClassicalNetwork {
        &self.net
    }

    /// Direct access for fault injection.
    pub fn network_mut(&mut self) -> &mut ClassicalNetwork {
        &mut self.net
    }

    pub fn add_node(&mut self, name: &str, trusted: bool) -> Result<NodeId> {
        let id = NodeId::new(name)?;
        if self.nodes.contains_key(&id) {
            return Err(Error::InvalidInput(format!("node `{id}` declared twice")));
        }
        self.net.register(id.clone())?;
        self.nodes.insert(id.clone(), trusted);
        Ok(id)
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        let id = NodeId::new(name)?;
        self.check_node(&id)?;
        Ok(id)
    }

    fn check_node(&self, node: &NodeId) -> Result<()> {
        if self.nodes.contains_key(node) {
            Ok(())
        } else {
            Err(Error::UnknownNode(node.to_string()))
        }
    }

    pub fn is_trusted(&self, node: &NodeId) -> bool {
        self.nodes.get(node).copied().unwrap_or(false)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    /// Registers a link and optionally pre-fills its pools.
    pub fn configure_link(&mut self, spec: LinkSpec) -> Result<LinkId> {
        self.check_node(&spec.a)?;
        self.check_node(&spec.b)?;
        if spec.a == spec.b {
            return Err(Error::InvalidInput(format!("link endpoints coincide: `{}`", spec.a)));
        }
        let key = pair_key(&spec.a, &spec.b);
        if self.link_by_pair.contains_key(&key) {
            return Err(Error::DuplicateLink(spec.a.to_string(), spec.b.to_string()));
        }
        spec.quantum.validate()?;
        spec.classical.validate()?;
        spec.qkd.validate()?;
        let id = self.links.len() as LinkId;
        self.net.set_channel(&spec.a, &spec.b, spec.classical)?;
        let prefill = spec.prefill_sessions;
        let pools = [KeyPool::new(spec.low_watermark), KeyPool::new(spec.low_watermark)];
        self.links.insert(
            id,
            Link {
                spec,
                pools,
                nonce: 0,
                down: false,
                stats: LinkStats::default(),
            },
        );
        self.link_by_pair.insert(key, id);
        let obs = self.observation(id);
        self.watcher.prime(&obs, &self.settings.thresholds);
        for _ in 0..prefill {
            // failures are recorded as events; the link still exists
            let _ = self.run_qkd_session(id);
        }
        Ok(id)
    }

    pub fn link_between(&self, a: &NodeId, b: &NodeId) -> Result<LinkId> {
        self.check_node(a)?;
        self.check_node(b)?;
        self.link_by_pair
            .get(&pair_key(a, b))
            .copied()
            .ok_or_else(|| Error::UnknownLink(format!("{a}-{b}")))
    }

    fn link(&self, id: LinkId) -> Result<&Link> {
        self.links
            .get(&id)
            .ok_or_else(|| Error::UnknownLink(id.to_string()))
    }

    fn link_mut(&mut self, id: LinkId) -> Result<&mut Link> {
        self.links
            .get_mut(&id)
            .ok_or_else(|| Error::UnknownLink(id.to_string()))
    }

    pub fn link_ids(&self) -> Vec<LinkId> {
        self.links.keys().copied().collect()
    }

    pub fn link_spec(&self, id: LinkId) -> Result<&LinkSpec> {
        Ok(&self.link(id)?.spec)
    }

    pub fn link_stats(&self, id: LinkId) -> Result<LinkStats> {
        Ok(self.link(id)?.stats)
    }

    pub fn link_is_down(&self, id: LinkId) -> Result<bool> {
        Ok(self.link(id)?.down)
    }

    /// The pool held by `node` on link `id`.
    pub fn pool(&self, id: LinkId, node: &NodeId) -> Result<&KeyPool> {
        let link = self.link(id)?;
        if *node == link.spec.a {
            Ok(&link.pools[0])
        } else if *node == link.spec.b {
            Ok(&link.pools[1])
        } else {
            Err(Error::InvalidInput(format!("node `{node}` is not on link {id}")))
        }
    }

    /// Both pools of a link, `spec.a`'s first.
    pub fn pools(&self, id: LinkId) -> Result<(&KeyPool, &KeyPool)> {
        let link = self.link(id)?;
        Ok((&link.pools[0], &link.pools[1]))
    }

    /// Replaces a link's pools with identical pre-distilled material.
    pub fn load_pool_material(&mut self, id: LinkId, material: &[u8]) -> Result<()> {
        let link = self.link_mut(id)?;
        let wm = link.spec.low_watermark;
        link.pools = [
            KeyPool::with_material(material.to_vec(), wm),
            KeyPool::with_material(material.to_vec(), wm),
        ];
        let obs = self.observation(id);
        self.watcher.prime(&obs, &self.settings.thresholds);
        Ok(())
    }

    pub fn set_quantum_params(&mut self, id: LinkId, params: QuantumLinkParams) -> Result<()> {
        params.validate()?;
        self.link_mut(id)?.spec.quantum = params;
        Ok(())
    }

    pub fn set_qkd_params(&mut self, id: LinkId, params: QkdSessionParams) -> Result<()> {
        params.validate()?;
        self.link_mut(id)?.spec.qkd = params;
        Ok(())
    }

    pub fn mark_link_down(&mut self, id: LinkId, reason: &str) -> Result<()> {
        let link = self.link_mut(id)?;
        if link.down {
            return Ok(());
        }
        link.down = true;
        let e = Event::new(self.now(), Scope::Link(id), EventKind::LinkDown, Severity::Critical)
            .with("reason", reason.replace(char::is_whitespace, "_"));
        self.emit(e);
        Ok(())
    }

    /// Runs one BB84 session on the link; on success both pools grow.
    pub fn run_qkd_session(&mut self, id: LinkId) -> Result<SessionReport> {
        let exchange = self.settings.exchange;
        let link = self
            .links
            .get_mut(&id)
            .ok_or_else(|| Error::UnknownLink(id.to_string()))?;
        if link.down {
            return Err(Error::CircuitUnavailable(format!("link {id} is down")));
        }
        let nonce = link.nonce;
        link.nonce += 1;
        let [pa, pb] = &mut link.pools;
        let result = run_session(
            &mut self.net,
            &link.spec.a,
            &link.spec.b,
            &link.spec.quantum,
            &link.spec.qkd,
            nonce,
            pa,
            pb,
            exchange,
        );
        link.stats.sessions += 1;
        let now = self.net.now();
        let mut aborted = None;
        match &result {
            Ok(r) => {
                link.stats.last_qber = Some(r.outcome.qber_estimate);
                match r.outcome.status {
                    QkdStatus::Ok => {
                        link.stats.sessions_ok += 1;
                        link.stats.distilled_bits += r.outcome.distilled_bits as u64;
                    }
                    QkdStatus::AbortedQber => {
                        link.stats.aborted_qber += 1;
                        aborted = Some((r.outcome.status.as_str().to_string(), Some(r.outcome.qber_estimate)));
                    }
                    QkdStatus::AbortedInsufficient => {
                        link.stats.aborted_insufficient += 1;
                        aborted = Some((r.outcome.status.as_str().to_string(), Some(r.outcome.qber_estimate)));
                    }
                }
            }
            Err(e) => {
                link.stats.failed += 1;
                let status = match e {
                    Error::SessionTimeout => "timeout",
                    Error::ReconciliationFailed => "reconciliation_failed",
                    _ => "error",
                };
                aborted = Some((status.to_string(), None));
            }
        }
        if let Some((status, qber)) = aborted {
            let mut e = Event::new(now, Scope::Link(id), EventKind::SessionAborted, Severity::Warning)
                .with("status", status)
                .with("nonce", nonce);
            if let Some(q) = qber {
                e = e.with("qber", format!("{q:.4}"));
            }
            self.emit(e);
        }
        self.watch_link(id);
        result
    }

    fn observation(&self, id: LinkId) -> LinkObservation {
        let link = &self.links[&id];
        LinkObservation {
            link: id,
            qber: link.stats.last_qber,
            pool_available: link.pools[0].available(),
        }
    }

    fn watch_link(&mut self, id: LinkId) {
        let obs = self.observation(id);
        let events = self.watcher.observe(self.net.now(), &obs, &self.settings.thresholds);
        for e in events {
            self.emit(e);
        }
    }

    /// Statistics exposed to policy conditions as `link.<name>`.
    pub fn link_stat_map(&self, id: LinkId) -> Option<BTreeMap<String, f64>> {
        let link = self.links.get(&id)?;
        let s = &link.stats;
        Some(BTreeMap::from([
            ("qber".to_string(), s.last_qber.unwrap_or(0.0)),
            ("pool_bytes".to_string(), link.pools[0].available() as f64),
            ("sessions".to_string(), s.sessions as f64),
            ("sessions_ok".to_string(), s.sessions_ok as f64),
            ("aborted".to_string(), (s.aborted_qber + s.aborted_insufficient + s.failed) as f64),
            ("distilled_bits".to_string(), s.distilled_bits as f64),
            ("down".to_string(), if link.down { 1.0 } else { 0.0 }),
        ]))
    }

    // ---- management ----

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }

    pub fn event_log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn action_log(&self) -> &[ActionRecord] {
        &self.actions
    }

    pub fn add_policy(&mut self, policy: Policy) -> Result<()> {
        self.policies.add(policy)
    }

    pub fn policies(&self) -> &PolicyRegistry {
        &self.policies
    }

    /// Logs the event (subject to suppression), notifies subscribers and
    /// evaluates policies. Never fails.
    pub fn emit(&mut self, event: Event) {
        self.pending_events.push_back(event);
        if self.dispatching {
            return;
        }
        self.dispatching = true;
        let mut processed = 0;
        while let Some(e) = self.pending_events.pop_front() {
            processed += 1;
            if self.log.emit(e.clone()) && processed <= CASCADE_LIMIT {
                self.evaluate_policies(&e);
            }
        }
        self.dispatching = false;
    }

    /// Fires matching policies in priority order. Identical actions on
    /// the same scope run once per pass; failures are logged and
    /// evaluation continues.
    pub fn evaluate_policies(&mut self, event: &Event) -> Vec<ActionRecord> {
        let stats = match event.scope {
            Scope::Link(id) => self.link_stat_map(id),
            _ => None,
        };
        let fired: Vec<Policy> = self
            .policies
            .matching(event, stats.as_ref())
            .into_iter()
            .cloned()
            .collect();
        let mut done = BTreeSet::new();
        let mut records = Vec::new();
        for p in fired {
            if !done.insert(p.action.to_string()) {
                continue;
            }
            let outcome = self.execute(&p.action, event).map_err(|e| e.to_string());
            let rec = ActionRecord {
                tick: self.net.now(),
                policy: p.name.clone(),
                action: p.action.to_string(),
                scope: event.scope,
                outcome,
            };
            self.actions.push(rec.clone());
            records.push(rec);
        }
        records
    }

    fn links_in_scope(&self, scope: Scope) -> Vec<LinkId> {
        match scope {
            Scope::Link(id) => vec![id],
            Scope::Path(pid) => self
                .paths
                .get(&pid)
                .map(|p| p.hop_links.clone())
                .unwrap_or_default(),
            Scope::Network => self.link_ids(),
        }
    }

    fn circuits_in_scope(&self, scope: Scope) -> Vec<u64> {
        self.circuits
            .iter()
            .filter(|(_, c)| match scope {
                Scope::Network => true,
                Scope::Link(id) => c.link == id,
                Scope::Path(pid) => c.scope == Scope::Path(pid),
            })
            .filter(|(_, c)| c.ends[0].state() != &crate::overlay::CircuitState::Closed)
            .map(|(&id, _)| id)
            .collect()
    }

    fn execute(&mut self, action: &Action, event: &Event) -> Result<String> {
        match action {
            Action::TriggerQkdSession => {
                let mut ok = 0;
                let links = self.links_in_scope(event.scope);
                let mut last_err = None;
                for id in &links {
                    match self.run_qkd_session(*id) {
                        Ok(r) if r.outcome.status == QkdStatus::Ok => ok += 1,
                        Ok(r) => last_err = Some(format!("link {id}: {}", r.outcome.status.as_str())),
                        Err(e) => last_err = Some(format!("link {id}: {e}")),
                    }
                }
                match (ok, last_err) {
                    (0, Some(e)) => Err(Error::CircuitUnavailable(e)),
                    _ => Ok(format!("{ok} of {} sessions ok", links.len())),
                }
            }
            Action::RefreshCircuitKeys => {
                let ids = self.circuits_in_scope(event.scope);
                let mut failed = Vec::new();
                for cid in &ids {
                    if let Err(e) = self.refresh_circuit(*cid) {
                        failed.push(format!("circuit {cid}: {e}"));
                    }
                }
                if failed.is_empty() {
                    Ok(format!("{} circuits refreshed", ids.len()))
                } else {
                    Err(Error::KeyExhausted(failed.join("; ")))
                }
            }
            Action::MarkLinkDown => {
                let links = self.links_in_scope(event.scope);
                for id in &links {
                    self.mark_link_down(*id, &format!("policy_on_{}", event.kind))?;
                }
                Ok(format!("{} links down", links.len()))
            }
            Action::RaiseAlert => Ok(format!("alert: {event}")),
            Action::SetParam { name, value } => self.set_param(name, value, event.scope),
        }
    }

    /// Adjusts a named parameter. Link-level names apply to the links in
    /// `scope`.
    pub fn set_param(&mut self, name: &str, value: &str, scope: Scope) -> Result<String> {
        let num = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("`{value}` is not a number")))
        };
        match name {
            "qber_high" => self.settings.thresholds.qber_high = num()?,
            "pool_low_bytes" => self.settings.thresholds.pool_low_bytes = num()? as usize,
            _ => {
                let v = num()?;
                for id in self.links_in_scope(scope) {
                    let link = self.link_mut(id)?;
                    let mut q = link.spec.qkd;
                    let mut ql = link.spec.quantum;
                    match name {
                        "pulse_count" => q.pulse_count = v as usize,
                        "sample_fraction" => q.sample_fraction = v,
                        "qber_abort_threshold" => q.qber_abort_threshold = v,
                        "reconciliation_block_size" => q.reconciliation_block_size = v as usize,
                        "privacy_safety_margin_bits" => q.privacy_safety_margin_bits = v as usize,
                        "loss_probability" => ql.loss_probability = v,
                        "flip_probability" => ql.flip_probability = v,
                        "low_watermark" => {
                            link.spec.low_watermark = v as usize;
                            for p in &mut link.pools {
                                p.set_low_watermark(v as usize);
                            }
                        }
                        _ => return Err(Error::InvalidInput(format!("unknown parameter `{name}`"))),
                    }
                    q.validate()?;
                    ql.validate()?;
                    link.spec.qkd = q;
                    link.spec.quantum = ql;
                }
            }
        }
        Ok(format!("{name}={value}"))
    }

    // ---- simulation driver ----

    /// Runs one tick.
    pub fn pump(&mut self) -> Result<()> {
        let now = self.net.now();
        let inbound = self.collect_inbound();
        let outputs = self.step_endpoints(now, inbound);
        for (cid, side, out) in outputs {
            self.apply_output(cid, side, out)?;
        }
        self.forward_relays()?;
        self.check_refresh_triggers();
        self.log.close_windows(now);
        self.net.advance();
        Ok(())
    }

    pub fn run_ticks(&mut self, ticks: u64) -> Result<()> {
        for _ in 0..ticks {
            self.pump()?;
        }
        Ok(())
    }

    /// Pumps until no circuit has queued or unacknowledged data and no
    /// frame is in flight. Returns false if `max_ticks` ran out first.
    pub fn run_until_idle(&mut self, max_ticks: u64) -> Result<bool> {
        for _ in 0..max_ticks {
            if self.net.in_flight() == 0 && self.circuits.values().all(|c| c.ends.iter().all(Endpoint::idle)) {
                return Ok(true);
            }
            self.pump()?;
        }
        Ok(false)
    }

    /// Routes delivered overlay frames and echoes to circuit ends.
    fn collect_inbound(&mut self) -> BTreeMap<(u64, usize), (Vec<Vec<u8>>, Vec<Control>)> {
        let mut inbound: BTreeMap<(u64, usize), (Vec<Vec<u8>>, Vec<Control>)> = BTreeMap::new();
        let nodes: Vec<NodeId> = self.nodes.keys().cloned().collect();
        for node in &nodes {
            for msg in self.net.drain(node, frame::DATA_LABEL) {
                let Some(cid) = frame::peek_circuit_id(&msg.payload) else { continue };
                let Some(c) = self.circuits.get(&cid) else { continue };
                let Some(side) = c.side_of(node) else { continue };
                if c.nodes[1 - side] != msg.source {
                    continue;
                }
                inbound.entry((cid, side)).or_default().0.push(msg.payload);
            }
            self.route_echoes(node, &mut inbound);
        }
        inbound
    }

    fn route_echoes(&mut self, node: &NodeId, inbound: &mut BTreeMap<(u64, usize), (Vec<Vec<u8>>, Vec<Control>)>) {
        for msg in self.net.drain(node, frame::SYNC_LABEL) {
            let Ok(ctl @ Control::Echo { circuit_id, .. }) = Control::decode(&msg.payload) else {
                continue;
            };
            let Some(c) = self.circuits.get(&circuit_id) else { continue };
            let Some(side) = c.side_of(node) else { continue };
            inbound.entry((circuit_id, side)).or_default().1.push(ctl);
        }
    }

    fn step_endpoints(
        &mut self,
        now: u64,
        mut inbound: BTreeMap<(u64, usize), (Vec<Vec<u8>>, Vec<Control>)>,
    ) -> Vec<(u64, usize, StepOutput)> {
        type Work<'a> = (u64, usize, &'a mut Endpoint, (Vec<Vec<u8>>, Vec<Control>));
        let mut by_node: BTreeMap<NodeId, Vec<Work<'_>>> = BTreeMap::new();
        for (&cid, c) in self.circuits.iter_mut() {
            let [e0, e1] = &mut c.ends;
            for (side, ep) in [(0usize, e0), (1usize, e1)] {
                let input = inbound.remove(&(cid, side)).unwrap_or_default();
                by_node
                    .entry(c.nodes[side].clone())
                    .or_default()
                    .push((cid, side, ep, input));
            }
        }
        let run = |work: Vec<Work<'_>>| -> Vec<(u64, usize, StepOutput)> {
            work.into_iter()
                .map(|(cid, side, ep, (frames, echoes))| (cid, side, ep.step(now, &frames, &echoes)))
                .collect()
        };
        let mut outputs: Vec<(u64, usize, StepOutput)> = if self.settings.parallel_nodes && by_node.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = by_node.into_values().map(|w| s.spawn(move || run(w))).collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("node context panicked"))
                    .collect()
            })
        } else {
            by_node.into_values().flat_map(run).collect()
        };
        // a canonical order keeps the network's random draws identical
        // whether or not node contexts ran concurrently
        outputs.sort_by_key(|(cid, side, _)| (*cid, *side));
        outputs
    }

    fn apply_output(&mut self, cid: u64, side: usize, out: StepOutput) -> Result<()> {
        let c = &self.circuits[&cid];
        let (from, to) = (c.nodes[side].clone(), c.nodes[1 - side].clone());
        for f in out.frames {
            self.net.send(&from, &to, frame::DATA_LABEL, f)?;
        }
        for (seq, attempts) in out.failures {
            let c = self.circuits.get_mut(&cid).expect("circuit");
            c.failures.push((side, seq, attempts));
            let e = Event::new(self.net.now(), c.scope, EventKind::DeliveryFailed, Severity::Critical)
                .with("circuit", cid)
                .with("sequence_id", seq)
                .with("attempts", attempts);
            self.emit(e);
        }
        if out.desync {
            self.report_desync(cid);
        }
        Ok(())
    }

    fn report_desync(&mut self, cid: u64) {
        let c = self.circuits.get_mut(&cid).expect("circuit");
        if c.desync_reported {
            return;
        }
        c.desync_reported = true;
        for e in &mut c.ends {
            e.set_state(crate::overlay::CircuitState::Desynced);
        }
        let e = Event::new(self.net.now(), c.scope, EventKind::Desync, Severity::Critical).with("circuit", cid);
        self.emit(e);
    }

    fn check_refresh_triggers(&mut self) {
        let now = self.net.now();
        let due: Vec<u64> = self
            .circuits
            .iter()
            .filter(|(_, c)| c.kind.is_datagram() && now >= c.refresh_backoff_until)
            .filter(|(_, c)| !matches!(c.ends[0].state(), crate::overlay::CircuitState::Closed))
            .filter(|(_, c)| {
                let sent = c.ends[0].sent_in_epoch() + c.ends[1].sent_in_epoch();
                let by_count = c.config.key_refresh_datagrams.is_some_and(|n| sent >= n);
                let by_time = c.config.key_refresh_ticks.is_some_and(|t| now >= c.epoch_started + t);
                by_count || by_time || c.ends.iter().any(Endpoint::blocked_on_key)
            })
            .map(|(&id, _)| id)
            .collect();
        for cid in due {
            // a failed refresh is reported through events and the
            // circuit state; the old epoch stays usable
            let _ = self.refresh_circuit(cid);
        }
    }
}
