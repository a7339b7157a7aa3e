//! The classical companion network: authenticated, tamper-free transport
//! between named nodes with per-pair drop probability and latency, driven
//! by an integer tick clock.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return invalid(format!("node name `{name}` must be non-empty without whitespace"));
        }
        Ok(NodeId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    /// Panics on an empty or whitespace-bearing name; use [`NodeId::new`]
    /// for untrusted input.
    fn from(s: &str) -> Self {
        NodeId::new(s).expect("valid node name")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalChannelParams {
    pub drop_probability: f64,
    pub latency_ticks: u64,
    pub seed: u64,
}

impl Default for ClassicalChannelParams {
    fn default() -> Self {
        ClassicalChannelParams {
            drop_probability: 0.0,
            latency_ticks: 1,
            seed: 0,
        }
    }
}

impl ClassicalChannelParams {
    pub fn lossless(latency_ticks: u64, seed: u64) -> Self {
        ClassicalChannelParams {
            drop_probability: 0.0,
            latency_ticks,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return invalid(format!(
                "drop_probability must lie in [0, 1], got {}",
                self.drop_probability
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub source: NodeId,
    pub destination: NodeId,
    pub channel_label: String,
    pub payload: Vec<u8>,
    pub message_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryTicket {
    pub message_id: u64,
    pub sent_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub tampered: u64,
}

struct Scheduled {
    at: u64,
    seq: u64,
    msg: Message,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct Channel {
    params: ClassicalChannelParams,
    rng: ChaCha8Rng,
}

/// Test adversary: flips one payload bit in the next `remaining` messages
/// matching the flow. The honest channel never does this.
#[derive(Debug, Clone)]
pub struct Tamper {
    pub source: NodeId,
    pub destination: NodeId,
    pub channel_label: String,
    pub remaining: u32,
    pub bit: usize,
}

pub struct ClassicalNetwork {
    now: u64,
    nodes: BTreeSet<NodeId>,
    default_params: ClassicalChannelParams,
    channels: BTreeMap<(NodeId, NodeId), Channel>,
    scheduled: BinaryHeap<Reverse<Scheduled>>,
    inboxes: BTreeMap<(NodeId, String), VecDeque<Message>>,
    next_ids: BTreeMap<(NodeId, String), u64>,
    seq: u64,
    tampers: Vec<Tamper>,
    stats: NetStats,
}

fn pair(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl ClassicalNetwork {
    pub fn new(default_params: ClassicalChannelParams) -> Self {
        ClassicalNetwork {
            now: 0,
            nodes: BTreeSet::new(),
            default_params,
            channels: BTreeMap::new(),
            scheduled: BinaryHeap::new(),
            inboxes: BTreeMap::new(),
            next_ids: BTreeMap::new(),
            seq: 0,
            tampers: Vec::new(),
            stats: NetStats::default(),
        }
    }

    pub fn register(&mut self, node: NodeId) -> Result<()> {
        if !self.nodes.insert(node.clone()) {
            return invalid(format!("node `{node}` registered twice"));
        }
        Ok(())
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.nodes.contains(node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter()
    }

    fn check(&self, node: &NodeId) -> Result<()> {
        if self.nodes.contains(node) {
            Ok(())
        } else {
            Err(Error::UnknownNode(node.to_string()))
        }
    }

    /// Sets the parameters of the unordered pair `{a, b}`, resetting its
    /// random stream.
    pub fn set_channel(&mut self, a: &NodeId, b: &NodeId, params: ClassicalChannelParams) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        params.validate()?;
        let key = pair(a, b);
        let rng = rng::substream(params.seed, &format!("classical:{}|{}", key.0, key.1));
        self.channels.insert(key, Channel { params, rng });
        Ok(())
    }

    pub fn channel_params(&self, a: &NodeId, b: &NodeId) -> ClassicalChannelParams {
        self.channels
            .get(&pair(a, b))
            .map(|c| c.params)
            .unwrap_or(self.default_params)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn add_tamper(&mut self, tamper: Tamper) {
        self.tampers.push(tamper);
    }

    /// Queues `payload` for `destination` under the pair's channel
    /// parameters. A dropped message is indistinguishable to the sender.
    pub fn send(
        &mut self,
        source: &NodeId,
        destination: &NodeId,
        channel_label: &str,
        payload: Vec<u8>,
    ) -> Result<DeliveryTicket> {
        self.check(source)?;
        self.check(destination)?;
        if source == destination {
            return invalid(format!("node `{source}` cannot send to itself"));
        }
        let key = pair(source, destination);
        if !self.channels.contains_key(&key) {
            let params = self.default_params;
            self.set_channel(source, destination, params)?;
        }
        let channel = self.channels.get_mut(&key).expect("channel present");
        let id_slot = self
            .next_ids
            .entry((source.clone(), channel_label.to_string()))
            .or_insert(0);
        let message_id = *id_slot;
        *id_slot += 1;
        self.stats.sent += 1;
        let ticket = DeliveryTicket {
            message_id,
            sent_at: self.now,
        };
        if channel.params.drop_probability > 0.0
            && channel.rng.gen::<f64>() < channel.params.drop_probability
        {
            self.stats.dropped += 1;
            return Ok(ticket);
        }
        let latency = channel.params.latency_ticks;
        let mut msg = Message {
            source: source.clone(),
            destination: destination.clone(),
            channel_label: channel_label.to_string(),
            payload,
            message_id,
        };
        self.apply_tamper(&mut msg);
        let at = self.now + latency;
        self.seq += 1;
        self.scheduled.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            msg,
        }));
        Ok(ticket)
    }

    fn apply_tamper(&mut self, msg: &mut Message) {
        for t in &mut self.tampers {
            if t.remaining > 0
                && t.source == msg.source
                && t.destination == msg.destination
                && t.channel_label == msg.channel_label
                && !msg.payload.is_empty()
            {
                let bit = t.bit % (msg.payload.len() * 8);
                msg.payload[bit / 8] ^= 0x80 >> (bit % 8);
                t.remaining -= 1;
                self.stats.tampered += 1;
                return;
            }
        }
    }

    fn deliver_due(&mut self) {
        while let Some(Reverse(top)) = self.scheduled.peek() {
            if top.at > self.now {
                break;
            }
            let Reverse(s) = self.scheduled.pop().expect("peeked");
            self.stats.delivered += 1;
            self.inboxes
                .entry((s.msg.destination.clone(), s.msg.channel_label.clone()))
                .or_default()
                .push_back(s.msg);
        }
    }

    /// Next delivered message for `node` on `channel_label`, if any.
    pub fn receive(&mut self, node: &NodeId, channel_label: &str) -> Option<Message> {
        self.deliver_due();
        self.inboxes
            .get_mut(&(node.clone(), channel_label.to_string()))
            .and_then(VecDeque::pop_front)
    }

    /// Every delivered message for `node` on `channel_label`, in arrival order.
    pub fn drain(&mut self, node: &NodeId, channel_label: &str) -> Vec<Message> {
        self.deliver_due();
        self.inboxes
            .get_mut(&(node.clone(), channel_label.to_string()))
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn in_flight(&self) -> usize {
        self.scheduled.len() + self.inboxes.values().map(VecDeque::len).sum::<usize>()
    }

    pub fn advance(&mut self) {
        self.now += 1;
    }

    pub fn advance_by(&mut self, ticks: u64) {
        self.now += ticks;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(params: ClassicalChannelParams) -> (ClassicalNetwork, NodeId, NodeId) {
        let mut n = ClassicalNetwork::new(params);
        let a = NodeId::from("a");
        let b = NodeId::from("b");
        n.register(a.clone()).unwrap();
        n.register(b.clone()).unwrap();
        (n, a, b)
    }

    #[test]
    fn lossless_zero_latency_same_tick() {
        let (mut n, a, b) = net(ClassicalChannelParams::lossless(0, 1));
        n.send(&a, &b, "x", vec![1, 2, 3]).unwrap();
        let m = n.receive(&b, "x").unwrap();
        assert_eq!(m.payload, vec![1, 2, 3]);
        assert_eq!(m.source, a);
        assert!(n.receive(&b, "x").is_none());
    }

    #[test]
    fn certain_drop_never_delivers() {
        let params = ClassicalChannelParams {
            drop_probability: 1.0,
            latency_ticks: 0,
            seed: 2,
        };
        let (mut n, a, b) = net(params);
        for i in 0..100u8 {
            n.send(&a, &b, "x", vec![i]).unwrap();
        }
        n.advance_by(10);
        assert!(n.receive(&b, "x").is_none());
        assert_eq!(n.stats().dropped, 100);
    }

    #[test]
    fn drop_rate_is_binomial() {
        let params = ClassicalChannelParams {
            drop_probability: 0.3,
            latency_ticks: 0,
            seed: 3,
        };
        let (mut n, a, b) = net(params);
        for _ in 0..10_000 {
            n.send(&a, &b, "x", vec![0]).unwrap();
        }
        let got = n.drain(&b, "x").len() as f64;
        let sigma = (10_000.0f64 * 0.3 * 0.7).sqrt();
        assert!((got - 7000.0).abs() <= 3.0 * sigma, "delivered {got}");
    }

    #[test]
    fn fifo_per_flow_and_latency_order() {
        let (mut n, a, b) = net(ClassicalChannelParams::lossless(2, 4));
        n.send(&a, &b, "x", b"A".to_vec()).unwrap();
        n.send(&a, &b, "x", b"B".to_vec()).unwrap();
        assert!(n.receive(&b, "x").is_none());
        n.advance_by(2);
        assert_eq!(n.receive(&b, "x").unwrap().payload, b"A");
        assert_eq!(n.receive(&b, "x").unwrap().payload, b"B");

        // a slow flow and a fast flow to the same node
        let c = NodeId::from("c");
        n.register(c.clone()).unwrap();
        n.set_channel(&a, &b, ClassicalChannelParams::lossless(5, 4)).unwrap();
        n.set_channel(&c, &b, ClassicalChannelParams::lossless(0, 4)).unwrap();
        n.send(&a, &b, "y", b"slow".to_vec()).unwrap();
        n.send(&c, &b, "y", b"fast".to_vec()).unwrap();
        assert_eq!(n.receive(&b, "y").unwrap().payload, b"fast");
        assert!(n.receive(&b, "y").is_none());
        n.advance_by(5);
        assert_eq!(n.receive(&b, "y").unwrap().payload, b"slow");
    }

    #[test]
    fn message_ids_increase_per_flow() {
        let (mut n, a, b) = net(ClassicalChannelParams::lossless(0, 5));
        let t0 = n.send(&a, &b, "x", vec![]).unwrap();
        let t1 = n.send(&a, &b, "x", vec![]).unwrap();
        let u0 = n.send(&a, &b, "y", vec![]).unwrap();
        assert!(t1.message_id > t0.message_id);
        assert_eq!(u0.message_id, 0);
    }

    #[test]
    fn unknown_nodes_rejected() {
        let (mut n, a, _) = net(ClassicalChannelParams::default());
        let ghost = NodeId::from("ghost");
        assert_eq!(
            n.send(&a, &ghost, "x", vec![]).unwrap_err(),
            Error::UnknownNode("ghost".into())
        );
        assert!(n.receive(&ghost, "x").is_none());
        assert!(n.send(&a, &a, "x", vec![]).is_err());
    }

    #[test]
    fn tamper_flips_exactly_one_bit() {
        let (mut n, a, b) = net(ClassicalChannelParams::lossless(0, 6));
        n.add_tamper(Tamper {
            source: a.clone(),
            destination: b.clone(),
            channel_label: "x".into(),
            remaining: 1,
            bit: 3,
        });
        n.send(&a, &b, "x", vec![0, 0]).unwrap();
        n.send(&a, &b, "x", vec![0, 0]).unwrap();
        assert_eq!(n.receive(&b, "x").unwrap().payload, vec![0x10, 0]);
        assert_eq!(n.receive(&b, "x").unwrap().payload, vec![0, 0]);
    }
}
