//! Topology files.
//!
//! Line-oriented sections, `key = value` entries, `#` comments:
//!
//! ```text
//! [defaults]          # QKD and channel defaults for every link
//! pulse_count = 10000
//!
//! [node]
//! name = alice
//! trusted = true
//!
//! [link]
//! a = alice
//! b = bob
//! flip_probability = 0.02
//!
//! [path]
//! name = main
//! nodes = alice relay bob
//! kind = bytestream
//!
//! [policy]
//! rule = when kind == QBER_HIGH then refresh_circuit_keys priority 1
//!
//! [thresholds]
//! qber_high = 0.11
//! ```
//!
//! Every error names the offending line.

use std::collections::{BTreeMap, BTreeSet};

use crate::classical::{ClassicalChannelParams, NodeId};
use crate::control::{Controller, ControllerSettings, LinkSpec, PathSpec, Policy};
use crate::error::{Error, Result};
use crate::mgmt::Thresholds;
use crate::overlay::{CircuitConfig, CircuitKind};
use crate::qkd::QkdSessionParams;
use crate::quantum::{Eavesdropper, QuantumLinkParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecl {
    pub name: String,
    pub trusted: bool,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkDecl {
    pub a: String,
    pub b: String,
    pub quantum: QuantumLinkParams,
    pub classical: ClassicalChannelParams,
    pub qkd: QkdSessionParams,
    pub low_watermark: usize,
    pub prefill_sessions: u32,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathDecl {
    pub name: String,
    pub nodes: Vec<String>,
    pub config: CircuitConfig,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    pub nodes: Vec<NodeDecl>,
    pub links: Vec<LinkDecl>,
    pub paths: Vec<PathDecl>,
    pub policies: Vec<(Policy, usize)>,
    pub thresholds: Thresholds,
}

/// Settings shared by links, overridable per link.
#[derive(Debug, Clone, Copy)]
struct LinkDefaults {
    quantum: QuantumLinkParams,
    classical: ClassicalChannelParams,
    qkd: QkdSessionParams,
    low_watermark: usize,
    prefill_sessions: u32,
}

impl Default for LinkDefaults {
    fn default() -> Self {
        LinkDefaults {
            quantum: QuantumLinkParams::default(),
            classical: ClassicalChannelParams::default(),
            qkd: QkdSessionParams::default(),
            low_watermark: 256,
            prefill_sessions: 1,
        }
    }
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Config { line, message: message.into() })
}

fn num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .or_else(|_| err(line, format!("`{key}`: cannot parse `{value}`")))
}

fn boolean(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => err(line, format!("`{key}`: expected true or false, got `{value}`")),
    }
}

/// Applies a link-level key; false if the key is not a link key.
fn link_key(d: &mut LinkDefaults, line: usize, key: &str, value: &str) -> Result<bool> {
    match key {
        "loss_probability" => d.quantum.loss_probability = num(line, key, value)?,
        "flip_probability" => d.quantum.flip_probability = num(line, key, value)?,
        "eavesdropper" => {
            d.quantum.eavesdropper = match value {
                "none" => Eavesdropper::None,
                "intercept_resend" | "intercept-resend" => Eavesdropper::InterceptResend,
                _ => return err(line, format!("unknown eavesdropper `{value}`")),
            }
        }
        "drop_probability" => d.classical.drop_probability = num(line, key, value)?,
        "latency_ticks" => d.classical.latency_ticks = num(line, key, value)?,
        "pulse_count" => d.qkd.pulse_count = num(line, key, value)?,
        "sample_fraction" => d.qkd.sample_fraction = num(line, key, value)?,
        "qber_abort_threshold" => d.qkd.qber_abort_threshold = num(line, key, value)?,
        "reconciliation_block_size" => d.qkd.reconciliation_block_size = num(line, key, value)?,
        "privacy_safety_margin_bits" => d.qkd.privacy_safety_margin_bits = num(line, key, value)?,
        "low_watermark" => d.low_watermark = num(line, key, value)?,
        "prefill_sessions" => d.prefill_sessions = num(line, key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn circuit_key(c: &mut CircuitConfig, line: usize, key: &str, value: &str) -> Result<bool> {
    let opt = |v: &str| -> Result<Option<u64>> {
        if v == "none" {
            Ok(None)
        } else {
            num(line, key, v).map(Some)
        }
    };
    match key {
        "kind" => {
            c.kind = value
                .parse()
                .or_else(|_| err(line, format!("unknown circuit kind `{value}`")))?
        }
        "cipher_mode" => {
            c.cipher_mode = value
                .parse()
                .or_else(|_| err(line, format!("unknown cipher mode `{value}`")))?
        }
        "key_refresh_datagrams" => c.key_refresh_datagrams = opt(value)?,
        "key_refresh_ticks" => c.key_refresh_ticks = opt(value)?,
        "max_datagram_bytes" => c.max_datagram_bytes = num(line, key, value)?,
        "retransmit_limit" => c.retransmit_limit = num(line, key, value)?,
        "ack_timeout_ticks" => c.ack_timeout_ticks = num(line, key, value)?,
        "window" => c.window = num(line, key, value)?,
        "otp_pad_bytes" => c.otp_pad_bytes = num(line, key, value)?,
        "echo_period" => c.echo_period = num(line, key, value)?,
        "sync_block_bytes" => c.sync_block_bytes = num(line, key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Defaults,
    Node,
    Link,
    Path,
    Policy,
    Thresholds,
}

/// One section instance being filled in.
enum Block {
    Node(NodeDecl),
    Link(LinkDecl, LinkDefaults),
    Path(PathDecl),
    Other,
}

impl TopologyConfig {
    pub fn parse(text: &str) -> Result<TopologyConfig> {
        let mut cfg = TopologyConfig {
            nodes: Vec::new(),
            links: Vec::new(),
            paths: Vec::new(),
            policies: Vec::new(),
            thresholds: Thresholds::default(),
        };
        let mut defaults = LinkDefaults::default();
        let mut section = Section::None;
        let mut block = Block::Other;
        let mut seen_keys: BTreeSet<String> = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                cfg.finish(std::mem::replace(&mut block, Block::Other))?;
                seen_keys.clear();
                section = match name.trim() {
                    "defaults" => Section::Defaults,
                    "node" => Section::Node,
                    "link" => Section::Link,
                    "path" => Section::Path,
                    "policy" => Section::Policy,
                    "thresholds" => Section::Thresholds,
                    other => return err(line, format!("unknown section `[{other}]`")),
                };
                block = match section {
                    Section::Node => Block::Node(NodeDecl {
                        name: String::new(),
                        trusted: true,
                        line,
                    }),
                    Section::Link => Block::Link(
                        LinkDecl {
                            a: String::new(),
                            b: String::new(),
                            quantum: defaults.quantum,
                            classical: defaults.classical,
                            qkd: defaults.qkd,
                            low_watermark: defaults.low_watermark,
                            prefill_sessions: defaults.prefill_sessions,
                            line,
                        },
                        defaults,
                    ),
                    Section::Path => Block::Path(PathDecl {
                        name: String::new(),
                        nodes: Vec::new(),
                        config: CircuitConfig::new(CircuitKind::SecureReliableDatagram),
                        line,
                    }),
                    _ => Block::Other,
                };
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return err(line, format!("expected `key = value`, got `{content}`"));
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return err(line, "empty key or value");
            }
            if section != Section::Policy && !seen_keys.insert(key.to_string()) {
                return err(line, format!("`{key}` given twice in this section"));
            }
            match (section, &mut block) {
                (Section::None, _) => return err(line, "entry outside any section"),
                (Section::Defaults, _) => {
                    if !link_key(&mut defaults, line, key, value)? {
                        return err(line, format!("unknown default `{key}`"));
                    }
                }
                (Section::Node, Block::Node(n)) => match key {
                    "name" => n.name = value.to_string(),
                    "trusted" => n.trusted = boolean(line, key, value)?,
                    _ => return err(line, format!("unknown node key `{key}`")),
                },
                (Section::Link, Block::Link(l, d)) => match key {
                    "a" => l.a = value.to_string(),
                    "b" => l.b = value.to_string(),
                    _ => {
                        if !link_key(d, line, key, value)? {
                            return err(line, format!("unknown link key `{key}`"));
                        }
                        l.quantum = d.quantum;
                        l.classical = d.classical;
                        l.qkd = d.qkd;
                        l.low_watermark = d.low_watermark;
                        l.prefill_sessions = d.prefill_sessions;
                    }
                },
                (Section::Path, Block::Path(p)) => match key {
                    "name" => p.name = value.to_string(),
                    "nodes" => {
                        p.nodes = value
                            .split(|c: char| c.is_whitespace() || c == ',')
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect()
                    }
                    _ => {
                        if !circuit_key(&mut p.config, line, key, value)? {
                            return err(line, format!("unknown path key `{key}`"));
                        }
                    }
                },
                (Section::Policy, _) => match key {
                    "rule" => {
                        let p = Policy::parse(value).or_else(|e| err(line, e.to_string()))?;
                        if cfg.policies.iter().any(|(q, _)| q.priority == p.priority) {
                            return err(line, format!("priority {} already in use", p.priority));
                        }
                        cfg.policies.push((p, line));
                    }
                    _ => return err(line, format!("unknown policy key `{key}`")),
                },
                (Section::Thresholds, _) => match key {
                    "qber_high" => cfg.thresholds.qber_high = num(line, key, value)?,
                    "pool_low_bytes" => cfg.thresholds.pool_low_bytes = num(line, key, value)?,
                    _ => return err(line, format!("unknown threshold `{key}`")),
                },
                _ => unreachable!("block matches section"),
            }
        }
        cfg.finish(block)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn finish(&mut self, block: Block) -> Result<()> {
        match block {
            Block::Node(n) => {
                if n.name.is_empty() {
                    return err(n.line, "node lacks `name`");
                }
                self.nodes.push(n);
            }
            Block::Link(l, _) => {
                if l.a.is_empty() || l.b.is_empty() {
                    return err(l.line, "link needs both `a` and `b`");
                }
                let check = l
                    .quantum
                    .validate()
                    .and(l.classical.validate())
                    .and(l.qkd.validate());
                if let Err(e) = check {
                    return err(l.line, e.to_string());
                }
                self.links.push(l);
            }
            Block::Path(p) => {
                if p.name.is_empty() {
                    return err(p.line, "path lacks `name`");
                }
                if p.nodes.len() < 2 {
                    return err(p.line, "path needs at least two nodes");
                }
                if let Err(e) = p.config.validate() {
                    return err(p.line, e.to_string());
                }
                self.paths.push(p);
            }
            Block::Other => {}
        }
        Ok(())
    }

    /// Every reference resolves and nothing is declared twice.
    fn validate(&self) -> Result<()> {
        let mut names = BTreeMap::new();
        for n in &self.nodes {
            if let Err(e) = NodeId::new(n.name.as_str()) {
                return err(n.line, e.to_string());
            }
            if names.insert(n.name.as_str(), n.trusted).is_some() {
                return err(n.line, format!("node `{}` declared twice", n.name));
            }
        }
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !names.contains_key(end.as_str()) {
                    return err(l.line, format!("unknown node `{end}`"));
                }
            }
            if l.a == l.b {
                return err(l.line, "link endpoints coincide");
            }
            let key = if l.a < l.b { (&l.a, &l.b) } else { (&l.b, &l.a) };
            if !pairs.insert(key) {
                return err(l.line, format!("duplicate link {}-{}", l.a, l.b));
            }
        }
        let mut path_names = BTreeSet::new();
        for p in &self.paths {
            if !path_names.insert(&p.name) {
                return err(p.line, format!("path `{}` declared twice", p.name));
            }
            for n in &p.nodes {
                if !names.contains_key(n.as_str()) {
                    return err(p.line, format!("unknown node `{n}`"));
                }
            }
            for w in p.nodes.windows(2) {
                let key = if w[0] < w[1] { (&w[0], &w[1]) } else { (&w[1], &w[0]) };
                if !pairs.contains(&key) {
                    return err(p.line, format!("no link between `{}` and `{}`", w[0], w[1]));
                }
            }
            for n in &p.nodes[1..p.nodes.len() - 1] {
                if !names[n.as_str()] {
                    return err(p.line, format!("relay `{n}` is not trusted"));
                }
            }
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> Option<&PathDecl> {
        self.paths.iter().find(|p| p.name == name)
    }

    /// A controller with every node, link and policy of the file. Link
    /// seeds derive from `seed` and the link's position in the file.
    pub fn build(&self, seed: u64, settings: ControllerSettings) -> Result<Controller> {
        let mut ctrl = Controller::new(ControllerSettings {
            thresholds: self.thresholds,
            ..settings
        });
        for n in &self.nodes {
            ctrl.add_node(&n.name, n.trusted)?;
        }
        for (i, l) in self.links.iter().enumerate() {
            let i = i as u64;
            let mut spec = LinkSpec::new(NodeId::new(l.a.as_str())?, NodeId::new(l.b.as_str())?);
            spec.quantum = QuantumLinkParams {
                seed: rng::mix(seed, 3 * i),
                ..l.quantum
            };
            spec.qkd = QkdSessionParams {
                seed: rng::mix(seed, 3 * i + 1),
                ..l.qkd
            };
            spec.classical = ClassicalChannelParams {
                seed: rng::mix(seed, 3 * i + 2),
                ..l.classical
            };
            spec.low_watermark = l.low_watermark;
            spec.prefill_sessions = l.prefill_sessions;
            ctrl.configure_link(spec)?;
        }
        for (p, _) in &self.policies {
            ctrl.add_policy(p.clone())?;
        }
        Ok(ctrl)
    }

    pub fn path_spec(&self, name: &str) -> Result<PathSpec> {
        let p = self
            .path(name)
            .ok_or_else(|| Error::InvalidInput(format!("no path named `{name}`")))?;
        Ok(PathSpec::new(
            p.nodes
                .iter()
                .map(|n| NodeId::new(n.as_str()))
                .collect::<Result<_>>()?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
[defaults]
pulse_count = 4000

[node]
name = a
[node]
name = r
[node]
name = b
trusted = false

[link]
a = a
b = r
flip_probability = 0.02

[link]
a = r
b = b

[path]
name = p
nodes = a r b
kind = bytestream

[policy]
rule = when kind == QBER_HIGH then refresh_circuit_keys priority 1

[thresholds]
qber_high = 0.2
";

    #[test]
    fn parses_sample() {
        let c = TopologyConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.nodes.len(), 3);
        assert!(!c.nodes[2].trusted);
        assert_eq!(c.links[0].qkd.pulse_count, 4000);
        assert_eq!(c.links[0].quantum.flip_probability, 0.02);
        assert_eq!(c.links[1].quantum.flip_probability, QuantumLinkParams::default().flip_probability);
        assert_eq!(c.paths[0].config.kind, CircuitKind::SecureReliableBytestream);
        assert_eq!(c.thresholds.qber_high, 0.2);
        assert_eq!(c.policies.len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("[node]\nname = a\ncolour = red\n", 3),
            ("[link]\na = a\nb = z\n", 1),
            ("x = 1\n", 1),
            ("[bogus]\n", 1),
            ("[node]\nname = a\n[node]\nname = a\n", 3),
            ("[node]\nname = a\n\n[policy]\nrule = when kind then x priority 1\n", 5),
            ("[defaults]\nloss_probability = lots\n", 2),
            ("[node]\nname = a\nname = b\n", 3),
        ];
        for (text, want) in cases {
            match TopologyConfig::parse(text) {
                Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn untrusted_relay_rejected() {
        let text = SAMPLE.replace("nodes = a r b", "nodes = a b r") + "[link]\na = b\nb = a\n";
        match TopologyConfig::parse(&text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 22);
                assert!(message.contains("not trusted"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }
}
