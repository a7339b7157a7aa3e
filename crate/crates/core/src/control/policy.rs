//! Condition→action rules.
//!
//! One rule per line:
//! `[name:] when <field> <op> <value> [and <field> <op> <value>]... then <action> priority <n>`
//!
//! Fields: `kind`, `sev` (or `severity`), `scope`, `tick`, `link.<stat>`,
//! and any other name is looked up among the event attributes (an
//! `attr.` prefix is accepted). Operators: `== != < <= > >=`. Numbers
//! compare numerically, severities by rank, other strings only with `==`
//! and `!=`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::mgmt::{Event, Severity};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "==" | "=" => Op::Eq,
            "!=" => Op::Ne,
            "<" => Op::Lt,
            "<=" => Op::Le,
            ">" => Op::Gt,
            ">=" => Op::Ge,
            _ => return invalid(format!("unknown operator `{s}`")),
        })
    }
}

impl Op {
    fn as_str(self) -> &'static str {
        match self {
            Op::Eq => "==",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
        }
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Op::Eq => ord == Equal,
            Op::Ne => ord != Equal,
            Op::Lt => ord == Less,
            Op::Le => ord != Greater,
            Op::Gt => ord == Greater,
            Op::Ge => ord != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub field: String,
    pub op: Op,
    pub value: String,
}

impl Condition {
    /// Side-effect free. A field the event does not carry never matches.
    pub fn holds(&self, event: &Event, link_stats: Option<&BTreeMap<String, f64>>) -> bool {
        let actual = match self.field.as_str() {
            "kind" => event.kind.as_str().to_string(),
            "sev" | "severity" => {
                let Ok(want) = self.value.parse::<Severity>() else {
                    return false;
                };
                return self.op.holds(event.severity.rank().cmp(&want.rank()));
            }
            "scope" => event.scope.to_string(),
            "tick" => event.tick.to_string(),
            f => {
                if let Some(stat) = f.strip_prefix("link.") {
                    match link_stats.and_then(|s| s.get(stat)) {
                        Some(v) => v.to_string(),
                        None => return false,
                    }
                } else {
                    let key = f.strip_prefix("attr.").unwrap_or(f);
                    match event.attributes.get(key) {
                        Some(v) => v.clone(),
                        None => return false,
                    }
                }
            }
        };
        match (actual.parse::<f64>(), self.value.parse::<f64>()) {
            (Ok(a), Ok(b)) => a.partial_cmp(&b).is_some_and(|o| self.op.holds(o)),
            _ => match self.op {
                Op::Eq => actual.eq_ignore_ascii_case(&self.value),
                Op::Ne => !actual.eq_ignore_ascii_case(&self.value),
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    TriggerQkdSession,
    RefreshCircuitKeys,
    MarkLinkDown,
    RaiseAlert,
    SetParam { name: String, value: String },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::TriggerQkdSession => f.write_str("trigger_qkd_session"),
            Action::RefreshCircuitKeys => f.write_str("refresh_circuit_keys"),
            Action::MarkLinkDown => f.write_str("mark_link_down"),
            Action::RaiseAlert => f.write_str("raise_alert"),
            Action::SetParam { name, value } => write!(f, "set_param {name} {value}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub name: String,
    pub conditions: Vec<Condition>,
    pub action: Action,
    pub priority: i64,
}

impl Policy {
    /// Parses one rule line. Unnamed rules are called `policy<priority>`.
    pub fn parse(line: &str) -> Result<Policy> {
        let (name, body) = match line.split_once(':') {
            Some((n, rest)) if !n.trim().is_empty() && !n.trim().contains(char::is_whitespace) => {
                (Some(n.trim().to_string()), rest)
            }
            _ => (None, line),
        };
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.first() != Some(&"when") {
            return invalid("policy must start with `when`");
        }
        let then = toks
            .iter()
            .position(|t| *t == "then")
            .ok_or_else(|| Error::InvalidInput("policy lacks `then`".into()))?;
        let mut conditions = Vec::new();
        for clause in toks[1..then].split(|t| *t == "and") {
            match clause {
                [field, op, value] => conditions.push(Condition {
                    field: field.to_string(),
                    op: op.parse()?,
                    value: value.to_string(),
                }),
                _ => return invalid(format!("bad condition `{}`", clause.join(" "))),
            }
        }
        let rest = &toks[then + 1..];
        let prio = rest
            .iter()
            .position(|t| *t == "priority")
            .ok_or_else(|| Error::InvalidInput("policy lacks `priority`".into()))?;
        let action = match &rest[..prio] {
            ["trigger_qkd_session"] => Action::TriggerQkdSession,
            ["refresh_circuit_keys"] => Action::RefreshCircuitKeys,
            ["mark_link_down"] => Action::MarkLinkDown,
            ["raise_alert"] => Action::RaiseAlert,
            ["set_param", name, value] => Action::SetParam {
                name: name.to_string(),
                value: value.to_string(),
            },
            other => return invalid(format!("unknown action `{}`", other.join(" "))),
        };
        let priority: i64 = match &rest[prio + 1..] {
            [n] => n
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad priority `{n}`")))?,
            _ => return invalid("`priority` takes exactly one integer"),
        };
        Ok(Policy {
            name: name.unwrap_or_else(|| format!("policy{priority}")),
            conditions,
            action,
            priority,
        })
    }

    pub fn matches(&self, event: &Event, link_stats: Option<&BTreeMap<String, f64>>) -> bool {
        self.conditions.iter().all(|c| c.holds(event, link_stats))
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: when ", self.name)?;
        for (i, c) in self.conditions.iter().enumerate() {
            if i > 0 {
                f.write_str(" and ")?;
            }
            write!(f, "{} {} {}", c.field, c.op.as_str(), c.value)?;
        }
        write!(f, " then {} priority {}", self.action, self.priority)
    }
}

/// Policies ordered by ascending priority value; lower fires first.
#[derive(Debug, Clone, Default)]
pub struct PolicyRegistry {
    policies: Vec<Policy>,
}

impl PolicyRegistry {
    pub fn new() -> Self {
        PolicyRegistry::default()
    }

    pub fn add(&mut self, policy: Policy) -> Result<()> {
        if self.policies.iter().any(|p| p.priority == policy.priority) {
            return invalid(format!("priority {} already in use", policy.priority));
        }
        let at = self.policies.partition_point(|p| p.priority < policy.priority);
        self.policies.insert(at, policy);
        Ok(())
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn matching(&self, event: &Event, link_stats: Option<&BTreeMap<String, f64>>) -> Vec<&Policy> {
        self.policies.iter().filter(|p| p.matches(event, link_stats)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgmt::{EventKind, Scope};

    fn qber_high(q: f64) -> Event {
        Event::new(7, Scope::Link(2), EventKind::QberHigh, Severity::Warning).with("qber", q)
    }

    #[test]
    fn parses_and_prints() {
        let p = Policy::parse("spike: when kind == QBER_HIGH and qber > 0.2 then refresh_circuit_keys priority 3").unwrap();
        assert_eq!(p.name, "spike");
        assert_eq!(p.conditions.len(), 2);
        assert_eq!(p.action, Action::RefreshCircuitKeys);
        assert_eq!(Policy::parse(&p.to_string()).unwrap(), p);
        let q = Policy::parse("when sev >= warning then set_param qber_high 0.2 priority -1").unwrap();
        assert_eq!(q.name, "policy-1");
        assert!(matches!(q.action, Action::SetParam { .. }));
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "kind == X then raise_alert priority 1",
            "when kind == then raise_alert priority 1",
            "when kind ~ X then raise_alert priority 1",
            "when kind == X then explode priority 1",
            "when kind == X then raise_alert",
            "when kind == X then raise_alert priority high",
        ] {
            assert!(Policy::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn conditions_compare_by_type() {
        let e = qber_high(0.27);
        let hold = |s: &str| Policy::parse(&format!("when {s} then raise_alert priority 1")).unwrap().matches(&e, None);
        assert!(hold("kind == QBER_HIGH"));
        assert!(hold("qber > 0.11"));
        assert!(!hold("qber < 0.11"));
        assert!(hold("sev >= warning"));
        assert!(!hold("sev == critical"));
        assert!(hold("scope == link:2"));
        assert!(hold("tick <= 7"));
        assert!(!hold("missing == 1"));
        assert!(!hold("link.qber > 0"));
        let stats = BTreeMap::from([("pool_bytes".to_string(), 10.0)]);
        let p = Policy::parse("when link.pool_bytes < 64 then trigger_qkd_session priority 1").unwrap();
        assert!(p.matches(&e, Some(&stats)));
    }

    #[test]
    fn registry_orders_by_priority() {
        let mut r = PolicyRegistry::new();
        r.add(Policy::parse("b: when kind == QBER_HIGH then raise_alert priority 2").unwrap()).unwrap();
        r.add(Policy::parse("a: when kind == QBER_HIGH then refresh_circuit_keys priority 1").unwrap()).unwrap();
        r.add(Policy::parse("c: when kind == LINK_DOWN then raise_alert priority 0").unwrap()).unwrap();
        assert!(r.add(Policy::parse("d: when kind == DESYNC then raise_alert priority 2").unwrap()).is_err());
        let names: Vec<_> = r.matching(&qber_high(0.3), None).iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, ["a", "b"]);
        assert!(r.matching(&Event::new(0, Scope::Network, EventKind::Desync, Severity::Info), None).is_empty());
    }
}
