//! Management plane: events, their line-oriented log, suppression,
//! queries and edge-triggered thresholds.
//!
//! A log line is
//! `tick=<n> scope=<s> kind=<k> sev=<v> <attr>=<val>...` with attributes in
//! ascending key order. A closed suppression window writes
//! `tick=<n> scope=<s> kind=SUPPRESSED sev=info count=<c> event=<KIND> window_start=<t>`.

mod filter;
mod threshold;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{invalid, Error, Result};

pub use filter::Filter;
pub use threshold::{LinkObservation, ThresholdWatcher, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    QberHigh,
    KeyPoolLow,
    LinkDown,
    DeliveryFailed,
    Desync,
    SessionAborted,
    EpochRolled,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::QberHigh,
        EventKind::KeyPoolLow,
        EventKind::LinkDown,
        EventKind::DeliveryFailed,
        EventKind::Desync,
        EventKind::SessionAborted,
        EventKind::EpochRolled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::QberHigh => "QBER_HIGH",
            EventKind::KeyPoolLow => "KEY_POOL_LOW",
            EventKind::LinkDown => "LINK_DOWN",
            EventKind::DeliveryFailed => "DELIVERY_FAILED",
            EventKind::Desync => "DESYNC",
            EventKind::SessionAborted => "SESSION_ABORTED",
            EventKind::EpochRolled => "EPOCH_ROLLED",
        }
    }

    /// Attributes an event of this kind must carry.
    pub fn required_attributes(self) -> &'static [&'static str] {
        match self {
            EventKind::QberHigh => &["qber"],
            EventKind::KeyPoolLow => &["available"],
            EventKind::DeliveryFailed => &["circuit", "sequence_id"],
            EventKind::Desync => &["circuit"],
            EventKind::SessionAborted => &["status"],
            EventKind::EpochRolled => &["circuit", "epoch"],
            EventKind::LinkDown => &[],
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown event kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Critical => "critical",
        }
    }

    pub fn rank(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "info" => Ok(Severity::Info),
            "warning" | "warn" => Ok(Severity::Warning),
            "critical" | "crit" => Ok(Severity::Critical),
            _ => invalid(format!("unknown severity `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Link(u32),
    Path(u64),
    Network,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Link(id) => write!(f, "link:{id}"),
            Scope::Path(id) => write!(f, "path:{id}"),
            Scope::Network => f.write_str("network"),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad scope `{s}`"));
        if s == "network" {
            return Ok(Scope::Network);
        }
        match s.split_once(':') {
            Some(("link", id)) => id.parse().map(Scope::Link).map_err(|_| bad()),
            Some(("path", id)) => id.parse().map(Scope::Path).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub tick: u64,
    pub scope: Scope,
    pub kind: EventKind,
    pub severity: Severity,
    pub attributes: BTreeMap<String, String>,
}

impl Event {
    pub fn new(tick: u64, scope: Scope, kind: EventKind, severity: Severity) -> Self {
        Event {
            tick,
            scope,
            kind,
            severity,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.attributes.insert(key.to_string(), value.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        for key in self.kind.required_attributes() {
            if !self.attributes.contains_key(*key) {
                return invalid(format!("{} event lacks attribute `{key}`", self.kind));
            }
        }
        for (k, v) in &self.attributes {
            let clean = |s: &str| !s.is_empty() && !s.contains(char::is_whitespace) && !s.contains('=');
            if !clean(k) || v.contains(char::is_whitespace) {
                return invalid(format!("attribute `{k}={v}` cannot be logged"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tick={} scope={} kind={} sev={}",
            self.tick, self.scope, self.kind, self.severity
        )?;
        for (k, v) in &self.attributes {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// One stored line of the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogRecord {
    Event(Event),
    Suppressed {
        tick: u64,
        scope: Scope,
        kind: EventKind,
        count: u64,
        window_start: u64,
    },
}

impl LogRecord {
    pub fn tick(&self) -> u64 {
        match self {
            LogRecord::Event(e) => e.tick,
            LogRecord::Suppressed { tick, .. } => *tick,
        }
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Event(e) => e.fmt(f),
            LogRecord::Suppressed {
                tick,
                scope,
                kind,
                count,
                window_start,
            } => write!(
                f,
                "tick={tick} scope={scope} kind=SUPPRESSED sev=info count={count} event={kind} window_start={window_start}"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuppressionRule {
    pub kind: EventKind,
    pub window_ticks: u64,
    pub max_per_window: u64,
}

impl SuppressionRule {
    pub fn new(kind: EventKind, window_ticks: u64, max_per_window: u64) -> Result<Self> {
        if window_ticks == 0 || max_per_window == 0 {
            return invalid("suppression window and quota must be positive");
        }
        Ok(SuppressionRule {
            kind,
            window_ticks,
            max_per_window,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    start: u64,
    admitted: u64,
    suppressed: u64,
}

/// The event log with its suppression state and subscribers.
#[derive(Debug, Default)]
pub struct EventLog {
    records: Vec<LogRecord>,
    rules: BTreeMap<EventKind, SuppressionRule>,
    windows: BTreeMap<(EventKind, Scope), Window>,
    subscribers: Vec<Sender<Event>>,
    last_tick: u64,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    pub fn add_rule(&mut self, rule: SuppressionRule) {
        self.rules.insert(rule.kind, rule);
    }

    pub fn subscribe(&mut self) -> Receiver<Event> {
        let (tx, rx) = channel();
        self.subscribers.push(tx);
        rx
    }

    /// Runs suppression, appends and dispatches. Returns whether the event
    /// was admitted. Never fails: an invalid event is logged with an
    /// `invalid` attribute rather than dropped.
    pub fn emit(&mut self, mut event: Event) -> bool {
        if let Err(e) = event.validate() {
            event.attributes.retain(|k, v| !k.contains(char::is_whitespace) && !v.contains(char::is_whitespace));
            event
                .attributes
                .insert("invalid".into(), e.to_string().replace(char::is_whitespace, "_"));
        }
        // keep ticks non-decreasing even if a caller lags
        event.tick = event.tick.max(self.last_tick);
        self.close_windows(event.tick);
        if let Some(rule) = self.rules.get(&event.kind).copied() {
            let w = self.windows.entry((event.kind, event.scope)).or_insert(Window {
                start: event.tick,
                admitted: 0,
                suppressed: 0,
            });
            if w.admitted >= rule.max_per_window {
                w.suppressed += 1;
                return false;
            }
            w.admitted += 1;
        }
        self.last_tick = event.tick;
        self.subscribers.retain(|s| s.send(event.clone()).is_ok());
        self.records.push(LogRecord::Event(event));
        true
    }

    /// Closes windows that ended at or before `now`, writing summaries.
    pub fn close_windows(&mut self, now: u64) {
        let rules = &self.rules;
        let expired: Vec<(EventKind, Scope)> = self
            .windows
            .iter()
            .filter(|((kind, _), w)| now >= w.start + rules[kind].window_ticks)
            .map(|(k, _)| *k)
            .collect();
        for key in expired {
            let w = self.windows.remove(&key).expect("expired window");
            self.summarize(key, w, now);
        }
    }

    /// Closes every open window now.
    pub fn flush(&mut self) {
        let now = self.last_tick;
        for (key, w) in std::mem::take(&mut self.windows) {
            self.summarize(key, w, now);
        }
    }

    fn summarize(&mut self, (kind, scope): (EventKind, Scope), w: Window, now: u64) {
        if w.suppressed == 0 {
            return;
        }
        let tick = now.max(self.last_tick);
        self.last_tick = tick;
        self.records.push(LogRecord::Suppressed {
            tick,
            scope,
            kind,
            count: w.suppressed,
            window_start: w.start,
        });
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Event(e) => Some(e),
            LogRecord::Suppressed { .. } => None,
        })
    }

    pub fn query(&self, filter: &Filter) -> Vec<Event> {
        self.events().filter(|e| filter.matches(e)).cloned().collect()
    }

    /// Parses `filter` (see [`Filter::parse`]) and runs it.
    pub fn query_str(&self, filter: &str) -> Result<Vec<Event>> {
        Ok(self.query(&Filter::parse(filter)?))
    }

    /// The whole log, one record per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qber_event(tick: u64) -> Event {
        Event::new(tick, Scope::Link(1), EventKind::QberHigh, Severity::Warning).with("qber", 0.27)
    }

    #[test]
    fn line_format_sorts_attributes() {
        let e = Event::new(5, Scope::Path(2), EventKind::DeliveryFailed, Severity::Critical)
            .with("sequence_id", 9)
            .with("circuit", 4);
        assert_eq!(
            e.to_string(),
            "tick=5 scope=path:2 kind=DELIVERY_FAILED sev=critical circuit=4 sequence_id=9"
        );
    }

    #[test]
    fn suppression_counts_and_summarizes() {
        let mut log = EventLog::new();
        log.add_rule(SuppressionRule::new(EventKind::QberHigh, 10, 3).unwrap());
        let admitted = (0..100).filter(|_| log.emit(qber_event(4))).count();
        assert_eq!(admitted, 3);
        log.flush();
        assert_eq!(log.events().count(), 3);
        let last = log.records().last().unwrap().to_string();
        assert_eq!(
            last,
            "tick=4 scope=link:1 kind=SUPPRESSED sev=info count=97 event=QBER_HIGH window_start=4"
        );
    }

    #[test]
    fn new_window_admits_first_event() {
        let mut log = EventLog::new();
        log.add_rule(SuppressionRule::new(EventKind::QberHigh, 5, 1).unwrap());
        assert!(log.emit(qber_event(0)));
        assert!(!log.emit(qber_event(4)));
        assert!(log.emit(qber_event(5)));
        assert_eq!(log.records().len(), 3);
        assert!(matches!(log.records()[1], LogRecord::Suppressed { count: 1, .. }));
    }

    #[test]
    fn subscribers_see_admitted_events() {
        let mut log = EventLog::new();
        let rx = log.subscribe();
        log.emit(qber_event(1));
        assert_eq!(rx.try_recv().unwrap().tick, 1);
    }

    #[test]
    fn missing_required_attribute_is_flagged_not_dropped() {
        let mut log = EventLog::new();
        log.emit(Event::new(1, Scope::Network, EventKind::QberHigh, Severity::Info));
        let e = log.events().next().unwrap();
        assert!(e.attributes.contains_key("invalid"));
    }

    #[test]
    fn scope_and_kind_parse() {
        assert_eq!("link:3".parse::<Scope>().unwrap(), Scope::Link(3));
        assert_eq!("network".parse::<Scope>().unwrap(), Scope::Network);
        assert!("link:x".parse::<Scope>().is_err());
        assert_eq!("key_pool_low".parse::<EventKind>().unwrap(), EventKind::KeyPoolLow);
    }
}
