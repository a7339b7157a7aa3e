use std::collections::BTreeMap;

use super::{Event, EventKind, Scope, Severity};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// QBER strictly above this is high.
    pub qber_high: f64,
    /// Fewer available pool bytes than this is low.
    pub pool_low_bytes: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            qber_high: 0.11,
            pool_low_bytes: 256,
        }
    }
}

/// What the watcher looks at for one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkObservation {
    pub link: u32,
    pub qber: Option<f64>,
    pub pool_available: usize,
}

#[derive(Debug, Clone, Copy)]
struct Armed {
    qber_high: bool,
    pool_low: bool,
}

/// Edge-triggered: one event when a condition starts to hold, none while
/// it keeps holding, and re-armed once it stops.
#[derive(Debug, Clone, Default)]
pub struct ThresholdWatcher {
    state: BTreeMap<u32, Armed>,
}

impl ThresholdWatcher {
    pub fn new() -> Self {
        ThresholdWatcher::default()
    }

    /// First sight of a link records its state without emitting, so an
    /// empty pool at startup is not a crossing.
    pub fn prime(&mut self, obs: &LinkObservation, th: &Thresholds) {
        self.state.insert(
            obs.link,
            Armed {
                qber_high: obs.qber.is_some_and(|q| q > th.qber_high),
                pool_low: obs.pool_available < th.pool_low_bytes,
            },
        );
    }

    pub fn observe(&mut self, now: u64, obs: &LinkObservation, th: &Thresholds) -> Vec<Event> {
        if !self.state.contains_key(&obs.link) {
            self.prime(obs, th);
            return Vec::new();
        }
        let st = self.state.get_mut(&obs.link).expect("primed");
        let mut out = Vec::new();
        let high = obs.qber.is_some_and(|q| q > th.qber_high);
        if high && !st.qber_high {
            out.push(
                Event::new(now, Scope::Link(obs.link), EventKind::QberHigh, Severity::Warning)
                    .with("qber", format!("{:.4}", obs.qber.unwrap_or_default()))
                    .with("threshold", th.qber_high),
            );
        }
        st.qber_high = high;
        let low = obs.pool_available < th.pool_low_bytes;
        if low && !st.pool_low {
            out.push(
                Event::new(now, Scope::Link(obs.link), EventKind::KeyPoolLow, Severity::Warning)
                    .with("available", obs.pool_available)
                    .with("threshold", th.pool_low_bytes),
            );
        }
        st.pool_low = low;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(qber: f64, pool: usize) -> LinkObservation {
        LinkObservation {
            link: 0,
            qber: Some(qber),
            pool_available: pool,
        }
    }

    #[test]
    fn one_event_per_crossing() {
        let th = Thresholds::default();
        let mut w = ThresholdWatcher::new();
        w.prime(&obs(0.05, 1000), &th);
        let mut events = w.observe(1, &obs(0.15, 1000), &th);
        for t in 2..102 {
            events.extend(w.observe(t, &obs(0.2, 1000), &th));
        }
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, EventKind::QberHigh);
        assert!(w.observe(103, &obs(0.01, 1000), &th).is_empty());
        assert_eq!(w.observe(104, &obs(0.3, 1000), &th).len(), 1);
    }

    #[test]
    fn pool_drain_crossing() {
        let th = Thresholds::default();
        let mut w = ThresholdWatcher::new();
        assert!(w.observe(0, &obs(0.0, 0), &th).is_empty());
        assert!(w.observe(1, &obs(0.0, 4000), &th).is_empty());
        let e = w.observe(2, &obs(0.0, 100), &th);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].attributes["available"], "100");
        assert!(w.observe(3, &obs(0.0, 10), &th).is_empty());
    }
}
