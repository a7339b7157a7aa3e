use super::{Event, EventKind, Scope, Severity};
use crate::error::{Error, Result};

/// Conjunction of optional constraints. Tick bounds are inclusive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    pub kind: Option<EventKind>,
    pub severity: Option<Severity>,
    pub scope: Option<Scope>,
    pub from_tick: Option<u64>,
    pub to_tick: Option<u64>,
}

impl Filter {
    /// Parses whitespace-separated `key=value` terms with keys `kind`,
    /// `sev` (or `severity`), `scope`, `from`, `to`. The empty string
    /// matches everything.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidFilter(msg);
        let mut f = Filter::default();
        for term in text.split_whitespace() {
            let (key, value) = term
                .split_once('=')
                .ok_or_else(|| bad(format!("term `{term}` is not key=value")))?;
            let dup = || bad(format!("`{key}` given twice"));
            match key {
                "kind" => {
                    let k = value.parse().map_err(|_| bad(format!("unknown kind `{value}`")))?;
                    f.kind.replace(k).map_or(Ok(()), |_| Err(dup()))?;
                }
                "sev" | "severity" => {
                    let s = value.parse().map_err(|_| bad(format!("unknown severity `{value}`")))?;
                    f.severity.replace(s).map_or(Ok(()), |_| Err(dup()))?;
                }
                "scope" => {
                    let s = value.parse().map_err(|_| bad(format!("bad scope `{value}`")))?;
                    f.scope.replace(s).map_or(Ok(()), |_| Err(dup()))?;
                }
                "from" | "to" => {
                    let t: u64 = value.parse().map_err(|_| bad(format!("bad tick `{value}`")))?;
                    let slot = if key == "from" { &mut f.from_tick } else { &mut f.to_tick };
                    slot.replace(t).map_or(Ok(()), |_| Err(dup()))?;
                }
                _ => return Err(bad(format!("unknown filter key `{key}`"))),
            }
        }
        if let (Some(a), Some(b)) = (f.from_tick, f.to_tick) {
            if a > b {
                return Err(bad(format!("empty tick range {a}..={b}")));
            }
        }
        Ok(f)
    }

    pub fn matches(&self, e: &Event) -> bool {
        self.kind.is_none_or(|k| k == e.kind)
            && self.severity.is_none_or(|s| s == e.severity)
            && self.scope.is_none_or(|s| s == e.scope)
            && self.from_tick.is_none_or(|t| e.tick >= t)
            && self.to_tick.is_none_or(|t| e.tick <= t)
    }
}
