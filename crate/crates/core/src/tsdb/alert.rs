//! Threshold alert rules evaluated per stored point.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::point::DataPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predicate {
    Gt(f64),
    Lt(f64),
    Outside(f64, f64),
}

impl Predicate {
    pub fn violated_by(&self, v: f64) -> bool {
        match *self {
            Predicate::Gt(x) => v > x,
            Predicate::Lt(x) => v < x,
            Predicate::Outside(lo, hi) => v < lo || v > hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sink {
    #[default]
    Log,
    /// `http://host[:port]/path`; events are POSTed as JSON, failures logged.
    Webhook(String),
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub id: String,
    pub field: String,
    pub predicate: Predicate,
    #[serde(default = "one")]
    pub for_consecutive: u32,
    #[serde(default)]
    pub sink: Sink,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("rule {0}: outside(lo, hi) needs lo < hi")]
    BadBounds(String),
    #[error("rule {0}: for_consecutive must be at least 1")]
    BadCount(String),
    #[error("rule {0}: threshold must be finite")]
    NonFinite(String),
    #[error("duplicate rule id {0}")]
    DuplicateId(String),
}

pub fn validate_rules(rules: &[AlertRule]) -> Result<(), RuleError> {
    let mut ids = std::collections::HashSet::new();
    for r in rules {
        if !ids.insert(&r.id) {
            return Err(RuleError::DuplicateId(r.id.clone()));
        }
        if r.for_consecutive == 0 {
            return Err(RuleError::BadCount(r.id.clone()));
        }
        match r.predicate {
            Predicate::Gt(x) | Predicate::Lt(x) if !x.is_finite() => return Err(RuleError::NonFinite(r.id.clone())),
            Predicate::Outside(lo, hi) if !lo.is_finite() || !hi.is_finite() => {
                return Err(RuleError::NonFinite(r.id.clone()))
            }
            Predicate::Outside(lo, hi) if lo >= hi => return Err(RuleError::BadBounds(r.id.clone())),
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub rule: String,
    pub ts_ns: u64,
    pub field: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counter {
    consecutive: u32,
    fired: bool,
}

/// Per-rule consecutive-violation counters, parallel to the rule list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleState {
    counters: Vec<Counter>,
}

impl RuleState {
    pub fn new(rules: &[AlertRule]) -> Self {
        RuleState {
            counters: vec![Counter::default(); rules.len()],
        }
    }
}

/// Advance every rule whose field the point carries. A rule fires once when
/// its counter reaches `for_consecutive` and re-arms after a non-violating
/// value.
pub fn eval_alerts(rules: &[AlertRule], point: &DataPoint, state: &mut RuleState) -> Vec<AlertEvent> {
    if state.counters.len() != rules.len() {
        state.counters.resize(rules.len(), Counter::default());
    }
    let mut events = Vec::new();
    for (rule, c) in rules.iter().zip(state.counters.iter_mut()) {
        let Some(&value) = point.fields.get(&rule.field) else {
            continue;
        };
        if rule.predicate.violated_by(value) {
            c.consecutive = c.consecutive.saturating_add(1);
            if c.consecutive >= rule.for_consecutive && !c.fired {
                c.fired = true;
                events.push(AlertEvent {
                    rule: rule.id.clone(),
                    ts_ns: point.ts_ns,
                    field: rule.field.clone(),
                    value,
                });
            }
        } else {
            *c = Counter::default();
        }
    }
    events
}

/// Appends events as JSON lines and forwards webhook rules.
pub struct AlertSink {
    log: Option<File>,
}

impl AlertSink {
    pub fn open(path: Option<&Path>) -> io::Result<Self> {
        let log = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p)?)
            }
            None => None,
        };
        Ok(AlertSink { log })
    }

    pub fn emit(&mut self, rule: &AlertRule, event: &AlertEvent) {
        let line = serde_json::to_string(event).expect("events serialize");
        info!(rule = %event.rule, value = event.value, "alert");
        if let Some(f) = &mut self.log {
            if let Err(e) = writeln!(f, "{line}") {
                warn!(error = %e, "alert log write failed");
            }
        }
        if let Sink::Webhook(url) = &rule.sink {
            let url = url.clone();
            std::thread::spawn(move || {
                if let Err(e) = post_json(&url, &line) {
                    warn!(%url, error = %e, "webhook delivery failed");
                }
            });
        }
    }
}

fn post_json(url: &str, body: &str) -> io::Result<()> {
    let parsed = url::Url::parse(url).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    if parsed.scheme() != "http" {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "only http:// webhooks"));
    }
    let host = parsed
        .host_str()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no host"))?;
    let port = parsed.port_or_known_default().unwrap_or(80);
    let mut sock = TcpStream::connect((host, port))?;
    sock.set_write_timeout(Some(Duration::from_secs(5)))?;
    write!(
        sock,
        "POST {} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        parsed.path(),
        body.len()
    )?;
    sock.flush()
}
