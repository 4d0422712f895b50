//! MQTT telemetry subscriber: payload → point → store, with alerting.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, info, warn};

use super::alert::{eval_alerts, validate_rules, AlertEvent, AlertRule, AlertSink, RuleError, RuleState};
use super::point::DataPoint;
use super::store::{Store, StoreError, TELEMETRY_MEASUREMENT};
use crate::channel::ChannelId;
use crate::mqtt::{ClientConfig, ClientEvent, NetError, QoS, TcpClient};

pub const TELEMETRY_FILTER: &str = "hive/+/telemetry";
pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TelemetryError {
    #[error("bad schema: {0}")]
    BadSchema(String),
    #[error("bad value: {0}")]
    BadValue(String),
}

fn schema(msg: impl Into<String>) -> TelemetryError {
    TelemetryError::BadSchema(msg.into())
}

fn get_u64(obj: &serde_json::Map<String, Value>, key: &str) -> Result<u64, TelemetryError> {
    obj.get(key)
        .ok_or_else(|| schema(format!("missing `{key}`")))?
        .as_u64()
        .ok_or_else(|| schema(format!("`{key}` must be a non-negative integer")))
}

fn finite(name: &str, v: &Value) -> Result<f64, TelemetryError> {
    let x = v.as_f64().ok_or_else(|| schema(format!("`{name}` must be a number")))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TelemetryError::BadValue(name.to_owned()))
    }
}

/// Map one gateway telemetry message to a single point in the telemetry
/// measurement. Channels with `n == 0` contribute no fields.
pub fn parse_telemetry(payload: &[u8]) -> Result<DataPoint, TelemetryError> {
    let root: Value = serde_json::from_slice(payload).map_err(|e| schema(e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| schema("payload is not an object"))?;
    let version = get_u64(obj, "schema")?;
    if version != SCHEMA_VERSION {
        return Err(schema(format!("unsupported schema version {version}")));
    }
    let hive_id = obj
        .get("hive_id")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema("missing `hive_id`"))?;
    let seq = get_u64(obj, "seq")?;
    let ts = get_u64(obj, "ts")?;
    get_u64(obj, "window_s")?;
    let ts_ns = ts
        .checked_mul(1_000_000_000)
        .ok_or_else(|| TelemetryError::BadValue("ts".into()))?;
    let channels = obj
        .get("channels")
        .and_then(Value::as_object)
        .ok_or_else(|| schema("missing `channels`"))?;

    let mut point = DataPoint::new(TELEMETRY_MEASUREMENT, ts_ns)
        .tag("hive_id", hive_id)
        .field("seq", seq as f64);
    for (name, stats) in channels {
        let id: ChannelId = name.parse().map_err(|_| schema(format!("unknown channel `{name}`")))?;
        let stats = stats
            .as_object()
            .ok_or_else(|| schema(format!("channel `{name}` is not an object")))?;
        let n = get_u64(stats, "n")?;
        if n == 0 {
            continue;
        }
        for (suffix, key) in [("", "avg"), ("_min", "min"), ("_max", "max")] {
            let v = stats
                .get(key)
                .ok_or_else(|| schema(format!("channel `{name}` missing `{key}`")))?;
            point = point.field(format!("{}{suffix}", id.as_str()), finite(&format!("{name}.{key}"), v)?);
        }
        point = point.field(format!("{}_n", id.as_str()), n as f64);
    }
    Ok(point)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestCounters {
    pub received: u64,
    pub stored: u64,
    pub deduplicated: u64,
    pub rejected: u64,
    pub storage_errors: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Stored,
    Duplicate,
    Rejected,
    StorageFailed,
}

impl IngestOutcome {
    /// Whether the message may be acknowledged. Unstored messages stay
    /// unacked so the broker redelivers them.
    pub fn ack(self) -> bool {
        self != IngestOutcome::StorageFailed
    }
}

pub struct Ingestor {
    store: Store,
    rules: Vec<AlertRule>,
    rule_state: RuleState,
    sink: Option<AlertSink>,
    counters: IngestCounters,
    events: Vec<AlertEvent>,
}

impl Ingestor {
    pub fn new(store: Store, rules: Vec<AlertRule>, sink: Option<AlertSink>) -> Result<Self, RuleError> {
        validate_rules(&rules)?;
        Ok(Ingestor {
            rule_state: RuleState::new(&rules),
            store,
            rules,
            sink,
            counters: IngestCounters::default(),
            events: Vec::new(),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn counters(&self) -> IngestCounters {
        self.counters
    }

    pub fn alert_events(&self) -> &[AlertEvent] {
        &self.events
    }

    pub fn ingest(&mut self, payload: &[u8]) -> IngestOutcome {
        self.counters.received += 1;
        let point = match parse_telemetry(payload) {
            Ok(p) => p,
            Err(e) => {
                warn!(error = %e, "rejecting telemetry");
                self.counters.rejected += 1;
                return IngestOutcome::Rejected;
            }
        };
        match self.store.write_points(std::slice::from_ref(&point)) {
            Ok(c) if c.written == 1 => {
                self.counters.stored += 1;
                for ev in eval_alerts(&self.rules, &point, &mut self.rule_state) {
                    if let Some(sink) = &mut self.sink {
                        let rule = self.rules.iter().find(|r| r.id == ev.rule).expect("event names a rule");
                        sink.emit(rule, &ev);
                    }
                    self.events.push(ev);
                }
                IngestOutcome::Stored
            }
            Ok(_) => {
                self.counters.deduplicated += 1;
                IngestOutcome::Duplicate
            }
            Err(StoreError::Point(e)) => {
                warn!(error = %e, "rejecting unencodable point");
                self.counters.rejected += 1;
                IngestOutcome::Rejected
            }
            Err(e) => {
                warn!(error = %e, "store write failed");
                self.counters.storage_errors += 1;
                IngestOutcome::StorageFailed
            }
        }
    }
}

fn default_broker() -> String {
    format!("127.0.0.1:{}", crate::mqtt::DEFAULT_PORT)
}

fn default_client_id() -> String {
    "hive-ingest".into()
}

fn default_keep_alive() -> u16 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    #[serde(default = "default_broker")]
    pub broker: String,
    #[serde(default = "default_client_id")]
    pub client_id: String,
    #[serde(default = "default_keep_alive")]
    pub keep_alive_s: u16,
    pub store_dir: PathBuf,
    #[serde(default)]
    pub alert_log: Option<PathBuf>,
    #[serde(default)]
    pub rules: Vec<AlertRule>,
}

impl IngestConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        IngestConfig {
            broker: default_broker(),
            client_id: default_client_id(),
            keep_alive_s: default_keep_alive(),
            store_dir: store_dir.into(),
            alert_log: None,
            rules: Vec::new(),
        }
    }

    pub fn client_config(&self) -> ClientConfig {
        let mut c = ClientConfig::new(self.client_id.clone());
        c.keep_alive_s = self.keep_alive_s;
        c.clean_session = false;
        c.manual_ack = true;
        c
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error("alert log: {0}")]
    AlertLog(std::io::Error),
    #[error("subscription to {TELEMETRY_FILTER} refused")]
    SubscriptionRefused,
    #[error(transparent)]
    Net(#[from] NetError),
}

pub fn open_ingestor(cfg: &IngestConfig) -> Result<Ingestor, IngestError> {
    let store = Store::open(&cfg.store_dir)?;
    let sink = AlertSink::open(cfg.alert_log.as_deref()).map_err(IngestError::AlertLog)?;
    Ok(Ingestor::new(store, cfg.rules.clone(), Some(sink))?)
}

fn session(cfg: &IngestConfig) -> Result<TcpClient, IngestError> {
    let mut client = TcpClient::connect(cfg.broker.as_str(), cfg.client_config(), Duration::from_secs(5))?;
    let granted = client.subscribe(
        vec![(TELEMETRY_FILTER.into(), QoS::AtLeastOnce)],
        Duration::from_secs(5),
    )?;
    if granted.contains(&crate::mqtt::SubAckReturn::Failure) {
        return Err(IngestError::SubscriptionRefused);
    }
    info!(broker = %cfg.broker, "subscribed to {TELEMETRY_FILTER}");
    Ok(client)
}

/// Subscribe and store until `stop` is set, reconnecting on connection
/// loss. Returns the final ingestor so callers can inspect the store.
pub fn run_subscriber(cfg: &IngestConfig, mut ingestor: Ingestor, stop: &AtomicBool) -> Result<Ingestor, IngestError> {
    let mut client: Option<TcpClient> = None;
    let mut delay = Duration::from_millis(100);
    while !stop.load(Ordering::Relaxed) {
        let c = match &mut client {
            Some(c) => c,
            None => match session(cfg) {
                Ok(c) => {
                    delay = Duration::from_millis(100);
                    client.insert(c)
                }
                Err(IngestError::Net(e)) => {
                    debug!(error = %e, "broker unavailable, retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(Duration::from_secs(10));
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        match pump(c, &mut ingestor) {
            Ok(()) => {}
            Err(e) => {
                warn!(error = %e, "connection lost");
                client = None;
            }
        }
    }
    if let Some(c) = client {
        let _ = c.disconnect();
    }
    Ok(ingestor)
}

fn pump(client: &mut TcpClient, ingestor: &mut Ingestor) -> Result<(), NetError> {
    for ev in client.poll(Duration::from_millis(50))? {
        if let ClientEvent::Message(p) = ev {
            let outcome = ingestor.ingest(&p.payload);
            if let (Some(id), true) = (p.packet_id, outcome.ack()) {
                client.ack(id)?;
            }
        }
    }
    Ok(())
}
