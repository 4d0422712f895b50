//! Publishing gateway: polls the hub on a schedule, spools each telemetry
//! message durably, then forwards the spool over MQTT at QoS 1.

mod daemon;
mod spool;

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::channel::{ChannelId, ChannelStats};
use crate::clock::Clock;
use crate::hub::{Command, HubReport, Response};
use crate::mqtt::{
    validate_topic, ClientConfig, ClientEvent, ClientSession, KeepAliveAction, LastWill, MemStream, PacketStream, QoS,
    StreamError,
};
use crate::serial::{request_report, LinkConfig, LinkError, SerialLink};

pub use daemon::{open_serial, run_daemon};
pub use spool::Spool;

pub const SCHEMA_VERSION: u32 = 1;
pub const BACKOFF_BASE_MS: u64 = 1_000;
pub const BACKOFF_CAP_MS: u64 = 60_000;

/// The JSON payload published per acquisition window. Field order is the
/// wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub schema: u32,
    pub hive_id: String,
    pub seq: u64,
    pub ts: u64,
    pub window_s: u64,
    pub channels: BTreeMap<ChannelId, ChannelStats>,
}

impl TelemetryMessage {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("telemetry serializes")
    }
}

pub fn build_telemetry(report: &HubReport, hive_id: &str, seq: u64, ts: u64) -> TelemetryMessage {
    TelemetryMessage {
        schema: SCHEMA_VERSION,
        hive_id: hive_id.to_owned(),
        seq,
        ts,
        window_s: report.window_ticks,
        channels: report.channels.clone(),
    }
}

fn default_interval() -> u64 {
    900
}
fn default_broker() -> String {
    format!("127.0.0.1:{}", crate::mqtt::DEFAULT_PORT)
}
fn default_prefix() -> String {
    "hive".into()
}
fn default_keep_alive() -> u16 {
    60
}
fn default_capacity() -> usize {
    10_000
}
fn default_ack_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub hive_id: String,
    #[serde(default = "default_interval")]
    pub interval_s: u64,
    #[serde(default = "default_broker")]
    pub broker: String,
    #[serde(default = "default_prefix")]
    pub topic_prefix: String,
    #[serde(default = "default_keep_alive")]
    pub keep_alive_s: u16,
    pub spool_dir: PathBuf,
    #[serde(default = "default_capacity")]
    pub spool_capacity: usize,
    #[serde(default)]
    pub link: LinkConfig,
    /// Serial endpoint for the daemon: a device path or `tcp://host:port`.
    #[serde(default)]
    pub serial: Option<String>,
    /// Unacknowledged publish age that forces a reconnect (and re-send).
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_s: u64,
    #[serde(default)]
    pub client_id: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("spool: {0}")]
    Spool(#[from] io::Error),
    #[error("serial: {0}")]
    Serial(#[from] LinkError),
}

impl GatewayConfig {
    pub fn new(hive_id: impl Into<String>, spool_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            hive_id: hive_id.into(),
            interval_s: default_interval(),
            broker: default_broker(),
            topic_prefix: default_prefix(),
            keep_alive_s: default_keep_alive(),
            spool_dir: spool_dir.into(),
            spool_capacity: default_capacity(),
            link: LinkConfig::default(),
            serial: None,
            ack_timeout_s: default_ack_timeout(),
            client_id: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_owned()));
        if self.hive_id.is_empty() || self.hive_id.contains(['/', '+', '#']) {
            return bad("hive_id must be a single non-empty topic level");
        }
        if validate_topic(&self.telemetry_topic()).is_err() {
            return bad("topic_prefix does not form a valid topic");
        }
        if self.interval_s == 0 {
            return bad("interval_s must be positive");
        }
        if self.spool_capacity == 0 {
            return bad("spool_capacity must be positive");
        }
        if self.ack_timeout_s == 0 {
            return bad("ack_timeout_s must be positive");
        }
        Ok(())
    }

    pub fn telemetry_topic(&self) -> String {
        format!("{}/{}/telemetry", self.topic_prefix, self.hive_id)
    }

    pub fn status_topic(&self) -> String {
        format!("{}/{}/status", self.topic_prefix, self.hive_id)
    }

    pub fn client_config(&self) -> ClientConfig {
        let mut c = ClientConfig::new(self.client_id.clone().unwrap_or_else(|| format!("gw-{}", self.hive_id)));
        c.keep_alive_s = self.keep_alive_s;
        c.clean_session = false;
        c.will = Some(LastWill {
            topic: self.status_topic(),
            payload: b"offline".to_vec(),
            qos: QoS::AtLeastOnce,
            retain: true,
        });
        c
    }
}

/// A byte stream the gateway can close explicitly.
pub trait Transport: Read + Write {
    fn close(&mut self) {}
}

impl Transport for TcpStream {
    fn close(&mut self) {
        let _ = self.shutdown(std::net::Shutdown::Both);
    }
}

impl Transport for MemStream {
    fn close(&mut self) {
        MemStream::close(self);
    }
}

/// Opens fresh broker connections.
pub trait Connector {
    type Stream: Transport;
    fn connect(&mut self) -> io::Result<Self::Stream>;
}

pub struct TcpConnector {
    addr: String,
    timeout: Duration,
}

impl TcpConnector {
    pub fn new(addr: impl Into<String>) -> Self {
        TcpConnector {
            addr: addr.into(),
            timeout: Duration::from_secs(2),
        }
    }
}

impl Connector for TcpConnector {
    type Stream = TcpStream;

    fn connect(&mut self) -> io::Result<TcpStream> {
        let addr = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "broker address resolves to nothing"))?;
        let s = TcpStream::connect_timeout(&addr, self.timeout)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(Duration::from_millis(1)))?;
        Ok(s)
    }
}

/// Exponential backoff with equal jitter: attempt `k` waits a uniform draw
/// from `[d/2, d]`, `d = min(cap, base·2^k)`.
#[derive(Debug, Clone)]
pub struct Backoff {
    attempt: u32,
    rng: ChaCha8Rng,
}

impl Backoff {
    pub fn new(seed: u64) -> Self {
        Backoff {
            attempt: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_delay_ms(&mut self) -> u64 {
        let d = BACKOFF_BASE_MS
            .saturating_mul(1 << self.attempt.min(16))
            .min(BACKOFF_CAP_MS);
        self.attempt = self.attempt.saturating_add(1);
        d / 2 + self.rng.random_range(0..=d / 2)
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GatewayEvent {
    MissedWindow { at_s: u64, reason: String },
    Drop { at_s: u64, seq: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayCounters {
    pub cycles: u64,
    pub missed_windows: u64,
    /// Unpublished messages found in the spool at startup.
    pub recovered: u64,
    pub appended: u64,
    pub published: u64,
    pub dropped: u64,
    pub connects: u64,
    pub connection_losses: u64,
}

impl GatewayCounters {
    /// `recovered + appended == published + in_spool + dropped`.
    pub fn conserved(&self, in_spool: usize) -> bool {
        self.recovered + self.appended == self.published + in_spool as u64 + self.dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleOutcome {
    Appended { seq: u64, attempts: u32 },
    Missed,
}

#[derive(Debug, Clone, Copy)]
struct Inflight {
    seq: u64,
    packet_id: u16,
    since_ms: u64,
}

enum StepError {
    Net(String),
    Io(io::Error),
}

impl From<StreamError> for StepError {
    fn from(e: StreamError) -> Self {
        StepError::Net(e.to_string())
    }
}

impl From<crate::mqtt::ClientError> for StepError {
    fn from(e: crate::mqtt::ClientError) -> Self {
        StepError::Net(e.to_string())
    }
}

impl From<io::Error> for StepError {
    fn from(e: io::Error) -> Self {
        StepError::Io(e)
    }
}

pub struct Gateway<C: Connector> {
    cfg: GatewayConfig,
    spool: Spool,
    connector: C,
    session: ClientSession,
    conn: Option<PacketStream<C::Stream>>,
    inflight: Option<Inflight>,
    backoff: Backoff,
    next_attempt_ms: u64,
    counters: GatewayCounters,
    events: Vec<GatewayEvent>,
}

impl<C: Connector> Gateway<C> {
    pub fn new(cfg: GatewayConfig, connector: C, jitter_seed: u64) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let spool = Spool::open(&cfg.spool_dir, cfg.spool_capacity)?;
        let counters = GatewayCounters {
            recovered: spool.len() as u64,
            ..GatewayCounters::default()
        };
        if !spool.is_empty() {
            info!(pending = spool.len(), next_seq = spool.next_seq(), "resuming spool");
        }
        Ok(Gateway {
            session: ClientSession::new(cfg.client_config()),
            cfg,
            spool,
            connector,
            conn: None,
            inflight: None,
            backoff: Backoff::new(jitter_seed),
            next_attempt_ms: 0,
            counters,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn spool(&self) -> &Spool {
        &self.spool
    }

    pub fn counters(&self) -> GatewayCounters {
        self.counters
    }

    pub fn events(&self) -> &[GatewayEvent] {
        &self.events
    }

    pub fn is_connected(&self) -> bool {
        self.session.is_connected()
    }

    /// Whether a call to [`poll`](Self::poll) at `now_ms` could make progress
    /// without new input.
    pub fn wants_poll(&self, now_ms: u64) -> bool {
        match &self.conn {
            None => now_ms >= self.next_attempt_ms,
            Some(_) => {
                self.session.has_outgoing()
                    || (self.session.is_connected() && self.inflight.is_none() && !self.spool.is_empty())
            }
        }
    }

    /// Earliest instant at which a reconnect will be attempted.
    pub fn next_attempt_ms(&self) -> Option<u64> {
        self.conn.is_none().then_some(self.next_attempt_ms)
    }

    /// GET a report, spool it, then try to publish.
    pub fn acquisition_cycle<L: SerialLink + ?Sized>(
        &mut self,
        link: &mut L,
        clock: &dyn Clock,
    ) -> Result<CycleOutcome, GatewayError> {
        self.counters.cycles += 1;
        let report = match request_report(link, &Command::Get, &self.cfg.link) {
            Ok(t) => match t.response {
                Response::Report(r) => Ok((r, t.attempts)),
                other => Err(format!("unexpected response {other:?}")),
            },
            Err(e @ LinkError::LinkClosed) => return Err(e.into()),
            Err(e) => Err(e.to_string()),
        };
        let at_s = clock.unix_s();
        let (report, attempts) = match report {
            Ok(r) => r,
            Err(reason) => {
                warn!(%reason, "missed acquisition window");
                self.counters.missed_windows += 1;
                self.events.push(GatewayEvent::MissedWindow { at_s, reason });
                return Ok(CycleOutcome::Missed);
            }
        };
        let seq = self.spool.next_seq();
        let msg = build_telemetry(&report, &self.cfg.hive_id, seq, at_s);
        if let Some(dropped) = self.spool.append(&msg.to_json())? {
            warn!(seq = dropped, "spool full, dropped oldest message");
            if let Some(inf) = self.inflight.filter(|i| i.seq == dropped) {
                self.session.abandon(inf.packet_id);
                self.inflight = None;
            }
            self.counters.dropped += 1;
            self.events.push(GatewayEvent::Drop { at_s, seq: dropped });
        }
        self.counters.appended += 1;
        debug!(seq, attempts, "spooled telemetry");
        self.poll(clock.now_ms())?;
        Ok(CycleOutcome::Appended { seq, attempts })
    }

    /// Drive the broker connection: (re)connect when due, process incoming
    /// packets, publish the spool head, send queued packets.
    pub fn poll(&mut self, now_ms: u64) -> Result<(), GatewayError> {
        if self.conn.is_none() {
            if now_ms < self.next_attempt_ms {
                return Ok(());
            }
            match self.connector.connect() {
                Ok(stream) => {
                    self.conn = Some(PacketStream::new(stream));
                    self.session.connect(now_ms);
                }
                Err(e) => {
                    self.schedule_retry(now_ms, &e.to_string());
                    return Ok(());
                }
            }
        }
        match self.exchange(now_ms) {
            Ok(()) => Ok(()),
            Err(StepError::Io(e)) => Err(e.into()),
            Err(StepError::Net(reason)) => {
                self.lose_connection(now_ms, &reason);
                Ok(())
            }
        }
    }

    fn exchange(&mut self, now_ms: u64) -> Result<(), StepError> {
        let conn = self.conn.as_mut().expect("connected");
        let mut incoming = Vec::new();
        while let Some(p) = conn.try_recv()? {
            incoming.push(p);
        }
        for p in incoming {
            for ev in self.session.handle(p, now_ms)? {
                self.on_event(ev, now_ms)?;
            }
        }
        if self.session.keepalive_tick(now_ms) == KeepAliveAction::ConnectionLost {
            return Err(StepError::Net("keep-alive expired".into()));
        }
        if self.session.is_connected() {
            if let Some(inf) = self.inflight {
                if now_ms.saturating_sub(inf.since_ms) >= self.cfg.ack_timeout_s * 1000 {
                    return Err(StepError::Net(format!("no PUBACK for seq {}", inf.seq)));
                }
            } else if let Some((seq, payload)) = self.spool.head()? {
                let topic = self.cfg.telemetry_topic();
                let packet_id = self
                    .session
                    .publish(&topic, payload, QoS::AtLeastOnce, false, now_ms)?
                    .expect("qos 1 assigns an id");
                self.inflight = Some(Inflight {
                    seq,
                    packet_id,
                    since_ms: now_ms,
                });
            }
        }
        let out = self.session.take_outgoing();
        self.conn.as_mut().expect("connected").send_all(&out)?;
        Ok(())
    }

    fn on_event(&mut self, ev: ClientEvent, now_ms: u64) -> Result<(), StepError> {
        match ev {
            ClientEvent::Connected { session_present } => {
                info!(session_present, "connected to broker");
                self.counters.connects += 1;
                self.backoff.reset();
                if let Some(inf) = &mut self.inflight {
                    inf.since_ms = now_ms;
                }
                let status = self.cfg.status_topic();
                self.session
                    .publish(&status, b"online".to_vec(), QoS::AtLeastOnce, true, now_ms)?;
            }
            ClientEvent::Refused { return_code } => {
                return Err(StepError::Net(format!("connection refused, code {return_code}")));
            }
            ClientEvent::PubAcked { packet_id } => {
                if let Some(inf) = self.inflight.filter(|i| i.packet_id == packet_id) {
                    self.spool.ack(inf.seq)?;
                    self.counters.published += 1;
                    self.inflight = None;
                    debug!(seq = inf.seq, "published");
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn lose_connection(&mut self, now_ms: u64, reason: &str) {
        if let Some(mut conn) = self.conn.take() {
            conn.get_mut().close();
        }
        if self.session.state() != crate::mqtt::ClientState::Disconnected {
            self.counters.connection_losses += 1;
        }
        self.session.connection_lost();
        self.schedule_retry(now_ms, reason);
    }

    fn schedule_retry(&mut self, now_ms: u64, reason: &str) {
        let delay = self.backoff.next_delay_ms();
        self.next_attempt_ms = now_ms + delay;
        debug!(%reason, delay_ms = delay, "broker unavailable");
    }

    /// Graceful stop: mark the hive offline and disconnect without
    /// triggering the will. Unacked messages stay in the spool.
    pub fn shutdown(&mut self, now_ms: u64) {
        if self.session.is_connected() {
            let status = self.cfg.status_topic();
            let _ = self
                .session
                .publish(&status, b"offline".to_vec(), QoS::AtMostOnce, true, now_ms);
            self.session.disconnect(now_ms);
            let out = self.session.take_outgoing();
            if let Some(conn) = &mut self.conn {
                let _ = conn.send_all(&out);
            }
        }
        if let Some(mut conn) = self.conn.take() {
            conn.get_mut().close();
        }
    }
}
