//! Deterministic end-to-end simulation on a virtual clock.
//!
//! Every second the loop first runs a due acquisition cycle, then the hub
//! sample tick, then moves MQTT traffic until the network is quiet. After
//! the trace ends the loop keeps pumping so the spool can drain.

pub mod drivers;
pub mod faults;
pub mod net;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::channel::ChannelId;
use crate::clock::{Clock, VirtualClock};
use crate::gateway::{CycleOutcome, Gateway, GatewayConfig, GatewayError, GatewayEvent};
use crate::hub::{Hub, HubConfig, HubError, SensorSource};
use crate::mqtt::ClientConfig;
use crate::serial::LinkConfig;
use crate::tsdb::{
    scan_segment_file, AlertEvent, AlertRule, Ingestor, RuleError, Store, StoreError, TELEMETRY_MEASUREMENT,
};

pub use drivers::{SimulatedSensors, SGP30_BASELINE_CO2, SGP30_WARMUP_TICKS};
pub use faults::{FaultPlan, FaultPlanError, SerialFaults, SimSerial};
pub use net::{MemConnector, MemNet, PacketFilter, SimSubscriber};
pub use trace::{gen_trace, Co2Model, Diurnal, Gauss, Readings, TraceConfig, TraceError, WeightModel};

/// Independent generator for `name`, derived from `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name selects the ChaCha stream.
    let stream = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn default_hive() -> String {
    "h01".into()
}
fn default_interval() -> u64 {
    900
}
fn default_capacity() -> usize {
    10_000
}
fn default_keep_alive() -> u16 {
    60
}
fn default_prefix() -> String {
    "hive".into()
}
fn default_ack_timeout() -> u64 {
    30
}
fn default_epoch() -> u64 {
    1_700_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimGatewayConfig {
    #[serde(default = "default_hive")]
    pub hive_id: String,
    #[serde(default = "default_interval")]
    pub interval_s: u64,
    #[serde(default = "default_capacity")]
    pub spool_capacity: usize,
    #[serde(default = "default_keep_alive")]
    pub keep_alive_s: u16,
    #[serde(default = "default_prefix")]
    pub topic_prefix: String,
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_s: u64,
    #[serde(default)]
    pub link: LinkConfig,
}

impl Default for SimGatewayConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimIngestConfig {
    #[serde(default)]
    pub rules: Vec<AlertRule>,
}

/// One complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_epoch")]
    pub epoch_unix_s: u64,
    /// Virtual seconds per wall second; absent or 0 runs unpaced.
    #[serde(default)]
    pub time_scale: Option<f64>,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub faults: FaultPlan,
    #[serde(default)]
    pub hub: HubConfig,
    /// Raw load-cell count at zero load.
    #[serde(default)]
    pub load_cell_zero: i64,
    #[serde(default)]
    pub gateway: SimGatewayConfig,
    #[serde(default)]
    pub ingest: SimIngestConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TraceError> for SimError {
    fn from(e: TraceError) -> Self {
        SimError::ConfigInvalid(e.to_string())
    }
}
impl From<FaultPlanError> for SimError {
    fn from(e: FaultPlanError) -> Self {
        SimError::ConfigInvalid(e.to_string())
    }
}
impl From<RuleError> for SimError {
    fn from(e: RuleError) -> Self {
        SimError::ConfigInvalid(e.to_string())
    }
}
impl From<HubError> for SimError {
    fn from(e: HubError) -> Self {
        SimError::ConfigInvalid(e.to_string())
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.trace.validate()?;
        self.faults.validate()?;
        if let Some(s) = self.time_scale {
            if !(s.is_finite() && s >= 0.0) {
                return Err(SimError::ConfigInvalid(
                    "time_scale must be a non-negative number".into(),
                ));
            }
        }
        Hub::new(self.hub)?;
        crate::tsdb::validate_rules(&self.ingest.rules)?;
        Ok(())
    }

    fn gateway_config(&self, work_dir: &Path) -> GatewayConfig {
        let g = &self.gateway;
        GatewayConfig {
            interval_s: g.interval_s,
            topic_prefix: g.topic_prefix.clone(),
            keep_alive_s: g.keep_alive_s,
            spool_capacity: g.spool_capacity,
            link: g.link,
            ack_timeout_s: g.ack_timeout_s,
            ..GatewayConfig::new(g.hive_id.clone(), work_dir.join("spool"))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimReport {
    pub duration_s: u64,
    pub interval_s: u64,
    pub cycles_expected: u64,
    pub cycles_completed: u64,
    pub messages_appended: u64,
    pub messages_published: u64,
    pub messages_in_spool: u64,
    pub messages_dropped: u64,
    pub messages_stored: u64,
    pub messages_deduplicated: u64,
    pub broker_duplicates_suppressed: u64,
    pub duplicate_rows: u64,
    pub missing_seqs: Vec<u64>,
    pub missed_windows: u64,
    pub drop_events: u64,
    pub conservation_ok: bool,
    /// Stored average vs. the mean recomputed from the trace, per channel.
    pub max_rel_error: BTreeMap<ChannelId, f64>,
    pub window_mismatches: u64,
    pub serial_frames_dropped: u64,
    pub serial_frames_corrupted: u64,
    pub gateway_connects: u64,
    pub gateway_connection_losses: u64,
    pub gateway_events: Vec<GatewayEvent>,
    pub alert_events: Vec<AlertEvent>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn pump(
    gw: &mut Gateway<MemConnector>,
    net: &std::cell::RefCell<MemNet>,
    sub: &mut SimSubscriber,
    now_ms: u64,
) -> Result<(), SimError> {
    for _ in 0..10_000 {
        gw.poll(now_ms)?;
        let moved = net.borrow_mut().step();
        let ingested = sub.step(now_ms);
        if !moved && !ingested && !gw.wants_poll(now_ms) {
            break;
        }
    }
    Ok(())
}

/// Mean of the values the hub saw for `channel` over ticks `[t0, t1)`,
/// regenerated from the trace.
fn oracle_mean(s: &Scenario, channel: ChannelId, t0: u64, t1: u64) -> f64 {
    let cpk = s.hub.counts_per_kg;
    let mut sum = 0.0;
    for t in t0..t1 {
        let v = gen_trace(&s.trace, t)[channel.index()].1;
        sum += match channel {
            ChannelId::Co2Ppm if t < SGP30_WARMUP_TICKS => SGP30_BASELINE_CO2,
            ChannelId::TvocPpb if t < SGP30_WARMUP_TICKS => 0.0,
            ChannelId::WeightKg => {
                let raw = (v * cpk).round() as i64 + s.load_cell_zero;
                (raw - s.hub.tare_offset) as f64 / cpk
            }
            _ => v,
        };
    }
    sum / (t1 - t0) as f64
}

/// Run `scenario` with spool and store under `work_dir`.
pub fn run_simulation(scenario: &Scenario, work_dir: &Path) -> Result<SimReport, SimError> {
    scenario.validate()?;
    let duration = scenario.trace.duration_s;
    let interval = scenario.gateway.interval_s;
    let gw_cfg = scenario.gateway_config(work_dir);
    gw_cfg.validate()?;

    let clock = VirtualClock::new(scenario.epoch_unix_s);
    let net = MemNet::shared(clock.clone());
    let ingestor = Ingestor::new(
        Store::open(work_dir.join("store"))?,
        scenario.ingest.rules.clone(),
        None,
    )?;
    let mut ingest_client = ClientConfig::new("hive-ingest");
    ingest_client.clean_session = false;
    let mut sub = SimSubscriber::new(ingest_client, MemConnector::new(net.clone(), "ingest"), ingestor);
    let jitter_seed = substream(scenario.faults.seed, "jitter").next_u64();
    let mut gw = Gateway::new(gw_cfg, MemConnector::new(net.clone(), "gateway"), jitter_seed)?;
    let mut serial = SimSerial::new(
        Hub::new(scenario.hub)?,
        SerialFaults::new(&scenario.faults),
        clock.clone(),
    );
    let mut sensors = SimulatedSensors::new(
        scenario.trace.clone(),
        scenario.hub.counts_per_kg,
        scenario.load_cell_zero,
    );

    let last_outage = scenario.faults.broker_outages.iter().map(|w| w[1]).max().unwrap_or(0);
    let horizon = duration.max(last_outage) + 3600;
    let pace = scenario.time_scale.filter(|s| *s > 0.0);
    let wall = Instant::now();
    let mut gw_to_hub: BTreeMap<u64, u64> = BTreeMap::new();
    let mut outage = false;

    sub.step(0);
    pump(&mut gw, &net, &mut sub, 0)?;
    for t in 0..=horizon {
        if t > duration && gw.spool().is_empty() && !outage {
            break;
        }
        clock.advance_to(t * 1000);
        let down = scenario.faults.broker_down(t);
        if down != outage {
            let mut n = net.borrow_mut();
            n.set_refusing("gateway", down);
            if down {
                n.sever("gateway");
            }
            outage = down;
        }
        if t > 0 && t <= duration && t % interval == 0 {
            if let CycleOutcome::Appended { seq, .. } = gw.acquisition_cycle(&mut serial, &clock)? {
                let hub_seq = serial.last_delivered_report().expect("accepted cycle carries a report");
                gw_to_hub.insert(seq, hub_seq);
            }
        }
        if t < duration {
            let readings = sensors.read(t);
            serial.hub_mut().sample_tick(&readings);
        }
        pump(&mut gw, &net, &mut sub, clock.now_ms())?;
        if let Some(scale) = pace {
            let target = Duration::from_secs_f64(t as f64 / scale);
            if let Some(wait) = target.checked_sub(wall.elapsed()) {
                std::thread::sleep(wait);
            }
        }
    }

    let counters = gw.counters();
    let ingestor = sub.into_ingestor();
    let ic = ingestor.counters();

    let mut rows: BTreeMap<u64, u64> = BTreeMap::new();
    for path in ingestor.store().segment_files() {
        for p in scan_segment_file(&path)? {
            if p.measurement == TELEMETRY_MEASUREMENT {
                if let Some(seq) = p.fields.get("seq") {
                    *rows.entry(*seq as u64).or_default() += 1;
                }
            }
        }
    }
    let delivered: BTreeSet<u64> = gw_to_hub.keys().copied().collect();
    let dropped: BTreeSet<u64> = gw
        .events()
        .iter()
        .filter_map(|e| match e {
            GatewayEvent::Drop { seq, .. } => Some(*seq),
            _ => None,
        })
        .collect();
    let missing_seqs = delivered
        .iter()
        .filter(|s| !rows.contains_key(s) && !dropped.contains(s) && !gw.spool().seqs().any(|q| q == **s))
        .copied()
        .collect();

    let mut max_rel_error: BTreeMap<ChannelId, f64> = BTreeMap::new();
    let mut window_mismatches = 0;
    for p in ingestor.store().points(TELEMETRY_MEASUREMENT) {
        let seq = p.fields["seq"] as u64;
        let Some((t0, t1)) = gw_to_hub.get(&seq).and_then(|h| serial.report_window(*h)) else {
            window_mismatches += 1;
            continue;
        };
        for c in ChannelId::ALL {
            let stored_n = p.fields.get(&format!("{}_n", c.as_str())).copied().unwrap_or(0.0);
            if stored_n as u64 != t1 - t0 {
                window_mismatches += 1;
                continue;
            }
            if t1 == t0 {
                continue;
            }
            let stored = p.fields[c.as_str()];
            let expect = oracle_mean(scenario, c, t0, t1);
            let err = if expect == 0.0 {
                stored.abs()
            } else {
                ((stored - expect) / expect).abs()
            };
            let slot = max_rel_error.entry(c).or_insert(0.0);
            *slot = slot.max(err);
        }
    }

    let report = SimReport {
        duration_s: duration,
        interval_s: interval,
        cycles_expected: duration / interval,
        cycles_completed: counters.appended,
        messages_appended: counters.appended,
        messages_published: counters.published,
        messages_in_spool: gw.spool().len() as u64,
        messages_dropped: counters.dropped,
        messages_stored: rows.len() as u64,
        messages_deduplicated: ic.deduplicated,
        broker_duplicates_suppressed: net.borrow().broker().stats().duplicates_suppressed,
        duplicate_rows: rows.values().map(|n| n - 1).sum(),
        missing_seqs,
        missed_windows: counters.missed_windows,
        drop_events: dropped.len() as u64,
        conservation_ok: counters.conserved(gw.spool().len()),
        max_rel_error,
        window_mismatches,
        serial_frames_dropped: serial.faults().dropped,
        serial_frames_corrupted: serial.faults().corrupted,
        gateway_connects: counters.connects,
        gateway_connection_losses: counters.connection_losses,
        gateway_events: gw.events().to_vec(),
        alert_events: ingestor.alert_events().to_vec(),
    };
    info!(
        stored = report.messages_stored,
        cycles = report.cycles_completed,
        "simulation finished"
    );
    Ok(report)
}
