//! Sensor hub: 1 Hz sampling with per-channel accumulation, averaged
//! reports on request.

mod command;
mod serve;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelId, ChannelStats};

pub use command::{parse_command, Command, CommandError, Response};
pub use serve::{serve, ServeError};

/// Signed 24-bit range of the load-cell amplifier.
pub const RAW_MIN: i32 = -8_388_608;
pub const RAW_MAX: i32 = 8_388_607;

pub const DEFAULT_COUNTS_PER_KG: f64 = 21_000.0;

pub const FIRMWARE_TAG: &str = concat!("hive-hub/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum HubError {
    #[error("non-finite reading on {0}")]
    NonFiniteValue(ChannelId),
    #[error("raw weight {0} outside the 24-bit range")]
    RawOutOfRange(i64),
    #[error("counts_per_kg must be positive, got {0}")]
    BadCalibration(f64),
    #[error("duplicate reading for {0} within one tick")]
    DuplicateReading(ChannelId),
}

/// One instantaneous value. For [`ChannelId::WeightKg`] the value is the raw
/// amplifier count, converted to kilograms on accumulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorReading {
    pub channel: ChannelId,
    pub value: f64,
    pub tick: u64,
}

/// Anything that can produce one reading per channel per tick.
pub trait SensorSource {
    fn read(&mut self, tick: u64) -> Vec<SensorReading>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelAccumulator {
    sum: f64,
    n: u64,
    min: f64,
    max: f64,
}

impl ChannelAccumulator {
    pub fn push(&mut self, v: f64) {
        if self.n == 0 {
            self.min = v;
            self.max = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.sum += v;
        self.n += 1;
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    pub fn stats(&self) -> ChannelStats {
        if self.n == 0 {
            return ChannelStats::EMPTY;
        }
        let avg = self.sum / self.n as f64;
        // Rounding can push the quotient a hair outside [min, max] when all
        // samples are equal.
        ChannelStats::new(avg.clamp(self.min, self.max), self.min, self.max, self.n)
    }
}

/// The averaged answer to one GET.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubReport {
    pub seq: u64,
    pub window_ticks: u64,
    pub channels: BTreeMap<ChannelId, ChannelStats>,
}

/// `(raw - tare) / counts_per_kg`, with range and calibration checks.
pub fn convert_weight(raw: i64, tare_offset: i64, counts_per_kg: f64) -> Result<f64, HubError> {
    if !(RAW_MIN as i64..=RAW_MAX as i64).contains(&raw) {
        return Err(HubError::RawOutOfRange(raw));
    }
    if !counts_per_kg.is_finite() || counts_per_kg <= 0.0 {
        return Err(HubError::BadCalibration(counts_per_kg));
    }
    Ok((raw - tare_offset) as f64 / counts_per_kg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HubConfig {
    pub counts_per_kg: f64,
    pub tare_offset: i64,
}

impl Default for HubConfig {
    fn default() -> Self {
        HubConfig {
            counts_per_kg: DEFAULT_COUNTS_PER_KG,
            tare_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropCounters {
    pub non_finite: u64,
    pub out_of_range: u64,
    pub duplicate: u64,
}

/// Hub state machine, advanced only by [`Hub::sample_tick`] and
/// [`Hub::handle_command`].
#[derive(Debug, Clone)]
pub struct Hub {
    accumulators: [ChannelAccumulator; ChannelId::ALL.len()],
    tick: u64,
    seq: u64,
    last_snapshot_tick: u64,
    tare_offset: i64,
    counts_per_kg: f64,
    last_raw_weight: i64,
    dropped: DropCounters,
}

impl Default for Hub {
    fn default() -> Self {
        Hub::new(HubConfig::default()).expect("default calibration is valid")
    }
}

impl Hub {
    pub fn new(config: HubConfig) -> Result<Self, HubError> {
        if !config.counts_per_kg.is_finite() || config.counts_per_kg <= 0.0 {
            return Err(HubError::BadCalibration(config.counts_per_kg));
        }
        Ok(Hub {
            accumulators: Default::default(),
            tick: 0,
            seq: 0,
            last_snapshot_tick: 0,
            tare_offset: config.tare_offset,
            counts_per_kg: config.counts_per_kg,
            last_raw_weight: config.tare_offset,
            dropped: DropCounters::default(),
        })
    }

    /// Seconds since start.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn tare_offset(&self) -> i64 {
        self.tare_offset
    }

    pub fn counts_per_kg(&self) -> f64 {
        self.counts_per_kg
    }

    pub fn dropped(&self) -> DropCounters {
        self.dropped
    }

    pub fn accumulator(&self, channel: ChannelId) -> &ChannelAccumulator {
        &self.accumulators[channel.index()]
    }

    /// Fold one tick worth of readings and advance the tick counter.
    /// Rejected readings are counted and returned; they never reach an
    /// accumulator.
    pub fn sample_tick(&mut self, readings: &[SensorReading]) -> Vec<HubError> {
        let mut seen = [false; ChannelId::ALL.len()];
        let mut rejected = Vec::new();
        for r in readings {
            match self.fold(r, &mut seen) {
                Ok(()) => {}
                Err(e) => {
                    match e {
                        HubError::NonFiniteValue(_) => self.dropped.non_finite += 1,
                        HubError::RawOutOfRange(_) | HubError::BadCalibration(_) => self.dropped.out_of_range += 1,
                        HubError::DuplicateReading(_) => self.dropped.duplicate += 1,
                    }
                    rejected.push(e);
                }
            }
        }
        self.tick += 1;
        rejected
    }

    fn fold(&mut self, r: &SensorReading, seen: &mut [bool]) -> Result<(), HubError> {
        let idx = r.channel.index();
        if seen[idx] {
            return Err(HubError::DuplicateReading(r.channel));
        }
        if !r.value.is_finite() {
            return Err(HubError::NonFiniteValue(r.channel));
        }
        let value = if r.channel == ChannelId::WeightKg {
            let raw = r.value.round();
            if raw < RAW_MIN as f64 || raw > RAW_MAX as f64 {
                return Err(HubError::RawOutOfRange(raw as i64));
            }
            let raw = raw as i64;
            let kg = convert_weight(raw, self.tare_offset, self.counts_per_kg)?;
            self.last_raw_weight = raw;
            kg
        } else {
            r.value
        };
        seen[idx] = true;
        self.accumulators[idx].push(value);
        Ok(())
    }

    /// Emit the averaged report for the window since the previous snapshot
    /// and clear every accumulator.
    pub fn snapshot_and_reset(&mut self) -> HubReport {
        self.seq += 1;
        let channels = ChannelId::ALL
            .into_iter()
            .map(|c| (c, self.accumulators[c.index()].stats()))
            .collect();
        let report = HubReport {
            seq: self.seq,
            window_ticks: self.tick - self.last_snapshot_tick,
            channels,
        };
        self.accumulators = Default::default();
        self.last_snapshot_tick = self.tick;
        report
    }

    pub fn handle_command(&mut self, command: Command) -> Response {
        match command {
            Command::Get => Response::Report(self.snapshot_and_reset()),
            Command::Ping => Response::Pong { uptime_s: self.tick },
            Command::Tare => {
                self.tare_offset = self.last_raw_weight;
                Response::Tare { tare: self.tare_offset }
            }
            Command::Cal { counts_per_kg } => {
                if counts_per_kg > 0.0 && counts_per_kg.is_finite() {
                    self.counts_per_kg = counts_per_kg;
                    Response::Ok
                } else {
                    Response::Error(CommandError::BadArg)
                }
            }
            Command::Info => Response::Info {
                fw: FIRMWARE_TAG.to_owned(),
                channels: ChannelId::ALL.to_vec(),
            },
        }
    }

    /// Decode a JSON command body, execute it and encode the response body.
    pub fn handle_body(&mut self, body: &[u8]) -> Vec<u8> {
        let response = match parse_command(body) {
            Ok(cmd) => self.handle_command(cmd),
            Err(e) => Response::Error(e),
        };
        response.to_json().into_bytes()
    }
}
