//! Simulated sensor drivers feeding the hub from a trace.

use crate::channel::ChannelId;
use crate::hub::{SensorReading, SensorSource};

use super::trace::{gen_trace, TraceConfig};

/// Ticks after power-on during which the gas sensor reports its baseline.
pub const SGP30_WARMUP_TICKS: u64 = 15;
pub const SGP30_BASELINE_CO2: f64 = 400.0;

/// Trace-driven sensors. The load cell reports raw amplifier counts,
/// `round(kg · counts_per_kg) + zero_offset`.
#[derive(Debug, Clone)]
pub struct SimulatedSensors {
    trace: TraceConfig,
    counts_per_kg: f64,
    zero_offset: i64,
}

impl SimulatedSensors {
    pub fn new(trace: TraceConfig, counts_per_kg: f64, zero_offset: i64) -> Self {
        SimulatedSensors {
            trace,
            counts_per_kg,
            zero_offset,
        }
    }

    pub fn raw_counts(&self, kg: f64) -> f64 {
        (kg * self.counts_per_kg).round() + self.zero_offset as f64
    }
}

impl SensorSource for SimulatedSensors {
    fn read(&mut self, tick: u64) -> Vec<SensorReading> {
        gen_trace(&self.trace, tick)
            .into_iter()
            .map(|(channel, v)| {
                let value = match channel {
                    ChannelId::Co2Ppm if tick < SGP30_WARMUP_TICKS => SGP30_BASELINE_CO2,
                    ChannelId::TvocPpb if tick < SGP30_WARMUP_TICKS => 0.0,
                    ChannelId::WeightKg => self.raw_counts(v),
                    _ => v,
                };
                SensorReading { channel, value, tick }
            })
            .collect()
    }
}
