//! Fault plans and the fault-injecting in-process serial link.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, VirtualClock};
use crate::hub::{parse_command, Command, Hub};
use crate::serial::{decode_frame, encode_frame, FrameFault, LineAssembler, LinkError, SerialLink};

use super::substream;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    pub seed: u64,
    /// Per frame, each direction.
    pub serial_drop_prob: f64,
    pub serial_corrupt_prob: f64,
    /// `[start_s, end_s)` windows during which the broker refuses the
    /// gateway.
    pub broker_outages: Vec<[u64; 2]>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaultPlanError {
    #[error("{0} must be within [0, 1]")]
    BadProbability(&'static str),
    #[error("outage window [{0}, {1}) is empty")]
    EmptyWindow(u64, u64),
    #[error("outage windows overlap")]
    Overlap,
}

impl FaultPlan {
    pub fn validate(&self) -> Result<(), FaultPlanError> {
        for (name, p) in [
            ("serial_drop_prob", self.serial_drop_prob),
            ("serial_corrupt_prob", self.serial_corrupt_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FaultPlanError::BadProbability(name));
            }
        }
        let mut windows = self.broker_outages.clone();
        windows.sort_unstable();
        for w in &windows {
            if w[0] >= w[1] {
                return Err(FaultPlanError::EmptyWindow(w[0], w[1]));
            }
        }
        if windows.windows(2).any(|p| p[1][0] < p[0][1]) {
            return Err(FaultPlanError::Overlap);
        }
        Ok(())
    }

    pub fn broker_down(&self, t_s: u64) -> bool {
        self.broker_outages.iter().any(|w| (w[0]..w[1]).contains(&t_s))
    }
}

/// Random frame drops and single-bit corruption, drawn from the plan's
/// `serial` substream.
#[derive(Debug, Clone)]
pub struct SerialFaults {
    drop_prob: f64,
    corrupt_prob: f64,
    rng: ChaCha8Rng,
    pub dropped: u64,
    pub corrupted: u64,
}

impl SerialFaults {
    pub fn new(plan: &FaultPlan) -> Self {
        SerialFaults {
            drop_prob: plan.serial_drop_prob,
            corrupt_prob: plan.serial_corrupt_prob,
            rng: substream(plan.seed, "serial"),
            dropped: 0,
            corrupted: 0,
        }
    }

    fn apply(&mut self, mut frame: Vec<u8>) -> Option<Vec<u8>> {
        if self.rng.random_bool(self.drop_prob) {
            self.dropped += 1;
            return None;
        }
        if self.rng.random_bool(self.corrupt_prob) && frame.len() > 1 {
            // The terminating newline is never touched, and no flip may
            // create one.
            let i = self.rng.random_range(0..frame.len() - 1);
            let mut bit = self.rng.random_range(0..8u8);
            if frame[i] ^ (1 << bit) == b'\n' {
                bit = (bit + 1) % 8;
            }
            frame[i] ^= 1 << bit;
            self.corrupted += 1;
        }
        Some(frame)
    }
}

impl FrameFault for SerialFaults {
    fn on_request(&mut self, frame: Vec<u8>) -> Option<Vec<u8>> {
        self.apply(frame)
    }

    fn on_response(&mut self, frame: Vec<u8>) -> Option<Vec<u8>> {
        self.apply(frame)
    }
}

/// Gateway-side [`SerialLink`] wired straight into an in-process hub.
/// Responses are instantaneous; a missing response costs the full timeout
/// on the virtual clock.
pub struct SimSerial<F: FrameFault> {
    hub: Hub,
    faults: F,
    clock: VirtualClock,
    hub_rx: LineAssembler,
    pending: Option<(Vec<u8>, Option<u64>)>,
    last_snapshot_tick: u64,
    /// Hub report seq → `[first_tick, end_tick)` of its window.
    windows: BTreeMap<u64, (u64, u64)>,
    last_delivered: Option<u64>,
}

impl<F: FrameFault> SimSerial<F> {
    pub fn new(hub: Hub, faults: F, clock: VirtualClock) -> Self {
        SimSerial {
            last_snapshot_tick: hub.tick(),
            hub,
            faults,
            clock,
            hub_rx: LineAssembler::new(),
            pending: None,
            windows: BTreeMap::new(),
            last_delivered: None,
        }
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    pub fn hub_mut(&mut self) -> &mut Hub {
        &mut self.hub
    }

    pub fn faults(&self) -> &F {
        &self.faults
    }

    /// Seq of the report carried by the most recent line handed to the
    /// gateway.
    pub fn last_delivered_report(&self) -> Option<u64> {
        self.last_delivered
    }

    pub fn report_window(&self, hub_seq: u64) -> Option<(u64, u64)> {
        self.windows.get(&hub_seq).copied()
    }
}

impl<F: FrameFault> SerialLink for SimSerial<F> {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        let Some(frame) = self.faults.on_request(frame.to_vec()) else {
            return Ok(());
        };
        for line in self.hub_rx.push(&frame) {
            let Ok(line) = line else { continue };
            let Ok(body) = decode_frame(&line) else { continue };
            let is_get = parse_command(body) == Ok(Command::Get);
            let Ok(response) = encode_frame(&self.hub.handle_body(body)) else {
                continue;
            };
            let report_seq = is_get.then(|| {
                let seq = self.hub.seq();
                self.windows.insert(seq, (self.last_snapshot_tick, self.hub.tick()));
                self.last_snapshot_tick = self.hub.tick();
                seq
            });
            self.pending = self.faults.on_response(response).map(|r| (r, report_seq));
        }
        Ok(())
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, LinkError> {
        match self.pending.take() {
            Some((line, seq)) => {
                self.last_delivered = seq;
                Ok(Some(line))
            }
            None => {
                self.clock.sleep(timeout);
                Ok(None)
            }
        }
    }
}
