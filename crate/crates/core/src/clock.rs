//! Time sources. Simulation runs on [`VirtualClock`]; daemons on
//! [`SystemClock`]. Both report milliseconds since their own start plus the
//! Unix time that corresponds to that start.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub trait Clock {
    /// Monotonic milliseconds since the clock was created.
    fn now_ms(&self) -> u64;

    /// Unix time in whole seconds.
    fn unix_s(&self) -> u64;

    /// Block (or, for a virtual clock, jump) for `d`.
    fn sleep(&self, d: Duration);
}

/// Deterministic shared clock advanced explicitly by the simulation loop.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now_ms: Arc<AtomicU64>,
    epoch_unix_s: u64,
}

impl VirtualClock {
    pub fn new(epoch_unix_s: u64) -> Self {
        VirtualClock {
            now_ms: Arc::new(AtomicU64::new(0)),
            epoch_unix_s,
        }
    }

    pub fn advance(&self, ms: u64) {
        self.now_ms.fetch_add(ms, Ordering::AcqRel);
    }

    /// Move forward to `ms`; never moves backwards.
    pub fn advance_to(&self, ms: u64) {
        self.now_ms.fetch_max(ms, Ordering::AcqRel);
    }

    pub fn epoch_unix_s(&self) -> u64 {
        self.epoch_unix_s
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now_ms.load(Ordering::Acquire)
    }

    fn unix_s(&self) -> u64 {
        self.epoch_unix_s + self.now_ms() / 1000
    }

    fn sleep(&self, d: Duration) {
        self.advance(d.as_millis() as u64);
    }
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn unix_s(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_is_shared_and_monotone() {
        let clock = VirtualClock::new(1_700_000_000);
        let other = clock.clone();
        clock.advance(1500);
        assert_eq!(other.now_ms(), 1500);
        assert_eq!(other.unix_s(), 1_700_000_001);
        clock.advance_to(1000);
        assert_eq!(clock.now_ms(), 1500);
        other.sleep(Duration::from_millis(500));
        assert_eq!(clock.now_ms(), 2000);
    }
}
