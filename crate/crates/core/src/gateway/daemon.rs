use std::fs::OpenOptions;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use tracing::{info, warn};

use super::{Gateway, GatewayConfig, GatewayCounters, GatewayError, TcpConnector};
use crate::clock::Clock;
use crate::serial::{SerialLink, StreamLink};

/// Open a serial endpoint: `tcp://host:port` or a character device path.
pub fn open_serial(endpoint: &str) -> std::io::Result<Box<dyn SerialLink + Send>> {
    if let Some(addr) = endpoint.strip_prefix("tcp://") {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Box::new(StreamLink::new(s.try_clone()?, s)))
    } else {
        let f = OpenOptions::new().read(true).write(true).open(endpoint)?;
        Ok(Box::new(StreamLink::new(f.try_clone()?, f)))
    }
}

/// Run acquisition and publishing until `stop` is set. Cycles fire every
/// `interval_s` from start; a cycle that overruns the next instant skips it.
pub fn run_daemon<L: SerialLink + ?Sized>(
    cfg: GatewayConfig,
    link: &mut L,
    clock: &dyn Clock,
    stop: &AtomicBool,
) -> Result<GatewayCounters, GatewayError> {
    let interval_ms = cfg.interval_s * 1000;
    let connector = TcpConnector::new(cfg.broker.clone());
    let mut gw = Gateway::new(cfg, connector, rand::random())?;
    let mut next_ms = clock.now_ms() + interval_ms;
    info!(hive = %gw.config().hive_id, interval_s = interval_ms / 1000, "gateway started");
    while !stop.load(Ordering::Relaxed) {
        let now = clock.now_ms();
        if now >= next_ms {
            gw.acquisition_cycle(link, clock)?;
            next_ms += interval_ms;
            let after = clock.now_ms();
            if after >= next_ms {
                let skipped = (after - next_ms) / interval_ms + 1;
                warn!(skipped, "acquisition overran its interval, skipping windows");
                next_ms += skipped * interval_ms;
            }
        }
        gw.poll(clock.now_ms())?;
        clock.sleep(Duration::from_millis(10));
    }
    gw.shutdown(clock.now_ms());
    Ok(gw.counters())
}
