use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use tracing::{debug, info};

use super::{Hub, SensorSource};
use crate::clock::Clock;
use crate::serial::{decode_frame, encode_frame, LinkError, SerialLink};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Link(#[from] LinkError),
}

/// Run the hub loop: sample `sensors` once per second of `clock` and answer
/// every valid frame arriving on `link`. Invalid frames are ignored so the
/// gateway's retry path handles them. Returns when `stop` is set or the link
/// closes.
pub fn serve<L, S, C>(
    link: &mut L,
    hub: &mut Hub,
    sensors: &mut S,
    clock: &C,
    stop: &AtomicBool,
) -> Result<(), ServeError>
where
    L: SerialLink + ?Sized,
    S: SensorSource + ?Sized,
    C: Clock + ?Sized,
{
    let start_ms = clock.now_ms();
    info!("hub serving");
    while !stop.load(Ordering::Relaxed) {
        let now = clock.now_ms() - start_ms;
        while hub.tick() * 1000 <= now {
            let readings = sensors.read(hub.tick());
            let rejected = hub.sample_tick(&readings);
            if !rejected.is_empty() {
                debug!(?rejected, "readings dropped");
            }
        }
        let next_tick = hub.tick() * 1000;
        let wait = Duration::from_millis(next_tick.saturating_sub(now).clamp(1, 100));
        match link.recv_line(wait) {
            Ok(Some(line)) => match decode_frame(&line) {
                Ok(body) => {
                    let response = hub.handle_body(body);
                    let frame = encode_frame(&response).expect("responses fit in one frame");
                    link.send(&frame)?;
                }
                Err(e) => debug!(error = %e, "ignoring bad frame"),
            },
            Ok(None) | Err(LinkError::Frame(_)) => {}
            Err(LinkError::LinkClosed) => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
