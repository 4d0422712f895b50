use std::io::{Read, Write};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::debug;

use super::frame::{decode_frame, encode_frame, FrameError, LineAssembler};
use crate::hub::{Command, Response};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub timeout_ms: u64,
    /// Attempts after the first failure.
    pub retries: u32,
    pub max_frame: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            timeout_ms: 500,
            retries: 3,
            max_frame: super::MAX_BODY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    #[error("no valid response after {attempts} attempts")]
    LinkTimeout { attempts: u32 },
    #[error("serial link closed")]
    LinkClosed,
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
}

/// A byte-stream endpoint that moves whole lines.
pub trait SerialLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError>;

    /// Next complete line within `timeout`, `Ok(None)` on timeout. Lines that
    /// failed assembly (oversize) come back as `Err(LinkError::Frame(_))`.
    fn recv_line(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, LinkError>;
}

/// Hook for fault injection on either direction of a link. Returning `None`
/// drops the frame.
pub trait FrameFault {
    fn on_request(&mut self, frame: Vec<u8>) -> Option<Vec<u8>> {
        Some(frame)
    }

    fn on_response(&mut self, frame: Vec<u8>) -> Option<Vec<u8>> {
        Some(frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub response: Response,
    /// Frames written, `1..=1 + retries`.
    pub attempts: u32,
}

/// Send `command` and wait for one decodable response, re-sending on
/// timeout or decode failure up to `cfg.retries` more times.
pub fn request_report<L: SerialLink + ?Sized>(
    link: &mut L,
    command: &Command,
    cfg: &LinkConfig,
) -> Result<Transaction, LinkError> {
    let body = command.to_json();
    if body.len() > cfg.max_frame {
        return Err(FrameError::BodyTooLarge.into());
    }
    let frame = encode_frame(body.as_bytes())?;
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let total = 1 + cfg.retries;
    for attempt in 1..=total {
        link.send(&frame)?;
        let line = match link.recv_line(timeout) {
            Ok(Some(line)) => line,
            Ok(None) => {
                debug!(attempt, "serial response timed out");
                continue;
            }
            Err(LinkError::Frame(e)) => {
                debug!(attempt, error = %e, "unusable serial line");
                continue;
            }
            Err(e) => return Err(e),
        };
        let parsed = decode_frame(&line)
            .map_err(|e| e.to_string())
            .and_then(|body| Response::parse(body, command).map_err(|e| e.to_string()));
        match parsed {
            Ok(response) => {
                return Ok(Transaction {
                    response,
                    attempts: attempt,
                })
            }
            Err(e) => debug!(attempt, error = %e, "rejected serial response"),
        }
    }
    debug!(attempts = total, "serial transaction exhausted");
    Err(LinkError::LinkTimeout { attempts: total })
}

/// [`SerialLink`] over any blocking byte stream (serial device, TCP socket,
/// pipe). A background thread assembles lines so reads can time out.
pub struct StreamLink<W: Write> {
    writer: W,
    lines: Receiver<Result<Vec<u8>, FrameError>>,
}

impl<W: Write> StreamLink<W> {
    pub fn new<R: Read + Send + 'static>(mut reader: R, writer: W) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut asm = LineAssembler::new();
            let mut buf = [0u8; 1024];
            loop {
                match reader.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => {
                        for line in asm.push(&buf[..n]) {
                            if tx.send(line).is_err() {
                                return;
                            }
                        }
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                    Err(_) => break,
                }
            }
        });
        StreamLink { writer, lines: rx }
    }
}

impl<W: Write> SerialLink for StreamLink<W> {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        self.writer
            .write_all(frame)
            .and_then(|_| self.writer.flush())
            .map_err(|_| LinkError::LinkClosed)
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, LinkError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(Some(line)),
            Ok(Err(e)) => Err(LinkError::Frame(e)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(LinkError::LinkClosed),
        }
    }
}
