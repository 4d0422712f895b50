use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use super::codec::{decode_packet, encode_packet_into, DecodeError, MqttPacket};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("connection closed")]
    Closed,
    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Packet framing over a byte stream. Reads are expected to be non-blocking
/// or bounded by a timeout; `WouldBlock`/`TimedOut` mean "nothing yet".
pub struct PacketStream<S> {
    stream: S,
    rbuf: Vec<u8>,
    wbuf: Vec<u8>,
}

impl<S: Read + Write> PacketStream<S> {
    pub fn new(stream: S) -> Self {
        PacketStream {
            stream,
            rbuf: Vec::new(),
            wbuf: Vec::new(),
        }
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    pub fn get_mut(&mut self) -> &mut S {
        &mut self.stream
    }

    pub fn send(&mut self, packet: &MqttPacket) -> Result<(), StreamError> {
        self.send_all(std::slice::from_ref(packet))
    }

    pub fn send_all(&mut self, packets: &[MqttPacket]) -> Result<(), StreamError> {
        if packets.is_empty() {
            return Ok(());
        }
        self.wbuf.clear();
        for p in packets {
            encode_packet_into(p, &mut self.wbuf)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        }
        match self.stream.write_all(&self.wbuf).and_then(|_| self.stream.flush()) {
            Ok(()) => Ok(()),
            Err(e) if is_disconnect(&e) => Err(StreamError::Closed),
            Err(e) => Err(e.into()),
        }
    }

    /// Next complete packet, if one is available without blocking.
    pub fn try_recv(&mut self) -> Result<Option<MqttPacket>, StreamError> {
        let mut chunk = [0u8; 4096];
        loop {
            match decode_packet(&self.rbuf) {
                Ok((packet, used)) => {
                    self.rbuf.drain(..used);
                    return Ok(Some(packet));
                }
                Err(DecodeError::NeedMore) => {}
                Err(e) => return Err(e.into()),
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(StreamError::Closed),
                Ok(n) => self.rbuf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(None),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if is_disconnect(&e) => return Err(StreamError::Closed),
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::UnexpectedEof
            | io::ErrorKind::NotConnected
    )
}

#[derive(Debug, Default)]
struct PipeInner {
    to_a: VecDeque<u8>,
    to_b: VecDeque<u8>,
    closed: bool,
}

/// One end of an in-memory, non-blocking duplex byte pipe.
#[derive(Debug, Clone)]
pub struct MemStream {
    inner: Arc<Mutex<PipeInner>>,
    is_a: bool,
}

/// Create a connected pair of in-memory streams.
pub fn mem_pipe() -> (MemStream, MemStream) {
    let inner = Arc::new(Mutex::new(PipeInner::default()));
    (
        MemStream {
            inner: inner.clone(),
            is_a: true,
        },
        MemStream { inner, is_a: false },
    )
}

impl MemStream {
    /// Sever the pipe for both ends; buffered bytes are discarded.
    pub fn close(&self) {
        let mut g = self.inner.lock().expect("pipe lock");
        g.closed = true;
        g.to_a.clear();
        g.to_b.clear();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().expect("pipe lock").closed
    }

    pub fn pending(&self) -> usize {
        let g = self.inner.lock().expect("pipe lock");
        if self.is_a {
            g.to_a.len()
        } else {
            g.to_b.len()
        }
    }
}

impl Read for MemStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut g = self.inner.lock().expect("pipe lock");
        if g.closed {
            return Ok(0);
        }
        let q = if self.is_a { &mut g.to_a } else { &mut g.to_b };
        if q.is_empty() {
            return Err(io::ErrorKind::WouldBlock.into());
        }
        let n = buf.len().min(q.len());
        for (dst, src) in buf.iter_mut().zip(q.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

impl Write for MemStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let mut g = self.inner.lock().expect("pipe lock");
        if g.closed {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        let q = if self.is_a { &mut g.to_b } else { &mut g.to_a };
        q.extend(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mqtt::codec::{Publish, QoS};

    #[test]
    fn packets_cross_a_mem_pipe() {
        let (a, b) = mem_pipe();
        let mut a = PacketStream::new(a);
        let mut b = PacketStream::new(b);
        assert!(b.try_recv().unwrap().is_none());
        let mut p = Publish::new("x/y", vec![7u8; 5000]);
        p.qos = QoS::AtLeastOnce;
        p.packet_id = Some(3);
        a.send_all(&[MqttPacket::Publish(p.clone()), MqttPacket::PingReq])
            .unwrap();
        assert_eq!(b.try_recv().unwrap(), Some(MqttPacket::Publish(p)));
        assert_eq!(b.try_recv().unwrap(), Some(MqttPacket::PingReq));
        assert!(b.try_recv().unwrap().is_none());
        a.get_ref().close();
        assert!(matches!(b.try_recv(), Err(StreamError::Closed)));
        assert!(matches!(a.send(&MqttPacket::PingReq), Err(StreamError::Closed)));
    }

    #[test]
    fn garbage_is_a_decode_error() {
        let (mut a, b) = mem_pipe();
        a.write_all(&[0x00, 0x00]).unwrap();
        let mut b = PacketStream::new(b);
        assert!(matches!(b.try_recv(), Err(StreamError::Decode(_))));
    }
}
