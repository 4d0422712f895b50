//! Blocking TCP wrapper around [`ClientSession`].

use std::collections::VecDeque;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::client::{ClientConfig, ClientError, ClientEvent, ClientSession, KeepAliveAction};
use super::codec::{QoS, SubAckReturn};
use super::stream::{PacketStream, StreamError};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection refused by broker (code {0})")]
    Refused(u8),
    #[error("timed out waiting for the broker")]
    Timeout,
}

pub struct TcpClient {
    session: ClientSession,
    stream: PacketStream<TcpStream>,
    start: Instant,
    backlog: VecDeque<ClientEvent>,
}

impl TcpClient {
    pub fn connect(addr: impl ToSocketAddrs, config: ClientConfig, timeout: Duration) -> Result<Self, NetError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no address"))?;
        let sock = TcpStream::connect_timeout(&addr, timeout)?;
        sock.set_nodelay(true)?;
        sock.set_read_timeout(Some(Duration::from_millis(5)))?;
        let mut client = TcpClient {
            session: ClientSession::new(config),
            stream: PacketStream::new(sock),
            start: Instant::now(),
            backlog: VecDeque::new(),
        };
        client.session.connect(0);
        client.flush()?;
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            let mut connected = false;
            for ev in client.pump()? {
                match ev {
                    ClientEvent::Connected { .. } => connected = true,
                    ClientEvent::Refused { return_code } => return Err(NetError::Refused(return_code)),
                    other => client.backlog.push_back(other),
                }
            }
            if connected {
                return Ok(client);
            }
        }
        Err(NetError::Timeout)
    }

    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    pub fn session(&self) -> &ClientSession {
        &self.session
    }

    fn flush(&mut self) -> Result<(), NetError> {
        let out = self.session.take_outgoing();
        self.stream.send_all(&out)?;
        Ok(())
    }

    /// Read whatever is available (bounded by the socket read timeout) and
    /// run keep-alive.
    fn pump(&mut self) -> Result<Vec<ClientEvent>, NetError> {
        let mut events = Vec::new();
        while let Some(p) = self.stream.try_recv()? {
            let now = self.now_ms();
            events.extend(self.session.handle(p, now)?);
        }
        if self.session.keepalive_tick(self.now_ms()) == KeepAliveAction::ConnectionLost {
            return Err(ClientError::ConnectionLost.into());
        }
        self.flush()?;
        Ok(events)
    }

    pub fn publish(&mut self, topic: &str, payload: Vec<u8>, qos: QoS, retain: bool) -> Result<Option<u16>, NetError> {
        let now = self.now_ms();
        let id = self.session.publish(topic, payload, qos, retain, now)?;
        self.flush()?;
        Ok(id)
    }

    pub fn ack(&mut self, packet_id: u16) -> Result<(), NetError> {
        let now = self.now_ms();
        self.session.ack(packet_id, now)?;
        self.flush()
    }

    pub fn subscribe(&mut self, filters: Vec<(String, QoS)>, timeout: Duration) -> Result<Vec<SubAckReturn>, NetError> {
        let now = self.now_ms();
        let id = self.session.subscribe(filters, now)?;
        self.flush()?;
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            let mut result = None;
            for ev in self.pump()? {
                match ev {
                    ClientEvent::SubAcked { packet_id, granted } if packet_id == id => result = Some(granted),
                    other => self.backlog.push_back(other),
                }
            }
            if let Some(granted) = result {
                return Ok(granted);
            }
        }
        Err(NetError::Timeout)
    }

    /// Collect events for up to `timeout`, returning early once any arrive.
    pub fn poll(&mut self, timeout: Duration) -> Result<Vec<ClientEvent>, NetError> {
        let mut events: Vec<ClientEvent> = self.backlog.drain(..).collect();
        let deadline = Instant::now() + timeout;
        loop {
            events.extend(self.pump()?);
            if !events.is_empty() || Instant::now() >= deadline {
                return Ok(events);
            }
        }
    }

    pub fn disconnect(mut self) -> Result<(), NetError> {
        let now = self.now_ms();
        self.session.disconnect(now);
        self.flush()
    }
}
