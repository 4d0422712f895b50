//! In-memory MQTT network for the simulation: one sans-IO broker, pipes per
//! connection, and hooks for outages and packet loss.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io;
use std::rc::Rc;

use tracing::{debug, warn};

use crate::clock::{Clock, VirtualClock};
use crate::gateway::Connector;
use crate::mqtt::{
    mem_pipe, Broker, BrokerOutput, ClientConfig, ClientEvent, ClientSession, ConnId, KeepAliveAction, MemStream,
    MqttPacket, PacketStream, QoS,
};
use crate::tsdb::{Ingestor, TELEMETRY_FILTER};

/// Return `false` to drop a broker-to-client packet.
pub type PacketFilter = Box<dyn FnMut(ConnId, &MqttPacket) -> bool>;

pub struct MemNet {
    broker: Broker,
    conns: BTreeMap<ConnId, (String, PacketStream<MemStream>)>,
    next_conn: ConnId,
    refusing: Vec<String>,
    clock: VirtualClock,
    filter: Option<PacketFilter>,
    /// Broker-to-client packets removed by the filter.
    pub filtered: u64,
}

impl MemNet {
    pub fn new(clock: VirtualClock) -> Self {
        MemNet {
            broker: Broker::new(),
            conns: BTreeMap::new(),
            next_conn: 1,
            refusing: Vec::new(),
            clock,
            filter: None,
            filtered: 0,
        }
    }

    pub fn shared(clock: VirtualClock) -> Rc<RefCell<MemNet>> {
        Rc::new(RefCell::new(MemNet::new(clock)))
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn set_filter(&mut self, filter: Option<PacketFilter>) {
        self.filter = filter;
    }

    /// Refuse (or accept again) new connections labelled `label`.
    pub fn set_refusing(&mut self, label: &str, refusing: bool) {
        self.refusing.retain(|l| l != label);
        if refusing {
            self.refusing.push(label.to_owned());
        }
    }

    pub fn accept(&mut self, label: &str) -> io::Result<MemStream> {
        if self.refusing.iter().any(|l| l == label) {
            return Err(io::Error::new(io::ErrorKind::ConnectionRefused, "broker unreachable"));
        }
        let (server, client) = mem_pipe();
        let id = self.next_conn;
        self.next_conn += 1;
        self.broker.open(id, self.clock.now_ms());
        self.conns.insert(id, (label.to_owned(), PacketStream::new(server)));
        debug!(conn = id, label, "accepted");
        Ok(client)
    }

    /// Tear down every connection labelled `label`, as an ungraceful loss.
    pub fn sever(&mut self, label: &str) {
        let ids: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, (l, _))| l == label)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.drop_conn(id);
            let out = self.broker.close(id);
            self.apply(out);
        }
    }

    fn drop_conn(&mut self, id: ConnId) {
        if let Some((_, mut s)) = self.conns.remove(&id) {
            s.get_mut().close();
        }
    }

    fn apply(&mut self, outputs: Vec<BrokerOutput>) {
        for o in outputs {
            match o {
                BrokerOutput::Send(id, packet) => {
                    if let Some(f) = &mut self.filter {
                        if !f(id, &packet) {
                            self.filtered += 1;
                            continue;
                        }
                    }
                    if let Some((_, s)) = self.conns.get_mut(&id) {
                        if s.send(&packet).is_err() {
                            self.drop_conn(id);
                            let out = self.broker.close(id);
                            self.apply(out);
                        }
                    }
                }
                BrokerOutput::Close(id) => self.drop_conn(id),
            }
        }
    }

    /// Feed every readable packet to the broker and deliver its output.
    /// Returns whether anything was processed.
    pub fn step(&mut self) -> bool {
        let now = self.clock.now_ms();
        let mut progress = false;
        let ids: Vec<ConnId> = self.conns.keys().copied().collect();
        for id in ids {
            while let Some((_, s)) = self.conns.get_mut(&id) {
                match s.try_recv() {
                    Ok(Some(p)) => {
                        progress = true;
                        let out = self.broker.handle(id, p, now);
                        self.apply(out);
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!(conn = id, error = %e, "connection closed by peer");
                        progress = true;
                        self.drop_conn(id);
                        let out = self.broker.close(id);
                        self.apply(out);
                        break;
                    }
                }
            }
        }
        let out = self.broker.tick(now);
        if !out.is_empty() {
            progress = true;
        }
        self.apply(out);
        progress
    }
}

/// [`Connector`] that dials the shared [`MemNet`] under a label.
pub struct MemConnector {
    net: Rc<RefCell<MemNet>>,
    label: String,
}

impl MemConnector {
    pub fn new(net: Rc<RefCell<MemNet>>, label: impl Into<String>) -> Self {
        MemConnector {
            net,
            label: label.into(),
        }
    }
}

impl Connector for MemConnector {
    type Stream = MemStream;

    fn connect(&mut self) -> io::Result<MemStream> {
        self.net.borrow_mut().accept(&self.label)
    }
}

/// Ingest service on the in-memory network: subscribes to telemetry and
/// acknowledges each message once handled.
pub struct SimSubscriber {
    session: ClientSession,
    connector: MemConnector,
    stream: Option<PacketStream<MemStream>>,
    ingestor: Ingestor,
}

impl SimSubscriber {
    pub fn new(mut client: ClientConfig, connector: MemConnector, ingestor: Ingestor) -> Self {
        client.manual_ack = true;
        SimSubscriber {
            session: ClientSession::new(client),
            connector,
            stream: None,
            ingestor,
        }
    }

    pub fn ingestor(&self) -> &Ingestor {
        &self.ingestor
    }

    pub fn into_ingestor(self) -> Ingestor {
        self.ingestor
    }

    /// Process everything that has arrived. Returns whether any packet was
    /// handled.
    pub fn step(&mut self, now_ms: u64) -> bool {
        if self.stream.is_none() {
            match self.connector.connect() {
                Ok(s) => {
                    self.stream = Some(PacketStream::new(s));
                    self.session.connect(now_ms);
                }
                Err(_) => return false,
            }
        }
        match self.exchange(now_ms) {
            Ok(progress) => progress,
            Err(reason) => {
                warn!(%reason, "ingest connection lost");
                if let Some(mut s) = self.stream.take() {
                    s.get_mut().close();
                }
                self.session.connection_lost();
                true
            }
        }
    }

    fn exchange(&mut self, now_ms: u64) -> Result<bool, String> {
        let stream = self.stream.as_mut().expect("connected");
        let mut incoming = Vec::new();
        while let Some(p) = stream.try_recv().map_err(|e| e.to_string())? {
            incoming.push(p);
        }
        let progress = !incoming.is_empty();
        for p in incoming {
            for ev in self.session.handle(p, now_ms).map_err(|e| e.to_string())? {
                match ev {
                    ClientEvent::Connected { .. } => {
                        self.session
                            .subscribe(vec![(TELEMETRY_FILTER.into(), QoS::AtLeastOnce)], now_ms)
                            .map_err(|e| e.to_string())?;
                    }
                    ClientEvent::Refused { return_code } => return Err(format!("refused, code {return_code}")),
                    ClientEvent::Message(p) => {
                        let outcome = self.ingestor.ingest(&p.payload);
                        if let (Some(id), true) = (p.packet_id, outcome.ack()) {
                            self.session.ack(id, now_ms).map_err(|e| e.to_string())?;
                        }
                    }
                    _ => {}
                }
            }
        }
        if self.session.keepalive_tick(now_ms) == KeepAliveAction::ConnectionLost {
            return Err("keep-alive expired".into());
        }
        let out = self.session.take_outgoing();
        self.stream
            .as_mut()
            .expect("connected")
            .send_all(&out)
            .map_err(|e| e.to_string())?;
        Ok(progress || !out.is_empty())
    }
}
