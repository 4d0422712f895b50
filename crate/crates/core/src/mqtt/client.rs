//! Sans-IO client session: feeds on decoded packets, queues packets to send.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::codec::{Connect, LastWill, MqttPacket, Publish, QoS, SubAckReturn};
use super::topic::{validate_filter, validate_topic};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub client_id: String,
    pub keep_alive_s: u16,
    pub clean_session: bool,
    pub will: Option<LastWill>,
    /// Leave PUBACKs for received QoS 1 messages to [`ClientSession::ack`].
    pub manual_ack: bool,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>) -> Self {
        ClientConfig {
            client_id: client_id.into(),
            keep_alive_s: 60,
            clean_session: true,
            will: None,
            manual_ack: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    Disconnected,
    Connecting,
    Connected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Connected { session_present: bool },
    Refused { return_code: u8 },
    PubAcked { packet_id: u16 },
    SubAcked { packet_id: u16, granted: Vec<SubAckReturn> },
    UnsubAcked { packet_id: u16 },
    Message(Publish),
    PingResp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepAliveAction {
    Idle,
    SendPing,
    ConnectionLost,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("not connected")]
    NotConnected,
    #[error("all 65535 packet ids are in flight")]
    PacketIdExhausted,
    #[error("connection lost")]
    ConnectionLost,
    #[error("invalid topic or filter")]
    InvalidTopic,
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
}

#[derive(Debug, Clone)]
pub struct ClientSession {
    config: ClientConfig,
    state: ClientState,
    inflight: BTreeMap<u16, Publish>,
    pending_acks: BTreeSet<u16>,
    outbox: VecDeque<MqttPacket>,
    last_sent_ms: u64,
    last_received_ms: u64,
    ping_outstanding: bool,
    last_id: u16,
}

impl ClientSession {
    pub fn new(config: ClientConfig) -> Self {
        ClientSession {
            config,
            state: ClientState::Disconnected,
            inflight: BTreeMap::new(),
            pending_acks: BTreeSet::new(),
            outbox: VecDeque::new(),
            last_sent_ms: 0,
            last_received_ms: 0,
            ping_outstanding: false,
            last_id: 0,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn state(&self) -> ClientState {
        self.state
    }

    pub fn is_connected(&self) -> bool {
        self.state == ClientState::Connected
    }

    /// Unacknowledged QoS 1 publishes by packet id.
    pub fn inflight(&self) -> &BTreeMap<u16, Publish> {
        &self.inflight
    }

    /// Start a connection attempt on a fresh transport.
    pub fn connect(&mut self, now_ms: u64) {
        self.outbox.clear();
        self.pending_acks.clear();
        if self.config.clean_session {
            self.inflight.clear();
        }
        self.state = ClientState::Connecting;
        self.ping_outstanding = false;
        self.last_received_ms = now_ms;
        self.queue(
            MqttPacket::Connect(Connect {
                client_id: self.config.client_id.clone(),
                keep_alive_s: self.config.keep_alive_s,
                clean_session: self.config.clean_session,
                will: self.config.will.clone(),
            }),
            now_ms,
        );
    }

    /// The transport died. Inflight publishes survive for re-send when the
    /// session is persistent.
    pub fn connection_lost(&mut self) {
        self.state = ClientState::Disconnected;
        self.outbox.clear();
        self.pending_acks.clear();
        self.ping_outstanding = false;
    }

    /// Graceful shutdown: queues DISCONNECT.
    pub fn disconnect(&mut self, now_ms: u64) {
        if self.state != ClientState::Disconnected {
            self.queue(MqttPacket::Disconnect, now_ms);
            self.state = ClientState::Disconnected;
        }
    }

    pub fn take_outgoing(&mut self) -> Vec<MqttPacket> {
        self.outbox.drain(..).collect()
    }

    pub fn has_outgoing(&self) -> bool {
        !self.outbox.is_empty()
    }

    fn queue(&mut self, packet: MqttPacket, now_ms: u64) {
        self.last_sent_ms = now_ms;
        self.outbox.push_back(packet);
    }

    /// Acknowledge a received QoS 1 message (manual-ack mode).
    pub fn ack(&mut self, packet_id: u16, now_ms: u64) -> Result<(), ClientError> {
        if !self.is_connected() {
            return Err(ClientError::NotConnected);
        }
        self.queue(MqttPacket::PubAck { packet_id }, now_ms);
        Ok(())
    }

    fn next_packet_id(&mut self) -> Result<u16, ClientError> {
        let mut id = self.last_id;
        for _ in 0..u16::MAX {
            id = id.checked_add(1).unwrap_or(1);
            if !self.inflight.contains_key(&id) && !self.pending_acks.contains(&id) {
                self.last_id = id;
                return Ok(id);
            }
        }
        Err(ClientError::PacketIdExhausted)
    }

    /// Queue a publish. QoS 1 returns the assigned packet id, which stays in
    /// flight until the matching PUBACK.
    pub fn publish(
        &mut self,
        topic: &str,
        payload: Vec<u8>,
        qos: QoS,
        retain: bool,
        now_ms: u64,
    ) -> Result<Option<u16>, ClientError> {
        if !self.is_connected() {
            return Err(ClientError::NotConnected);
        }
        validate_topic(topic).map_err(|_| ClientError::InvalidTopic)?;
        let packet_id = match qos {
            QoS::AtMostOnce => None,
            QoS::AtLeastOnce => Some(self.next_packet_id()?),
        };
        let publish = Publish {
            topic: topic.to_owned(),
            payload,
            qos,
            retain,
            dup: false,
            packet_id,
        };
        if let Some(id) = packet_id {
            self.inflight.insert(id, publish.clone());
        }
        self.queue(MqttPacket::Publish(publish), now_ms);
        Ok(packet_id)
    }

    /// Give up on an inflight publish; it will not be re-sent.
    pub fn abandon(&mut self, packet_id: u16) -> Option<Publish> {
        self.inflight.remove(&packet_id)
    }

    pub fn subscribe(&mut self, filters: Vec<(String, QoS)>, now_ms: u64) -> Result<u16, ClientError> {
        if !self.is_connected() {
            return Err(ClientError::NotConnected);
        }
        if filters.is_empty() || filters.iter().any(|(f, _)| validate_filter(f).is_err()) {
            return Err(ClientError::InvalidTopic);
        }
        let packet_id = self.next_packet_id()?;
        self.pending_acks.insert(packet_id);
        self.queue(MqttPacket::Subscribe { packet_id, filters }, now_ms);
        Ok(packet_id)
    }

    pub fn unsubscribe(&mut self, filters: Vec<String>, now_ms: u64) -> Result<u16, ClientError> {
        if !self.is_connected() {
            return Err(ClientError::NotConnected);
        }
        if filters.is_empty() || filters.iter().any(|f| validate_filter(f).is_err()) {
            return Err(ClientError::InvalidTopic);
        }
        let packet_id = self.next_packet_id()?;
        self.pending_acks.insert(packet_id);
        self.queue(MqttPacket::Unsubscribe { packet_id, filters }, now_ms);
        Ok(packet_id)
    }

    /// Process one packet from the broker.
    pub fn handle(&mut self, packet: MqttPacket, now_ms: u64) -> Result<Vec<ClientEvent>, ClientError> {
        self.last_received_ms = now_ms;
        let mut events = Vec::new();
        match packet {
            MqttPacket::ConnAck {
                session_present,
                return_code,
            } => {
                if self.state != ClientState::Connecting {
                    return Err(ClientError::Protocol("unexpected CONNACK"));
                }
                if return_code != 0 {
                    self.state = ClientState::Disconnected;
                    events.push(ClientEvent::Refused { return_code });
                    return Ok(events);
                }
                self.state = ClientState::Connected;
                let resend: Vec<Publish> = self
                    .inflight
                    .values_mut()
                    .map(|p| {
                        p.dup = true;
                        p.clone()
                    })
                    .collect();
                for p in resend {
                    self.queue(MqttPacket::Publish(p), now_ms);
                }
                events.push(ClientEvent::Connected { session_present });
            }
            _ if self.state != ClientState::Connected => {
                return Err(ClientError::Protocol("packet before CONNACK"));
            }
            MqttPacket::PubAck { packet_id } => {
                if self.inflight.remove(&packet_id).is_some() {
                    events.push(ClientEvent::PubAcked { packet_id });
                }
            }
            MqttPacket::SubAck { packet_id, granted } => {
                self.pending_acks.remove(&packet_id);
                events.push(ClientEvent::SubAcked { packet_id, granted });
            }
            MqttPacket::UnsubAck { packet_id } => {
                self.pending_acks.remove(&packet_id);
                events.push(ClientEvent::UnsubAcked { packet_id });
            }
            MqttPacket::Publish(p) => {
                if let (Some(packet_id), false) = (p.packet_id, self.config.manual_ack) {
                    self.queue(MqttPacket::PubAck { packet_id }, now_ms);
                }
                events.push(ClientEvent::Message(p));
            }
            MqttPacket::PingResp => {
                self.ping_outstanding = false;
                events.push(ClientEvent::PingResp);
            }
            MqttPacket::Connect(_)
            | MqttPacket::Subscribe { .. }
            | MqttPacket::Unsubscribe { .. }
            | MqttPacket::PingReq
            | MqttPacket::Disconnect => {
                return Err(ClientError::Protocol("client-to-server packet received"));
            }
        }
        Ok(events)
    }

    /// PINGREQ after `keep_alive_s` of send silence; the connection is
    /// declared dead once 1.5 × `keep_alive_s` pass with no answer.
    pub fn keepalive_tick(&mut self, now_ms: u64) -> KeepAliveAction {
        let ka_ms = self.config.keep_alive_s as u64 * 1000;
        if ka_ms == 0 {
            return KeepAliveAction::Idle;
        }
        let deadline = ka_ms * 3 / 2;
        match self.state {
            ClientState::Disconnected => KeepAliveAction::Idle,
            ClientState::Connecting => {
                if now_ms.saturating_sub(self.last_received_ms) >= deadline {
                    self.connection_lost();
                    KeepAliveAction::ConnectionLost
                } else {
                    KeepAliveAction::Idle
                }
            }
            ClientState::Connected => {
                if self.ping_outstanding {
                    if now_ms.saturating_sub(self.last_received_ms) >= deadline {
                        self.connection_lost();
                        return KeepAliveAction::ConnectionLost;
                    }
                    KeepAliveAction::Idle
                } else if now_ms.saturating_sub(self.last_sent_ms) >= ka_ms {
                    self.ping_outstanding = true;
                    self.queue(MqttPacket::PingReq, now_ms);
                    KeepAliveAction::SendPing
                } else {
                    KeepAliveAction::Idle
                }
            }
        }
    }
}
