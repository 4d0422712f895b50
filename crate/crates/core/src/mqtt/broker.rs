//! Sans-IO broker. Transports hand it decoded packets tagged with a
//! connection id; it answers with packets to send and connections to close.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};

use tracing::{debug, warn};

use super::codec::{LastWill, MqttPacket, Publish, QoS, SubAckReturn};
use super::topic::{matches_unchecked, validate_filter, validate_topic};

pub type ConnId = u64;

/// Packet ids remembered per session for duplicate suppression.
pub const DEDUP_WINDOW: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerOutput {
    Send(ConnId, MqttPacket),
    Close(ConnId),
}

#[derive(Debug, Clone, Default)]
pub struct Session {
    pub client_id: String,
    pub subscriptions: Vec<(String, QoS)>,
    /// Broker-to-client QoS 1 deliveries awaiting PUBACK.
    pub inflight: BTreeMap<u16, Publish>,
    pub keep_alive_s: u16,
    pub clean_session: bool,
    conn: Option<ConnId>,
    recent: VecDeque<(u16, u64)>,
    last_id: u16,
}

impl Session {
    pub fn is_connected(&self) -> bool {
        self.conn.is_some()
    }

    /// Highest granted QoS among this session's filters matching `topic`.
    fn matching_qos(&self, topic: &str) -> Option<QoS> {
        self.subscriptions
            .iter()
            .filter(|(f, _)| matches_unchecked(f, topic))
            .map(|(_, q)| *q)
            .max()
    }

    fn next_packet_id(&mut self) -> Option<u16> {
        let mut id = self.last_id;
        for _ in 0..u16::MAX {
            id = id.checked_add(1).unwrap_or(1);
            if !self.inflight.contains_key(&id) {
                self.last_id = id;
                return Some(id);
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
struct Conn {
    client_id: Option<String>,
    will: Option<LastWill>,
    keep_alive_s: u16,
    last_rx_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct BrokerStats {
    pub publishes_received: u64,
    pub duplicates_suppressed: u64,
    pub deliveries: u64,
    pub wills_published: u64,
}

#[derive(Debug, Default)]
pub struct Broker {
    sessions: BTreeMap<String, Session>,
    conns: BTreeMap<ConnId, Conn>,
    retained: BTreeMap<String, Publish>,
    stats: BrokerStats,
}

fn content_hash(p: &Publish) -> u64 {
    let mut h = DefaultHasher::new();
    p.topic.hash(&mut h);
    p.payload.hash(&mut h);
    h.finish()
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> BrokerStats {
        self.stats
    }

    pub fn session(&self, client_id: &str) -> Option<&Session> {
        self.sessions.get(client_id)
    }

    pub fn retained(&self) -> &BTreeMap<String, Publish> {
        &self.retained
    }

    /// Register a freshly accepted transport.
    pub fn open(&mut self, conn: ConnId, now_ms: u64) {
        self.conns.insert(
            conn,
            Conn {
                client_id: None,
                will: None,
                keep_alive_s: 0,
                last_rx_ms: now_ms,
            },
        );
    }

    /// Route a publish against the current subscriptions: one delivery per
    /// connected session with at least one matching filter, at
    /// `min(publish qos, best subscription qos)`. Updates the retained slot
    /// when the publish carries the retain flag.
    pub fn route(&mut self, publish: &Publish) -> Vec<(String, Publish)> {
        if publish.retain {
            if publish.payload.is_empty() {
                self.retained.remove(&publish.topic);
            } else {
                let mut kept = publish.clone();
                kept.dup = false;
                kept.packet_id = None;
                self.retained.insert(publish.topic.clone(), kept);
            }
        }
        self.sessions
            .values()
            .filter(|s| s.is_connected())
            .filter_map(|s| {
                let sub_qos = s.matching_qos(&publish.topic)?;
                let qos = publish.qos.min(sub_qos);
                Some((
                    s.client_id.clone(),
                    Publish {
                        topic: publish.topic.clone(),
                        payload: publish.payload.clone(),
                        qos,
                        retain: false,
                        dup: false,
                        packet_id: None,
                    },
                ))
            })
            .collect()
    }

    fn deliver(&mut self, deliveries: Vec<(String, Publish)>, out: &mut Vec<BrokerOutput>) {
        for (client_id, mut publish) in deliveries {
            let Some(session) = self.sessions.get_mut(&client_id) else {
                continue;
            };
            let Some(conn) = session.conn else { continue };
            if publish.qos == QoS::AtLeastOnce {
                let Some(id) = session.next_packet_id() else {
                    warn!(client_id, "subscriber has 65535 unacked deliveries; dropping");
                    continue;
                };
                publish.packet_id = Some(id);
                session.inflight.insert(id, publish.clone());
            }
            self.stats.deliveries += 1;
            out.push(BrokerOutput::Send(conn, MqttPacket::Publish(publish)));
        }
    }

    fn publish_will(&mut self, will: LastWill, out: &mut Vec<BrokerOutput>) {
        self.stats.wills_published += 1;
        let publish = Publish {
            topic: will.topic,
            payload: will.payload,
            qos: will.qos,
            retain: will.retain,
            dup: false,
            packet_id: None,
        };
        let deliveries = self.route(&publish);
        self.deliver(deliveries, out);
    }

    fn drop_conn(&mut self, conn: ConnId, graceful: bool, out: &mut Vec<BrokerOutput>) {
        let Some(c) = self.conns.remove(&conn) else { return };
        if let Some(id) = &c.client_id {
            let remove = match self.sessions.get_mut(id) {
                Some(s) if s.conn == Some(conn) => {
                    s.conn = None;
                    s.clean_session
                }
                _ => false,
            };
            if remove {
                self.sessions.remove(id);
            }
        }
        if !graceful {
            if let Some(will) = c.will {
                debug!(conn, topic = %will.topic, "publishing last will");
                self.publish_will(will, out);
            }
        }
    }

    /// The transport for `conn` went away without DISCONNECT.
    pub fn close(&mut self, conn: ConnId) -> Vec<BrokerOutput> {
        let mut out = Vec::new();
        self.drop_conn(conn, false, &mut out);
        out
    }

    /// Expire connections silent for 1.5 × their keep-alive.
    pub fn tick(&mut self, now_ms: u64) -> Vec<BrokerOutput> {
        let expired: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.keep_alive_s > 0 && now_ms.saturating_sub(c.last_rx_ms) >= c.keep_alive_s as u64 * 1500)
            .map(|(id, _)| *id)
            .collect();
        let mut out = Vec::new();
        for conn in expired {
            debug!(conn, "keep-alive expired");
            self.drop_conn(conn, false, &mut out);
            out.push(BrokerOutput::Close(conn));
        }
        out
    }

    pub fn handle(&mut self, conn: ConnId, packet: MqttPacket, now_ms: u64) -> Vec<BrokerOutput> {
        let mut out = Vec::new();
        let Some(c) = self.conns.get_mut(&conn) else {
            return vec![BrokerOutput::Close(conn)];
        };
        c.last_rx_ms = now_ms;
        let client_id = c.client_id.clone();
        match (client_id, packet) {
            (None, MqttPacket::Connect(connect)) => self.on_connect(conn, connect, now_ms, &mut out),
            (None, _) | (Some(_), MqttPacket::Connect(_)) => {
                self.drop_conn(conn, false, &mut out);
                out.push(BrokerOutput::Close(conn));
            }
            (Some(id), MqttPacket::Publish(publish)) => self.on_publish(conn, &id, publish, &mut out),
            (Some(id), MqttPacket::PubAck { packet_id }) => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    s.inflight.remove(&packet_id);
                }
            }
            (Some(id), MqttPacket::Subscribe { packet_id, filters }) => {
                self.on_subscribe(conn, &id, packet_id, filters, &mut out)
            }
            (Some(id), MqttPacket::Unsubscribe { packet_id, filters }) => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    s.subscriptions.retain(|(f, _)| !filters.contains(f));
                }
                out.push(BrokerOutput::Send(conn, MqttPacket::UnsubAck { packet_id }));
            }
            (Some(_), MqttPacket::PingReq) => out.push(BrokerOutput::Send(conn, MqttPacket::PingResp)),
            (Some(_), MqttPacket::Disconnect) => {
                self.drop_conn(conn, true, &mut out);
                out.push(BrokerOutput::Close(conn));
            }
            (Some(_), _) => {
                self.drop_conn(conn, false, &mut out);
                out.push(BrokerOutput::Close(conn));
            }
        }
        out
    }

    fn on_connect(&mut self, conn: ConnId, connect: super::codec::Connect, _now_ms: u64, out: &mut Vec<BrokerOutput>) {
        let refuse = |out: &mut Vec<BrokerOutput>, code: u8| {
            out.push(BrokerOutput::Send(
                conn,
                MqttPacket::ConnAck {
                    session_present: false,
                    return_code: code,
                },
            ));
            out.push(BrokerOutput::Close(conn));
        };
        if connect.client_id.is_empty() && !connect.clean_session {
            self.conns.remove(&conn);
            return refuse(out, 2);
        }
        if let Some(w) = &connect.will {
            if validate_topic(&w.topic).is_err() {
                self.conns.remove(&conn);
                return refuse(out, 2);
            }
        }
        let client_id = if connect.client_id.is_empty() {
            format!("auto-{conn}")
        } else {
            connect.client_id.clone()
        };

        // Session takeover: the old transport is closed without its will.
        if let Some(old) = self.sessions.get(&client_id).and_then(|s| s.conn) {
            if let Some(c) = self.conns.get_mut(&old) {
                c.will = None;
            }
            self.drop_conn(old, true, out);
            out.push(BrokerOutput::Close(old));
        }

        let session_present = !connect.clean_session && self.sessions.contains_key(&client_id);
        if !session_present {
            self.sessions.insert(
                client_id.clone(),
                Session {
                    client_id: client_id.clone(),
                    ..Session::default()
                },
            );
        }
        let session = self.sessions.get_mut(&client_id).expect("session just ensured");
        session.conn = Some(conn);
        session.clean_session = connect.clean_session;
        session.keep_alive_s = connect.keep_alive_s;

        let c = self.conns.get_mut(&conn).expect("connection registered");
        c.client_id = Some(client_id.clone());
        c.will = connect.will;
        c.keep_alive_s = connect.keep_alive_s;

        out.push(BrokerOutput::Send(
            conn,
            MqttPacket::ConnAck {
                session_present,
                return_code: 0,
            },
        ));
        for p in session.inflight.values_mut() {
            p.dup = true;
            out.push(BrokerOutput::Send(conn, MqttPacket::Publish(p.clone())));
        }
    }

    fn on_publish(&mut self, conn: ConnId, client_id: &str, publish: Publish, out: &mut Vec<BrokerOutput>) {
        self.stats.publishes_received += 1;
        let Some(session) = self.sessions.get_mut(client_id) else {
            return;
        };
        let mut duplicate = false;
        if let Some(id) = publish.packet_id {
            let key = (id, content_hash(&publish));
            duplicate = publish.dup && session.recent.contains(&key);
            if !duplicate {
                session.recent.retain(|(rid, _)| *rid != id);
                session.recent.push_back(key);
                if session.recent.len() > DEDUP_WINDOW {
                    session.recent.pop_front();
                }
            }
            out.push(BrokerOutput::Send(conn, MqttPacket::PubAck { packet_id: id }));
        }
        if duplicate {
            self.stats.duplicates_suppressed += 1;
            return;
        }
        let deliveries = self.route(&publish);
        self.deliver(deliveries, out);
    }

    fn on_subscribe(
        &mut self,
        conn: ConnId,
        client_id: &str,
        packet_id: u16,
        filters: Vec<(String, QoS)>,
        out: &mut Vec<BrokerOutput>,
    ) {
        let Some(session) = self.sessions.get_mut(client_id) else {
            return;
        };
        let mut granted = Vec::with_capacity(filters.len());
        let mut accepted = Vec::new();
        for (filter, qos) in filters {
            if validate_filter(&filter).is_err() {
                granted.push(SubAckReturn::Failure);
                continue;
            }
            match session.subscriptions.iter_mut().find(|(f, _)| *f == filter) {
                Some(existing) => existing.1 = qos,
                None => session.subscriptions.push((filter.clone(), qos)),
            }
            granted.push(SubAckReturn::Granted(qos));
            accepted.push((filter, qos));
        }
        out.push(BrokerOutput::Send(conn, MqttPacket::SubAck { packet_id, granted }));

        // Retained messages for the new filters, each topic at most once.
        let mut sent = BTreeSet::new();
        let mut deliveries = Vec::new();
        for (filter, qos) in &accepted {
            for (topic, retained) in &self.retained {
                if matches_unchecked(filter, topic) && sent.insert(topic.clone()) {
                    let mut p = retained.clone();
                    p.qos = p.qos.min(*qos);
                    p.retain = true;
                    deliveries.push((client_id.to_owned(), p));
                }
            }
        }
        self.deliver(deliveries, out);
    }
}
