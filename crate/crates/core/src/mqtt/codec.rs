//! MQTT 3.1.1 wire codec for the QoS 0/1 packet subset.

use super::topic::validate_topic;

pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Result<QoS, DecodeError> {
        match v {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Err(DecodeError::UnsupportedQos),
            _ => Err(DecodeError::Malformed("qos out of range")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LastWill {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive_s: u16,
    pub clean_session: bool,
    pub will: Option<LastWill>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
    pub dup: bool,
    /// Present iff `qos` is [`QoS::AtLeastOnce`].
    pub packet_id: Option<u16>,
}

impl Publish {
    pub fn new(topic: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Publish {
            topic: topic.into(),
            payload: payload.into(),
            qos: QoS::AtMostOnce,
            retain: false,
            dup: false,
            packet_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubAckReturn {
    Granted(QoS),
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MqttPacket {
    Connect(Connect),
    ConnAck {
        session_present: bool,
        return_code: u8,
    },
    Publish(Publish),
    PubAck {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        filters: Vec<(String, QoS)>,
    },
    SubAck {
        packet_id: u16,
        granted: Vec<SubAckReturn>,
    },
    Unsubscribe {
        packet_id: u16,
        filters: Vec<String>,
    },
    UnsubAck {
        packet_id: u16,
    },
    PingReq,
    PingResp,
    Disconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum VarintError {
    #[error("value exceeds {MAX_REMAINING_LENGTH}")]
    ValueTooLarge,
    #[error("malformed remaining length")]
    MalformedVarint,
    #[error("incomplete remaining length")]
    NeedMore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("incomplete packet")]
    NeedMore,
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("QoS 2 is not supported")]
    UnsupportedQos,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("invalid packet: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Length(#[from] VarintError),
}

pub fn encode_remaining_length(n: u32, out: &mut Vec<u8>) -> Result<usize, VarintError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(VarintError::ValueTooLarge);
    }
    let mut x = n;
    let mut written = 0;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        written += 1;
        if x == 0 {
            return Ok(written);
        }
    }
}

/// Returns `(value, bytes consumed)`. Non-minimal encodings are rejected.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<(u32, usize), VarintError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(VarintError::MalformedVarint);
        }
        value += (b & 0x7F) as u32 * multiplier;
        if b & 0x80 == 0 {
            if i > 0 && b == 0 {
                return Err(VarintError::MalformedVarint);
            }
            return Ok((value, i + 1));
        }
        multiplier *= 128;
    }
    if bytes.len() >= 4 {
        Err(VarintError::MalformedVarint)
    } else {
        Err(VarintError::NeedMore)
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn bytes(&mut self, b: &[u8]) -> Result<(), EncodeError> {
        let len = u16::try_from(b.len()).map_err(|_| EncodeError::Invalid("field over 65535 bytes"))?;
        self.u16(len);
        self.buf.extend_from_slice(b);
        Ok(())
    }

    fn string(&mut self, s: &str) -> Result<(), EncodeError> {
        self.bytes(s.as_bytes())
    }
}

fn check_packet_id(id: u16) -> Result<u16, EncodeError> {
    if id == 0 {
        Err(EncodeError::Invalid("packet id 0"))
    } else {
        Ok(id)
    }
}

pub fn encode_packet(p: &MqttPacket) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    encode_packet_into(p, &mut out)?;
    Ok(out)
}

pub fn encode_packet_into(p: &MqttPacket, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let mut body = Writer { buf: Vec::new() };
    let header: u8 = match p {
        MqttPacket::Connect(c) => {
            body.string("MQTT")?;
            body.u8(4);
            let mut flags = 0u8;
            if c.clean_session {
                flags |= 0x02;
            }
            if let Some(w) = &c.will {
                flags |= 0x04 | ((w.qos as u8) << 3);
                if w.retain {
                    flags |= 0x20;
                }
            }
            body.u8(flags);
            body.u16(c.keep_alive_s);
            body.string(&c.client_id)?;
            if let Some(w) = &c.will {
                if validate_topic(&w.topic).is_err() {
                    return Err(EncodeError::Invalid("will topic"));
                }
                body.string(&w.topic)?;
                body.bytes(&w.payload)?;
            }
            0x10
        }
        MqttPacket::ConnAck {
            session_present,
            return_code,
        } => {
            body.u8(*session_present as u8);
            body.u8(*return_code);
            0x20
        }
        MqttPacket::Publish(p) => {
            if validate_topic(&p.topic).is_err() {
                return Err(EncodeError::Invalid("publish topic"));
            }
            body.string(&p.topic)?;
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {
                    if p.dup {
                        return Err(EncodeError::Invalid("dup on QoS 0"));
                    }
                }
                (QoS::AtLeastOnce, Some(id)) => body.u16(check_packet_id(id)?),
                _ => return Err(EncodeError::Invalid("packet id presence must match qos")),
            }
            body.buf.extend_from_slice(&p.payload);
            0x30 | ((p.dup as u8) << 3) | ((p.qos as u8) << 1) | p.retain as u8
        }
        MqttPacket::PubAck { packet_id } => {
            body.u16(check_packet_id(*packet_id)?);
            0x40
        }
        MqttPacket::Subscribe { packet_id, filters } => {
            body.u16(check_packet_id(*packet_id)?);
            if filters.is_empty() {
                return Err(EncodeError::Invalid("empty subscribe"));
            }
            for (f, q) in filters {
                if f.is_empty() {
                    return Err(EncodeError::Invalid("empty filter"));
                }
                body.string(f)?;
                body.u8(*q as u8);
            }
            0x82
        }
        MqttPacket::SubAck { packet_id, granted } => {
            body.u16(check_packet_id(*packet_id)?);
            if granted.is_empty() {
                return Err(EncodeError::Invalid("empty suback"));
            }
            for g in granted {
                body.u8(match g {
                    SubAckReturn::Granted(q) => *q as u8,
                    SubAckReturn::Failure => 0x80,
                });
            }
            0x90
        }
        MqttPacket::Unsubscribe { packet_id, filters } => {
            body.u16(check_packet_id(*packet_id)?);
            if filters.is_empty() {
                return Err(EncodeError::Invalid("empty unsubscribe"));
            }
            for f in filters {
                if f.is_empty() {
                    return Err(EncodeError::Invalid("empty filter"));
                }
                body.string(f)?;
            }
            0xA2
        }
        MqttPacket::UnsubAck { packet_id } => {
            body.u16(check_packet_id(*packet_id)?);
            0xB0
        }
        MqttPacket::PingReq => 0xC0,
        MqttPacket::PingResp => 0xD0,
        MqttPacket::Disconnect => 0xE0,
    };
    let len = u32::try_from(body.buf.len()).map_err(|_| VarintError::ValueTooLarge)?;
    out.push(header);
    encode_remaining_length(len, out)?;
    out.extend_from_slice(&body.buf);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Malformed("field crosses packet boundary"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn packet_id(&mut self) -> Result<u16, DecodeError> {
        match self.u16()? {
            0 => Err(DecodeError::Malformed("packet id 0")),
            id => Ok(id),
        }
    }

    fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let raw = self.bytes()?;
        let s = std::str::from_utf8(raw).map_err(|_| DecodeError::Malformed("invalid utf-8"))?;
        if s.contains('\0') {
            return Err(DecodeError::Malformed("nul in string"));
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::Malformed("trailing bytes"))
        }
    }
}

/// Decode one packet from the front of `bytes`; returns it with the number
/// of bytes consumed. Incomplete input yields [`DecodeError::NeedMore`].
pub fn decode_packet(bytes: &[u8]) -> Result<(MqttPacket, usize), DecodeError> {
    let Some(&header) = bytes.first() else {
        return Err(DecodeError::NeedMore);
    };
    let (len, len_bytes) = match decode_remaining_length(&bytes[1..]) {
        Ok(v) => v,
        Err(VarintError::NeedMore) => return Err(DecodeError::NeedMore),
        Err(_) => return Err(DecodeError::Malformed("remaining length")),
    };
    let start = 1 + len_bytes;
    let end = start + len as usize;
    if bytes.len() < end {
        return Err(DecodeError::NeedMore);
    }
    let mut r = Reader {
        buf: &bytes[start..end],
    };
    let kind = header >> 4;
    let flags = header & 0x0F;
    let fixed_flags = |expected: u8| {
        if flags == expected {
            Ok(())
        } else {
            Err(DecodeError::Malformed("reserved header flags"))
        }
    };
    let packet = match kind {
        1 => {
            fixed_flags(0)?;
            if r.string()? != "MQTT" {
                return Err(DecodeError::Malformed("protocol name"));
            }
            if r.u8()? != 4 {
                return Err(DecodeError::Malformed("protocol level"));
            }
            let cflags = r.u8()?;
            if cflags & 0x01 != 0 {
                return Err(DecodeError::Malformed("reserved connect flag"));
            }
            let keep_alive_s = r.u16()?;
            let client_id = r.string()?;
            let will = if cflags & 0x04 != 0 {
                let qos = QoS::from_u8((cflags >> 3) & 0x03)?;
                let topic = r.string()?;
                validate_topic(&topic).map_err(|_| DecodeError::Malformed("will topic"))?;
                let payload = r.bytes()?.to_vec();
                Some(LastWill {
                    topic,
                    payload,
                    qos,
                    retain: cflags & 0x20 != 0,
                })
            } else {
                if cflags & 0x38 != 0 {
                    return Err(DecodeError::Malformed("will flags without will"));
                }
                None
            };
            // Credentials are accepted and ignored.
            let has_user = cflags & 0x80 != 0;
            let has_pass = cflags & 0x40 != 0;
            if has_pass && !has_user {
                return Err(DecodeError::Malformed("password without username"));
            }
            if has_user {
                r.string()?;
            }
            if has_pass {
                r.bytes()?;
            }
            MqttPacket::Connect(Connect {
                client_id,
                keep_alive_s,
                clean_session: cflags & 0x02 != 0,
                will,
            })
        }
        2 => {
            fixed_flags(0)?;
            let ack = r.u8()?;
            if ack & 0xFE != 0 {
                return Err(DecodeError::Malformed("connack flags"));
            }
            MqttPacket::ConnAck {
                session_present: ack == 1,
                return_code: r.u8()?,
            }
        }
        3 => {
            let qos = QoS::from_u8((flags >> 1) & 0x03)?;
            let dup = flags & 0x08 != 0;
            let retain = flags & 0x01 != 0;
            let topic = r.string()?;
            validate_topic(&topic).map_err(|_| DecodeError::Malformed("publish topic"))?;
            let packet_id = match qos {
                QoS::AtMostOnce => {
                    if dup {
                        return Err(DecodeError::Malformed("dup on QoS 0"));
                    }
                    None
                }
                QoS::AtLeastOnce => Some(r.packet_id()?),
            };
            MqttPacket::Publish(Publish {
                topic,
                payload: r.rest().to_vec(),
                qos,
                retain,
                dup,
                packet_id,
            })
        }
        4 => {
            fixed_flags(0)?;
            MqttPacket::PubAck {
                packet_id: r.packet_id()?,
            }
        }
        8 => {
            fixed_flags(2)?;
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while !r.buf.is_empty() {
                let f = r.string()?;
                if f.is_empty() {
                    return Err(DecodeError::Malformed("empty filter"));
                }
                let q = r.u8()?;
                if q & 0xFC != 0 {
                    return Err(DecodeError::Malformed("subscribe options"));
                }
                filters.push((f, QoS::from_u8(q)?));
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("empty subscribe"));
            }
            MqttPacket::Subscribe { packet_id, filters }
        }
        9 => {
            fixed_flags(0)?;
            let packet_id = r.packet_id()?;
            let granted = r
                .rest()
                .iter()
                .map(|&b| match b {
                    0 => Ok(SubAckReturn::Granted(QoS::AtMostOnce)),
                    1 => Ok(SubAckReturn::Granted(QoS::AtLeastOnce)),
                    0x80 => Ok(SubAckReturn::Failure),
                    2 => Err(DecodeError::UnsupportedQos),
                    _ => Err(DecodeError::Malformed("suback code")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            if granted.is_empty() {
                return Err(DecodeError::Malformed("empty suback"));
            }
            MqttPacket::SubAck { packet_id, granted }
        }
        10 => {
            fixed_flags(2)?;
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while !r.buf.is_empty() {
                let f = r.string()?;
                if f.is_empty() {
                    return Err(DecodeError::Malformed("empty filter"));
                }
                filters.push(f);
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("empty unsubscribe"));
            }
            MqttPacket::Unsubscribe { packet_id, filters }
        }
        11 => {
            fixed_flags(0)?;
            MqttPacket::UnsubAck {
                packet_id: r.packet_id()?,
            }
        }
        12 => {
            fixed_flags(0)?;
            MqttPacket::PingReq
        }
        13 => {
            fixed_flags(0)?;
            MqttPacket::PingResp
        }
        14 => {
            fixed_flags(0)?;
            MqttPacket::Disconnect
        }
        _ => return Err(DecodeError::Malformed("unsupported packet type")),
    };
    r.finish()?;
    Ok((packet, end))
}
