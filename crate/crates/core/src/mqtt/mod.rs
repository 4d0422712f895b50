//! Minimal MQTT 3.1.1: codec, topic matching, a sans-IO client session and
//! broker, plus TCP and in-memory transports. QoS 2 is rejected.

pub mod broker;
pub mod client;
pub mod codec;
pub mod net;
pub mod server;
pub mod stream;
pub mod topic;

pub use broker::{Broker, BrokerOutput, BrokerStats, ConnId};
pub use client::{ClientConfig, ClientError, ClientEvent, ClientSession, ClientState, KeepAliveAction};
pub use codec::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, Connect, DecodeError, EncodeError,
    LastWill, MqttPacket, Publish, QoS, SubAckReturn, VarintError, MAX_REMAINING_LENGTH,
};
pub use net::{NetError, TcpClient};
pub use server::BrokerServer;
pub use stream::{mem_pipe, MemStream, PacketStream, StreamError};
pub use topic::{matches_unchecked, topic_matches, validate_filter, validate_topic, TopicError};

pub const DEFAULT_PORT: u16 = 1883;
