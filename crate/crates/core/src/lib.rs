//! Beehive telemetry pipeline.
//!
//! The crate is organised along the data path of a hive monitoring
//! deployment:
//!
//! * [`hub`] samples every sensor channel at 1 Hz and averages the samples
//!   collected between two requests.
//! * [`serial`] carries newline-delimited, CRC-protected JSON frames between
//!   the hub and the gateway.
//! * [`gateway`] polls the hub on a fixed interval, spools each telemetry
//!   message to disk and forwards it over MQTT.
//! * [`mqtt`] is a small MQTT 3.1.1 stack (codec, topic matching, client
//!   session and broker) restricted to QoS 0 and 1.
//! * [`tsdb`] subscribes to telemetry, stores points in append-only day
//!   segments, answers range queries and evaluates alert rules.
//! * [`sim`] wires everything together on a virtual clock with synthetic
//!   hive traces and fault injection.

pub mod channel;
pub mod clock;
pub mod csv;
pub mod gateway;
pub mod hub;
pub mod mqtt;
pub mod serial;
pub mod sim;
pub mod tsdb;

pub use channel::{ChannelId, ChannelStats};
pub use clock::{Clock, SystemClock, VirtualClock};
