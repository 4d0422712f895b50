//! Telemetry ingest, append-only point storage, downsampling and alerts.

pub mod aggregate;
pub mod alert;
pub mod ingest;
pub mod point;
pub mod store;

pub use aggregate::{aggregate_window, AggFn};
pub use alert::{eval_alerts, validate_rules, AlertEvent, AlertRule, AlertSink, Predicate, RuleError, RuleState, Sink};
pub use ingest::{
    open_ingestor, parse_telemetry, run_subscriber, IngestConfig, IngestCounters, IngestError, IngestOutcome, Ingestor,
    TelemetryError, TELEMETRY_FILTER,
};
pub use point::{decode_point, encode_point, DataPoint, PointError};
pub use store::{day_name, scan_segment_file, Store, StoreError, WriteCounts, NS_PER_DAY, TELEMETRY_MEASUREMENT};
