use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use super::HubReport;
use crate::channel::{ChannelId, ChannelStats};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Get,
    Ping,
    Tare,
    Cal { counts_per_kg: f64 },
    Info,
}

impl Command {
    /// Compact JSON body, as sent by the gateway.
    pub fn to_json(&self) -> String {
        match self {
            Command::Get => r#"{"cmd":"GET"}"#.to_owned(),
            Command::Ping => r#"{"cmd":"PING"}"#.to_owned(),
            Command::Tare => r#"{"cmd":"TARE"}"#.to_owned(),
            Command::Info => r#"{"cmd":"INFO"}"#.to_owned(),
            Command::Cal { counts_per_kg } => serde_json::json!({
                "cmd": "CAL",
                "counts_per_kg": counts_per_kg,
            })
            .to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    #[error("BAD_CMD")]
    BadCmd,
    #[error("BAD_ARG")]
    BadArg,
}

impl CommandError {
    pub fn code(self) -> &'static str {
        match self {
            CommandError::BadCmd => "BAD_CMD",
            CommandError::BadArg => "BAD_ARG",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        match code {
            "BAD_CMD" => Some(CommandError::BadCmd),
            "BAD_ARG" => Some(CommandError::BadArg),
            _ => None,
        }
    }
}

pub fn parse_command(body: &[u8]) -> Result<Command, CommandError> {
    let value: Value = serde_json::from_slice(body).map_err(|_| CommandError::BadCmd)?;
    let name = value.get("cmd").and_then(Value::as_str).ok_or(CommandError::BadCmd)?;
    match name {
        "GET" => Ok(Command::Get),
        "PING" => Ok(Command::Ping),
        "TARE" => Ok(Command::Tare),
        "INFO" => Ok(Command::Info),
        "CAL" => {
            let counts_per_kg = value
                .get("counts_per_kg")
                .and_then(Value::as_f64)
                .ok_or(CommandError::BadArg)?;
            if counts_per_kg > 0.0 && counts_per_kg.is_finite() {
                Ok(Command::Cal { counts_per_kg })
            } else {
                Err(CommandError::BadArg)
            }
        }
        _ => Err(CommandError::BadCmd),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Report(HubReport),
    Pong { uptime_s: u64 },
    Tare { tare: i64 },
    Ok,
    Info { fw: String, channels: Vec<ChannelId> },
    Error(CommandError),
}

#[derive(Serialize)]
struct ReportBody<'a> {
    status: &'static str,
    seq: u64,
    window_ticks: u64,
    channels: &'a BTreeMap<ChannelId, ChannelStats>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResponseParseError {
    #[error("response is not valid JSON: {0}")]
    Json(String),
    #[error("response has no recognised shape")]
    Shape,
}

impl Response {
    /// Compact JSON body, key order fixed.
    pub fn to_json(&self) -> String {
        let v = match self {
            Response::Report(r) => serde_json::to_string(&ReportBody {
                status: "ok",
                seq: r.seq,
                window_ticks: r.window_ticks,
                channels: &r.channels,
            }),
            Response::Pong { uptime_s } => return format!(r#"{{"status":"ok","uptime_s":{uptime_s}}}"#),
            Response::Tare { tare } => return format!(r#"{{"status":"ok","tare":{tare}}}"#),
            Response::Ok => return r#"{"status":"ok"}"#.to_owned(),
            Response::Info { fw, channels } => serde_json::to_string(&serde_json::json!({
                "status": "ok",
                "fw": fw,
                "channels": channels,
            })),
            Response::Error(e) => return format!(r#"{{"status":"err","code":"{}"}}"#, e.code()),
        };
        v.expect("response bodies always serialize")
    }

    /// Parse a response body. `expect` selects the shape for the
    /// otherwise ambiguous `{"status":"ok"}` family.
    pub fn parse(body: &[u8], expect: &Command) -> Result<Response, ResponseParseError> {
        let v: Value = serde_json::from_slice(body).map_err(|e| ResponseParseError::Json(e.to_string()))?;
        match v.get("status").and_then(Value::as_str) {
            Some("err") => {
                let code = v.get("code").and_then(Value::as_str).ok_or(ResponseParseError::Shape)?;
                let e = CommandError::from_code(code).ok_or(ResponseParseError::Shape)?;
                return Ok(Response::Error(e));
            }
            Some("ok") => {}
            _ => return Err(ResponseParseError::Shape),
        }
        let shape = || ResponseParseError::Shape;
        match expect {
            Command::Get => {
                let report: HubReport =
                    serde_json::from_value(v).map_err(|e| ResponseParseError::Json(e.to_string()))?;
                if report.channels.values().all(ChannelStats::is_well_formed) {
                    Ok(Response::Report(report))
                } else {
                    Err(shape())
                }
            }
            Command::Ping => Ok(Response::Pong {
                uptime_s: v.get("uptime_s").and_then(Value::as_u64).ok_or_else(shape)?,
            }),
            Command::Tare => Ok(Response::Tare {
                tare: v.get("tare").and_then(Value::as_i64).ok_or_else(shape)?,
            }),
            Command::Cal { .. } => Ok(Response::Ok),
            Command::Info => {
                let fw = v.get("fw").and_then(Value::as_str).ok_or_else(shape)?.to_owned();
                let channels =
                    serde_json::from_value(v.get("channels").cloned().ok_or_else(shape)?).map_err(|_| shape())?;
                Ok(Response::Info { fw, channels })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hub::{Hub, SensorReading};

    fn run(hub: &mut Hub, body: &str) -> String {
        String::from_utf8(hub.handle_body(body.as_bytes())).unwrap()
    }

    #[test]
    fn ping_reports_uptime() {
        let mut hub = Hub::default();
        for _ in 0..7 {
            hub.sample_tick(&[]);
        }
        assert_eq!(run(&mut hub, r#"{"cmd":"PING"}"#), r#"{"status":"ok","uptime_s":7}"#);
    }

    #[test]
    fn second_get_without_ticks_is_empty() {
        let mut hub = Hub::default();
        hub.sample_tick(&[SensorReading {
            channel: ChannelId::TempInC,
            value: 35.0,
            tick: 0,
        }]);
        let first = run(&mut hub, r#"{"cmd":"GET"}"#);
        assert!(first.starts_with(r#"{"status":"ok","seq":1,"window_ticks":1,"channels":{"temp_in_c":{"avg":35.0,"min":35.0,"max":35.0,"n":1},"hum_in_pct":{"n":0}"#));
        let second = run(&mut hub, r#"{"cmd":"GET"}"#);
        let parsed = Response::parse(second.as_bytes(), &Command::Get).unwrap();
        let Response::Report(report) = parsed else {
            panic!("not a report")
        };
        assert_eq!(report.seq, 2);
        assert_eq!(report.channels.len(), ChannelId::ALL.len());
        assert!(report.channels.values().all(|s| s.n == 0));
    }

    #[test]
    fn error_responses() {
        let mut hub = Hub::default();
        assert_eq!(
            run(&mut hub, r#"{"cmd":"CAL","counts_per_kg":-5}"#),
            r#"{"status":"err","code":"BAD_ARG"}"#
        );
        assert_eq!(
            run(&mut hub, r#"{"cmd":"CAL"}"#),
            r#"{"status":"err","code":"BAD_ARG"}"#
        );
        assert_eq!(
            run(&mut hub, r#"{"cmd":"REBOOT"}"#),
            r#"{"status":"err","code":"BAD_CMD"}"#
        );
        assert_eq!(run(&mut hub, "not json"), r#"{"status":"err","code":"BAD_CMD"}"#);
        assert_eq!(
            run(&mut hub, r#"{"cmd":"CAL","counts_per_kg":20000}"#),
            r#"{"status":"ok"}"#
        );
        assert_eq!(hub.counts_per_kg(), 20000.0);
    }

    #[test]
    fn info_and_tare() {
        let mut hub = Hub::default();
        let info = run(&mut hub, r#"{"cmd":"INFO"}"#);
        let parsed = Response::parse(info.as_bytes(), &Command::Info).unwrap();
        assert_eq!(
            parsed,
            Response::Info {
                fw: crate::hub::FIRMWARE_TAG.to_owned(),
                channels: ChannelId::ALL.to_vec()
            }
        );
        assert_eq!(run(&mut hub, r#"{"cmd":"TARE"}"#), r#"{"status":"ok","tare":0}"#);
    }

    #[test]
    fn commands_round_trip() {
        for cmd in [
            Command::Get,
            Command::Ping,
            Command::Tare,
            Command::Info,
            Command::Cal { counts_per_kg: 21000.5 },
        ] {
            assert_eq!(parse_command(cmd.to_json().as_bytes()), Ok(cmd));
        }
        assert_eq!(Command::Ping.to_json().len(), 14);
    }
}
