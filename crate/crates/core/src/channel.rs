use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Sensor channels shared by the hub, the gateway and the ingest side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChannelId {
    #[serde(rename = "temp_in_c")]
    TempInC,
    #[serde(rename = "hum_in_pct")]
    HumInPct,
    #[serde(rename = "temp_out_c")]
    TempOutC,
    #[serde(rename = "hum_out_pct")]
    HumOutPct,
    #[serde(rename = "press_hpa")]
    PressHpa,
    #[serde(rename = "co2_ppm")]
    Co2Ppm,
    #[serde(rename = "tvoc_ppb")]
    TvocPpb,
    #[serde(rename = "weight_kg")]
    WeightKg,
}

impl ChannelId {
    pub const ALL: [ChannelId; 8] = [
        ChannelId::TempInC,
        ChannelId::HumInPct,
        ChannelId::TempOutC,
        ChannelId::HumOutPct,
        ChannelId::PressHpa,
        ChannelId::Co2Ppm,
        ChannelId::TvocPpb,
        ChannelId::WeightKg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelId::TempInC => "temp_in_c",
            ChannelId::HumInPct => "hum_in_pct",
            ChannelId::TempOutC => "temp_out_c",
            ChannelId::HumOutPct => "hum_out_pct",
            ChannelId::PressHpa => "press_hpa",
            ChannelId::Co2Ppm => "co2_ppm",
            ChannelId::TvocPpb => "tvoc_ppb",
            ChannelId::WeightKg => "weight_kg",
        }
    }

    /// Position in [`ChannelId::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn unit(self) -> &'static str {
        match self {
            ChannelId::TempInC | ChannelId::TempOutC => "°C",
            ChannelId::HumInPct | ChannelId::HumOutPct => "%RH",
            ChannelId::PressHpa => "hPa",
            ChannelId::Co2Ppm => "ppm",
            ChannelId::TvocPpb => "ppb",
            ChannelId::WeightKg => "kg",
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown channel `{0}`")]
pub struct UnknownChannel(pub String);

impl FromStr for ChannelId {
    type Err = UnknownChannel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ChannelId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownChannel(s.to_owned()))
    }
}

/// Per-channel summary of one averaging window.
///
/// `avg`, `min` and `max` are present exactly when `n > 0`; an empty window
/// serializes as `{"n":0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    pub n: u64,
}

impl ChannelStats {
    pub const EMPTY: ChannelStats = ChannelStats {
        avg: None,
        min: None,
        max: None,
        n: 0,
    };

    pub fn new(avg: f64, min: f64, max: f64, n: u64) -> Self {
        ChannelStats {
            avg: Some(avg),
            min: Some(min),
            max: Some(max),
            n,
        }
    }

    /// True when the summary is internally consistent: all of avg/min/max
    /// present iff `n > 0`, all finite and `min <= avg <= max`.
    pub fn is_well_formed(&self) -> bool {
        match (self.avg, self.min, self.max) {
            (None, None, None) => self.n == 0,
            (Some(avg), Some(min), Some(max)) => {
                self.n > 0 && avg.is_finite() && min.is_finite() && max.is_finite() && min <= avg && avg <= max
            }
            _ => false,
        }
    }
}
