//! Synthetic hive traces. Every parameter is configuration; the defaults are
//! plausible placeholders, not measurements.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelId;

const DAY_S: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gauss {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diurnal {
    pub mean: f64,
    pub amplitude: f64,
    /// Seconds after midnight at which the sinusoid crosses its mean upward.
    #[serde(default)]
    pub phase_s: f64,
    #[serde(default)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Co2Model {
    pub day_ppm: f64,
    pub night_ppm: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    pub base_kg: f64,
    /// Gain accumulated over the nectar-flow hours of each day.
    pub daily_gain_kg: f64,
    pub flow_start_h: f64,
    pub flow_end_h: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub seed: u64,
    pub duration_s: u64,
    pub temp_in: Gauss,
    pub temp_out: Diurnal,
    pub hum_in: Gauss,
    pub hum_out: Gauss,
    pub press_hpa: Gauss,
    pub co2: Co2Model,
    pub tvoc: Gauss,
    pub weight: WeightModel,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            seed: 1,
            duration_s: 86_400,
            temp_in: Gauss { mean: 35.0, sigma: 0.2 },
            temp_out: Diurnal {
                mean: 18.0,
                amplitude: 8.0,
                phase_s: 32_400.0,
                sigma: 0.3,
            },
            hum_in: Gauss { mean: 60.0, sigma: 1.5 },
            hum_out: Gauss { mean: 70.0, sigma: 4.0 },
            press_hpa: Gauss {
                mean: 1013.25,
                sigma: 0.4,
            },
            co2: Co2Model {
                day_ppm: 900.0,
                night_ppm: 1800.0,
                sigma: 40.0,
            },
            tvoc: Gauss {
                mean: 120.0,
                sigma: 15.0,
            },
            weight: WeightModel {
                base_kg: 42.0,
                daily_gain_kg: 0.8,
                flow_start_h: 9.0,
                flow_end_h: 17.0,
                sigma: 0.01,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("trace duration must be positive")]
    ZeroDuration,
    #[error("{0}: sigma must be finite and non-negative")]
    BadSigma(&'static str),
    #[error("weight flow hours must satisfy 0 <= start < end <= 24")]
    BadFlowHours,
}

impl TraceConfig {
    /// Every channel noise-free.
    pub fn noiseless(mut self) -> Self {
        self.temp_in.sigma = 0.0;
        self.temp_out.sigma = 0.0;
        self.hum_in.sigma = 0.0;
        self.hum_out.sigma = 0.0;
        self.press_hpa.sigma = 0.0;
        self.co2.sigma = 0.0;
        self.tvoc.sigma = 0.0;
        self.weight.sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.duration_s == 0 {
            return Err(TraceError::ZeroDuration);
        }
        let sigmas = [
            ("temp_in", self.temp_in.sigma),
            ("temp_out", self.temp_out.sigma),
            ("hum_in", self.hum_in.sigma),
            ("hum_out", self.hum_out.sigma),
            ("press_hpa", self.press_hpa.sigma),
            ("co2", self.co2.sigma),
            ("tvoc", self.tvoc.sigma),
            ("weight", self.weight.sigma),
        ];
        for (name, s) in sigmas {
            if !(s.is_finite() && s >= 0.0) {
                return Err(TraceError::BadSigma(name));
            }
        }
        let w = &self.weight;
        if !(0.0 <= w.flow_start_h && w.flow_start_h < w.flow_end_h && w.flow_end_h <= 24.0) {
            return Err(TraceError::BadFlowHours);
        }
        Ok(())
    }

    /// Noise-free weight: base plus the gain accrued over every flow period
    /// up to `t_s`. Non-decreasing in `t_s` for non-negative gain.
    pub fn weight_baseline(&self, t_s: u64) -> f64 {
        let w = &self.weight;
        let days = (t_s / 86_400) as f64;
        let hour = (t_s % 86_400) as f64 / 3600.0;
        let flow_len = w.flow_end_h - w.flow_start_h;
        let today = (hour.clamp(w.flow_start_h, w.flow_end_h) - w.flow_start_h) / flow_len;
        w.base_kg + w.daily_gain_kg * (days + today)
    }
}

/// Physical value per channel (weight in kg), in [`ChannelId::ALL`] order.
pub type Readings = [(ChannelId, f64); 8];

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
    }
}

/// Deterministic in `(cfg.seed, t_s)`: each second draws from its own
/// ChaCha stream, so samples can be regenerated in any order.
pub fn gen_trace(cfg: &TraceConfig, t_s: u64) -> Readings {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(t_s);
    let day_phase = (t_s % 86_400) as f64 / DAY_S;
    let is_day = (6.0 / 24.0..18.0 / 24.0).contains(&day_phase);

    let temp_in = cfg.temp_in.mean + noise(&mut rng, cfg.temp_in.sigma);
    let to = &cfg.temp_out;
    let temp_out = to.mean + to.amplitude * (TAU * (t_s as f64 - to.phase_s) / DAY_S).sin() + noise(&mut rng, to.sigma);
    let hum_in = (cfg.hum_in.mean + noise(&mut rng, cfg.hum_in.sigma)).clamp(0.0, 100.0);
    let hum_out = (cfg.hum_out.mean + noise(&mut rng, cfg.hum_out.sigma)).clamp(0.0, 100.0);
    let press = cfg.press_hpa.mean + noise(&mut rng, cfg.press_hpa.sigma);
    let co2_level = if is_day { cfg.co2.day_ppm } else { cfg.co2.night_ppm };
    let co2 = (co2_level + noise(&mut rng, cfg.co2.sigma)).max(400.0);
    let tvoc = (cfg.tvoc.mean + noise(&mut rng, cfg.tvoc.sigma)).max(0.0);
    let weight = cfg.weight_baseline(t_s) + noise(&mut rng, cfg.weight.sigma);

    [
        (ChannelId::TempInC, temp_in),
        (ChannelId::HumInPct, hum_in),
        (ChannelId::TempOutC, temp_out),
        (ChannelId::HumOutPct, hum_out),
        (ChannelId::PressHpa, press),
        (ChannelId::Co2Ppm, co2),
        (ChannelId::TvocPpb, tvoc),
        (ChannelId::WeightKg, weight),
    ]
}
