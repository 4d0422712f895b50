use std::num::NonZeroU64;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    #[default]
    Mean,
    Min,
    Max,
    Count,
}

impl std::str::FromStr for AggFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(AggFn::Mean),
            "min" => Ok(AggFn::Min),
            "max" => Ok(AggFn::Max),
            "count" => Ok(AggFn::Count),
            other => Err(format!("unknown aggregate `{other}`")),
        }
    }
}

/// Downsample a time-sorted series into windows `[t0 + k·w, t0 + (k+1)·w)`.
/// Empty windows are omitted; points before `t0` are ignored.
pub fn aggregate_window(series: &[(u64, f64)], t0_ns: u64, window_ns: NonZeroU64, f: AggFn) -> Vec<(u64, f64)> {
    let w = window_ns.get();
    let mut out = Vec::new();
    let mut current: Option<(u64, f64, u64)> = None; // (window start, acc, n)
    let finish = |(start, acc, n): (u64, f64, u64)| {
        let v = match f {
            AggFn::Mean => acc / n as f64,
            AggFn::Min | AggFn::Max => acc,
            AggFn::Count => n as f64,
        };
        (start, v)
    };
    for &(ts, v) in series.iter().filter(|(ts, _)| *ts >= t0_ns) {
        let start = t0_ns + (ts - t0_ns) / w * w;
        match &mut current {
            Some((s, acc, n)) if *s == start => {
                *acc = match f {
                    AggFn::Mean | AggFn::Count => *acc + v,
                    AggFn::Min => acc.min(v),
                    AggFn::Max => acc.max(v),
                };
                *n += 1;
            }
            _ => {
                if let Some(done) = current.take() {
                    out.push(finish(done));
                }
                current = Some((start, v, 1));
            }
        }
    }
    if let Some(done) = current {
        out.push(finish(done));
    }
    out
}
