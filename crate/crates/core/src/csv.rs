//! Numeric CSV export of a queried series.

use std::fmt::Write;

/// `ts_ns,<field>` header, then one row per point. Floats use the shortest
/// representation that parses back to the same value.
pub fn export_csv(field: &str, series: &[(u64, f64)]) -> String {
    let mut out = format!("ts_ns,{field}\n");
    for (ts, v) in series {
        writeln!(out, "{ts},{v}").expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_when_empty() {
        assert_eq!(export_csv("temp_in_c", &[]), "ts_ns,temp_in_c\n");
    }

    #[test]
    fn values_round_trip() {
        let series: Vec<(u64, f64)> = (0..96)
            .map(|i| (i * 900_000_000_000, 35.0 + (i as f64) / 7.0))
            .collect();
        let csv = export_csv("temp_in_c", &series);
        assert_eq!(csv.lines().count(), 97);
        let parsed: Vec<(u64, f64)> = csv
            .lines()
            .skip(1)
            .map(|l| {
                let (t, v) = l.split_once(',').unwrap();
                (t.parse().unwrap(), v.parse().unwrap())
            })
            .collect();
        assert_eq!(parsed, series);
    }
}
