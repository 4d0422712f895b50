//! Append-only point store, partitioned per measurement and UTC day.
//!
//! Layout under the root directory:
//!
//! ```text
//! <root>/<measurement>/<YYYYMMDD>.lp      points, one encoded line each
//! <root>/<measurement>/<YYYYMMDD>.dedup   telemetry keys already stored
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::DateTime;
use serde::Serialize;
use tracing::warn;

use super::point::{decode_point, encode_point, DataPoint, PointError};

pub const NS_PER_DAY: u64 = 86_400 * 1_000_000_000;

/// Measurement written by telemetry ingest; its points are deduplicated on
/// `(hive_id tag, seq field)`.
pub const TELEMETRY_MEASUREMENT: &str = "hive";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage io: {0}")]
    StorageIo(#[from] io::Error),
    #[error(transparent)]
    Point(#[from] PointError),
    #[error("invalid range: t0 {t0} > t1 {t1}")]
    InvalidRange { t0: u64, t1: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WriteCounts {
    pub written: u64,
    pub deduplicated: u64,
}

type DedupKey = (String, u64);

fn dedup_key(p: &DataPoint) -> Option<DedupKey> {
    if p.measurement != TELEMETRY_MEASUREMENT {
        return None;
    }
    let hive = p.tags.get("hive_id")?;
    let seq = *p.fields.get("seq")?;
    (seq >= 0.0 && seq.fract() == 0.0).then(|| (hive.clone(), seq as u64))
}

/// `YYYYMMDD` of the UTC day containing `ts_ns`.
pub fn day_name(day: u64) -> String {
    DateTime::from_timestamp((day * 86_400) as i64, 0)
        .expect("day within chrono range")
        .format("%Y%m%d")
        .to_string()
}

fn dir_name(measurement: &str) -> String {
    let mut out = String::new();
    for b in measurement.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

#[derive(Debug)]
struct Segment {
    file: Option<File>,
    points: Vec<DataPoint>,
    /// `(ts_ns, arrival index)`, sorted.
    index: Vec<(u64, u32)>,
}

impl Segment {
    fn insert_index(&mut self, ts: u64) {
        let idx = (self.points.len() - 1) as u32;
        let pos = self.index.partition_point(|&(t, _)| t <= ts);
        self.index.insert(pos, (ts, idx));
    }
}

#[derive(Debug, Default)]
struct DaySeen {
    keys: HashSet<DedupKey>,
    file: Option<File>,
}

/// Single-writer point store.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    segments: BTreeMap<(String, u64), Segment>,
    seen: HashMap<u64, DaySeen>,
}

impl Store {
    /// Open (creating if needed) the store at `root`, loading every segment.
    /// A trailing line without its newline is an interrupted append and is
    /// ignored.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut store = Store {
            root: root.clone(),
            segments: BTreeMap::new(),
            seen: HashMap::new(),
        };
        let mut dirs: Vec<_> = fs::read_dir(&root)?.collect::<Result<_, _>>()?;
        dirs.sort_by_key(|e| e.file_name());
        for dir in dirs {
            if !dir.file_type()?.is_dir() {
                continue;
            }
            let mut files: Vec<_> = fs::read_dir(dir.path())?.collect::<Result<_, _>>()?;
            files.sort_by_key(|e| e.file_name());
            for f in files {
                let path = f.path();
                match path.extension().and_then(|e| e.to_str()) {
                    Some("lp") => store.load_segment(&path)?,
                    Some("dedup") => store.load_dedup(&path)?,
                    _ => {}
                }
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn load_segment(&mut self, path: &Path) -> Result<(), StoreError> {
        for line in complete_lines(path, true)? {
            match decode_point(&line) {
                Ok(p) => {
                    let day = p.ts_ns / NS_PER_DAY;
                    if let Some(key) = dedup_key(&p) {
                        self.seen.entry(day).or_default().keys.insert(key);
                    }
                    let seg = self.segment_entry(&p.measurement, day);
                    let ts = p.ts_ns;
                    seg.points.push(p);
                    seg.insert_index(ts);
                }
                Err(e) => warn!(path = %path.display(), error = %e, "skipping undecodable line"),
            }
        }
        Ok(())
    }

    fn load_dedup(&mut self, path: &Path) -> Result<(), StoreError> {
        let Some(day) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| chrono::NaiveDate::parse_from_str(s, "%Y%m%d").ok())
            .map(|d| {
                d.signed_duration_since(chrono::NaiveDate::from_ymd_opt(1970, 1, 1).unwrap())
                    .num_days()
            })
            .filter(|d| *d >= 0)
        else {
            return Ok(());
        };
        let entry = self.seen.entry(day as u64).or_default();
        for line in complete_lines(path, true)? {
            if let Ok((hive, seq)) = serde_json::from_str::<DedupKey>(&line) {
                entry.keys.insert((hive, seq));
            }
        }
        Ok(())
    }

    fn segment_entry(&mut self, measurement: &str, day: u64) -> &mut Segment {
        self.segments
            .entry((measurement.to_owned(), day))
            .or_insert_with(|| Segment {
                file: None,
                points: Vec::new(),
                index: Vec::new(),
            })
    }

    fn segment_path(&self, measurement: &str, day: u64, ext: &str) -> PathBuf {
        self.root
            .join(dir_name(measurement))
            .join(format!("{}.{ext}", day_name(day)))
    }

    fn append(path: &Path, slot: &mut Option<File>, line: &str) -> io::Result<()> {
        if slot.is_none() {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            *slot = Some(OpenOptions::new().create(true).append(true).open(path)?);
        }
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        slot.as_mut().expect("file opened above").write_all(buf.as_bytes())
    }

    /// Append points. Telemetry points whose `(hive_id, seq)` is already
    /// stored are counted as deduplicated and skipped.
    pub fn write_points(&mut self, points: &[DataPoint]) -> Result<WriteCounts, StoreError> {
        let mut counts = WriteCounts::default();
        for p in points {
            let line = encode_point(p)?;
            let day = p.ts_ns / NS_PER_DAY;
            let key = dedup_key(p);
            if let Some(k) = &key {
                if self.seen.get(&day).is_some_and(|s| s.keys.contains(k)) {
                    counts.deduplicated += 1;
                    continue;
                }
            }
            let seg_path = self.segment_path(&p.measurement, day, "lp");
            let dedup_path = self.segment_path(&p.measurement, day, "dedup");
            let seg = self.segment_entry(&p.measurement, day);
            Self::append(&seg_path, &mut seg.file, &line)?;
            seg.points.push(p.clone());
            seg.insert_index(p.ts_ns);
            if let Some(k) = key {
                let seen = self.seen.entry(day).or_default();
                let record = serde_json::to_string(&k).expect("key serializes");
                Self::append(&dedup_path, &mut seen.file, &record)?;
                seen.keys.insert(k);
            }
            counts.written += 1;
        }
        Ok(counts)
    }

    /// All points of `measurement` with `t0 <= ts < t1` carrying `field` and
    /// every tag in `tags`, sorted by timestamp.
    pub fn query_range(
        &self,
        measurement: &str,
        field: &str,
        t0_ns: u64,
        t1_ns: u64,
        tags: &BTreeMap<String, String>,
    ) -> Result<Vec<(u64, f64)>, StoreError> {
        if t0_ns > t1_ns {
            return Err(StoreError::InvalidRange { t0: t0_ns, t1: t1_ns });
        }
        let mut out = Vec::new();
        if t0_ns == t1_ns {
            return Ok(out);
        }
        let first_day = t0_ns / NS_PER_DAY;
        let last_day = (t1_ns - 1) / NS_PER_DAY;
        let range = (measurement.to_owned(), first_day)..=(measurement.to_owned(), last_day);
        for (_, seg) in self.segments.range(range) {
            let lo = seg.index.partition_point(|&(t, _)| t < t0_ns);
            let hi = seg.index.partition_point(|&(t, _)| t < t1_ns);
            for &(ts, idx) in &seg.index[lo..hi] {
                let p = &seg.points[idx as usize];
                if !tags.iter().all(|(k, v)| p.tags.get(k) == Some(v)) {
                    continue;
                }
                if let Some(v) = p.fields.get(field) {
                    out.push((ts, *v));
                }
            }
        }
        Ok(out)
    }

    /// Every stored point of `measurement`, in timestamp order.
    pub fn points(&self, measurement: &str) -> Vec<&DataPoint> {
        let range = (measurement.to_owned(), 0)..=(measurement.to_owned(), u64::MAX);
        self.segments
            .range(range)
            .flat_map(|(_, seg)| seg.index.iter().map(|&(_, i)| &seg.points[i as usize]))
            .collect()
    }

    pub fn measurements(&self) -> Vec<String> {
        let mut names: Vec<String> = self.segments.keys().map(|(m, _)| m.clone()).collect();
        names.dedup();
        names
    }

    /// Segment files currently on disk, for inspection and tests.
    pub fn segment_files(&self) -> Vec<PathBuf> {
        self.segments
            .keys()
            .map(|(m, d)| self.segment_path(m, *d, "lp"))
            .filter(|p| p.exists())
            .collect()
    }

    /// Number of `(hive_id, seq)` keys stored.
    pub fn telemetry_keys(&self) -> usize {
        self.seen.values().map(|s| s.keys.len()).sum()
    }
}

/// Newline-terminated lines of `path`. A final unterminated line is
/// dropped and, with `repair`, truncated away so later appends start clean.
fn complete_lines(path: &Path, repair: bool) -> io::Result<Vec<String>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    let mut buf = String::new();
    let mut good_len = 0u64;
    let mut torn = false;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        match buf.strip_suffix('\n') {
            Some(line) => {
                good_len += n as u64;
                lines.push(line.to_owned());
            }
            None => torn = true,
        }
    }
    if torn && repair {
        warn!(path = %path.display(), "truncating interrupted append");
        OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
    }
    Ok(lines)
}

/// Decode every complete line of a segment file without touching it.
pub fn scan_segment_file(path: &Path) -> Result<Vec<DataPoint>, StoreError> {
    complete_lines(path, false)?
        .iter()
        .map(|l| decode_point(l).map_err(StoreError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn telemetry(hive: &str, seq: u64, ts_s: u64, temp: f64) -> DataPoint {
        DataPoint::new(TELEMETRY_MEASUREMENT, ts_s * 1_000_000_000)
            .tag("hive_id", hive)
            .field("temp_in_c", temp)
            .field("seq", seq as f64)
    }

    #[test]
    fn duplicate_point_is_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let p = telemetry("h01", 12, 1_700_000_000, 34.9);
        let counts = store.write_points(&[p.clone(), p]).unwrap();
        assert_eq!(
            counts,
            WriteCounts {
                written: 1,
                deduplicated: 1
            }
        );
        // Same seq on another hive is distinct.
        let other = telemetry("h02", 12, 1_700_000_000, 34.9);
        assert_eq!(store.write_points(&[other]).unwrap().written, 1);
    }

    #[test]
    fn days_are_partitioned() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        // 2023-11-14 23:59:59 and 2023-11-15 00:00:00 UTC
        store
            .write_points(&[
                telemetry("h", 1, 1_700_006_399, 1.0),
                telemetry("h", 2, 1_700_006_400, 2.0),
            ])
            .unwrap();
        let files = store.segment_files();
        let names: Vec<_> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["20231114.lp", "20231115.lp"]);
    }

    #[test]
    fn query_is_half_open_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let pts: Vec<_> = [5u64, 1, 3, 2, 4]
            .iter()
            .map(|&s| telemetry("h", s, s, s as f64))
            .collect();
        store.write_points(&pts).unwrap();
        let none = BTreeMap::new();
        let all = store
            .query_range("hive", "temp_in_c", 0, 10_000_000_000, &none)
            .unwrap();
        assert_eq!(all.iter().map(|x| x.1).collect::<Vec<_>>(), [1.0, 2.0, 3.0, 4.0, 5.0]);
        let mid = store
            .query_range("hive", "temp_in_c", 2_000_000_000, 4_000_000_000, &none)
            .unwrap();
        assert_eq!(mid.len(), 2);
        assert!(store.query_range("hive", "temp_in_c", 7, 7, &none).unwrap().is_empty());
        assert!(store
            .query_range("nope", "temp_in_c", 0, u64::MAX, &none)
            .unwrap()
            .is_empty());
        assert!(matches!(
            store.query_range("hive", "x", 9, 1, &none),
            Err(StoreError::InvalidRange { .. })
        ));
        let tag: BTreeMap<_, _> = [("hive_id".to_string(), "other".to_string())].into();
        assert!(store
            .query_range("hive", "temp_in_c", 0, u64::MAX, &tag)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn reopen_restores_points_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut store = Store::open(dir.path()).unwrap();
            store.write_points(&[telemetry("h", 1, 100, 1.0)]).unwrap();
        }
        // Simulated torn append.
        let seg = dir.path().join("hive").join("19700101.lp");
        let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
        f.write_all(b"hive,hive_id=h seq=2,temp_in_c=5 2000").unwrap();
        drop(f);
        let mut store = Store::open(dir.path()).unwrap();
        assert_eq!(store.points("hive").len(), 1);
        let again = store.write_points(&[telemetry("h", 1, 100, 1.0)]).unwrap();
        assert_eq!(again.deduplicated, 1);
        store.write_points(&[telemetry("h", 3, 200, 3.0)]).unwrap();
        assert_eq!(scan_segment_file(&seg).unwrap().len(), 2);
    }

    #[test]
    fn odd_measurement_names_get_safe_directories() {
        assert_eq!(dir_name("a/b c"), "a%2Fb%20c");
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store
            .write_points(&[DataPoint::new("../x", 0).field("v", 1.0)])
            .unwrap();
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.measurements(), ["../x"]);
    }
}
