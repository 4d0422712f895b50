//! Text point format, one point per line:
//!
//! ```text
//! measurement[,tag=value]* field=value[,field=value]* ts_ns
//! ```
//!
//! Measurement names escape `,` and space; tag keys, tag values and field
//! keys additionally escape `=`. A backslash is written as `\\`. Floats use
//! the shortest decimal that round-trips.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub measurement: String,
    pub tags: BTreeMap<String, String>,
    pub fields: BTreeMap<String, f64>,
    pub ts_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PointError {
    #[error("malformed line: {0}")]
    MalformedLine(&'static str),
    #[error("bad escape sequence")]
    BadEscape,
    #[error("invalid point: {0}")]
    Invalid(&'static str),
}

impl DataPoint {
    pub fn new(measurement: impl Into<String>, ts_ns: u64) -> Self {
        DataPoint {
            measurement: measurement.into(),
            tags: BTreeMap::new(),
            fields: BTreeMap::new(),
            ts_ns,
        }
    }

    pub fn tag(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.tags.insert(k.into(), v.into());
        self
    }

    pub fn field(mut self, k: impl Into<String>, v: f64) -> Self {
        self.fields.insert(k.into(), v);
        self
    }

    pub fn validate(&self) -> Result<(), PointError> {
        let no_newline = |s: &str| !s.contains(['\n', '\r']);
        if self.measurement.is_empty() || !no_newline(&self.measurement) {
            return Err(PointError::Invalid("measurement name"));
        }
        if self.fields.is_empty() {
            return Err(PointError::Invalid("no fields"));
        }
        for (k, v) in &self.tags {
            if k.is_empty() || !no_newline(k) || !no_newline(v) {
                return Err(PointError::Invalid("tag"));
            }
        }
        for (k, v) in &self.fields {
            if k.is_empty() || !no_newline(k) {
                return Err(PointError::Invalid("field name"));
            }
            if !v.is_finite() {
                return Err(PointError::Invalid("non-finite field value"));
            }
        }
        Ok(())
    }
}

fn escape_into(out: &mut String, s: &str, specials: &[char]) {
    for c in s.chars() {
        if c == '\\' || specials.contains(&c) {
            out.push('\\');
        }
        out.push(c);
    }
}

const MEASUREMENT_SPECIALS: &[char] = &[',', ' '];
const KEY_SPECIALS: &[char] = &[',', '=', ' '];

pub fn encode_point(p: &DataPoint) -> Result<String, PointError> {
    p.validate()?;
    let mut out = String::with_capacity(64);
    escape_into(&mut out, &p.measurement, MEASUREMENT_SPECIALS);
    for (k, v) in &p.tags {
        out.push(',');
        escape_into(&mut out, k, KEY_SPECIALS);
        out.push('=');
        escape_into(&mut out, v, KEY_SPECIALS);
    }
    out.push(' ');
    for (i, (k, v)) in p.fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        escape_into(&mut out, k, KEY_SPECIALS);
        write!(out, "={v}").expect("writing to a String");
    }
    write!(out, " {}", p.ts_ns).expect("writing to a String");
    Ok(out)
}

struct Scanner<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl Scanner<'_> {
    /// Read an escaped token up to (not including) one of `stops`.
    fn token(&mut self, specials: &[char], stops: &[char]) -> Result<String, PointError> {
        let mut out = String::new();
        while let Some(&c) = self.chars.peek() {
            if stops.contains(&c) {
                break;
            }
            self.chars.next();
            if c == '\\' {
                match self.chars.next() {
                    Some(e) if e == '\\' || specials.contains(&e) => out.push(e),
                    _ => return Err(PointError::BadEscape),
                }
            } else {
                out.push(c);
            }
        }
        Ok(out)
    }

    fn next(&mut self) -> Option<char> {
        self.chars.next()
    }
}

pub fn decode_point(line: &str) -> Result<DataPoint, PointError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    if line.contains('\n') {
        return Err(PointError::MalformedLine("embedded newline"));
    }
    let mut s = Scanner {
        chars: line.chars().peekable(),
    };
    let measurement = s.token(MEASUREMENT_SPECIALS, &[',', ' '])?;
    if measurement.is_empty() {
        return Err(PointError::MalformedLine("empty measurement"));
    }
    let mut p = DataPoint::new(measurement, 0);
    let mut sep = s.next().ok_or(PointError::MalformedLine("missing fields"))?;
    while sep == ',' {
        let key = s.token(KEY_SPECIALS, &['=', ',', ' '])?;
        if key.is_empty() || s.next() != Some('=') {
            return Err(PointError::MalformedLine("tag"));
        }
        let value = s.token(KEY_SPECIALS, &[',', ' '])?;
        if p.tags.insert(key, value).is_some() {
            return Err(PointError::MalformedLine("duplicate tag"));
        }
        sep = s.next().ok_or(PointError::MalformedLine("missing fields"))?;
    }
    loop {
        let key = s.token(KEY_SPECIALS, &['=', ',', ' '])?;
        if key.is_empty() || s.next() != Some('=') {
            return Err(PointError::MalformedLine("field"));
        }
        let raw: String = std::iter::from_fn(|| s.chars.next_if(|c| *c != ',' && *c != ' ')).collect();
        let value: f64 = raw.parse().map_err(|_| PointError::MalformedLine("field value"))?;
        if !value.is_finite() {
            return Err(PointError::MalformedLine("non-finite field value"));
        }
        if p.fields.insert(key, value).is_some() {
            return Err(PointError::MalformedLine("duplicate field"));
        }
        match s.next() {
            Some(',') => continue,
            Some(' ') => break,
            _ => return Err(PointError::MalformedLine("missing timestamp")),
        }
    }
    let ts: String = s.chars.collect();
    if ts.is_empty() || !ts.bytes().all(|b| b.is_ascii_digit()) {
        return Err(PointError::MalformedLine("timestamp"));
    }
    p.ts_ns = ts.parse().map_err(|_| PointError::MalformedLine("timestamp range"))?;
    Ok(p)
}
