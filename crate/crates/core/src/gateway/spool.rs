//! Durable FIFO of unpublished telemetry payloads.
//!
//! One file per message, `<seq:020>.json`, holding the exact payload. The
//! next sequence number is kept in `next_seq` so numbering never restarts,
//! even after the spool drains.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

const NEXT_SEQ: &str = "next_seq";

#[derive(Debug)]
pub struct Spool {
    dir: PathBuf,
    capacity: usize,
    queue: VecDeque<u64>,
    next_seq: u64,
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> io::Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, dir.join(name))
}

fn file_name(seq: u64) -> String {
    format!("{seq:020}.json")
}

fn parse_name(name: &str) -> Option<u64> {
    let stem = name.strip_suffix(".json")?;
    (stem.len() == 20 && stem.bytes().all(|b| b.is_ascii_digit()))
        .then(|| stem.parse().ok())
        .flatten()
}

impl Spool {
    pub fn open(dir: impl Into<PathBuf>, capacity: usize) -> io::Result<Self> {
        let dir = dir.into();
        if capacity == 0 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "spool capacity must be positive",
            ));
        }
        fs::create_dir_all(&dir)?;
        let mut queue = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if let Some(seq) = entry.file_name().to_str().and_then(parse_name) {
                queue.push(seq);
            }
        }
        queue.sort_unstable();
        let recorded = match fs::read_to_string(dir.join(NEXT_SEQ)) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "corrupt next_seq"))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 1,
            Err(e) => return Err(e),
        };
        let next_seq = queue.last().map_or(recorded, |last| recorded.max(last + 1)).max(1);
        Ok(Spool {
            dir,
            capacity,
            queue: queue.into(),
            next_seq,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sequence number the next append will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn seqs(&self) -> impl Iterator<Item = u64> + '_ {
        self.queue.iter().copied()
    }

    /// Persist `payload` as message [`next_seq`](Self::next_seq). When the
    /// spool is full the oldest message is deleted first and its seq
    /// returned.
    pub fn append(&mut self, payload: &[u8]) -> io::Result<Option<u64>> {
        let mut dropped = None;
        if self.queue.len() >= self.capacity {
            let oldest = self.queue.pop_front().expect("capacity is positive");
            fs::remove_file(self.dir.join(file_name(oldest)))?;
            dropped = Some(oldest);
        }
        let seq = self.next_seq;
        write_atomic(&self.dir, &file_name(seq), payload)?;
        write_atomic(&self.dir, NEXT_SEQ, (seq + 1).to_string().as_bytes())?;
        self.queue.push_back(seq);
        self.next_seq = seq + 1;
        Ok(dropped)
    }

    pub fn head(&self) -> io::Result<Option<(u64, Vec<u8>)>> {
        match self.queue.front() {
            Some(&seq) => Ok(Some((seq, fs::read(self.dir.join(file_name(seq)))?))),
            None => Ok(None),
        }
    }

    /// Remove the acknowledged head. Returns false if `seq` is not the head.
    pub fn ack(&mut self, seq: u64) -> io::Result<bool> {
        if self.queue.front() != Some(&seq) {
            return Ok(false);
        }
        fs::remove_file(self.dir.join(file_name(seq)))?;
        self.queue.pop_front();
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Spool::open(dir.path(), 10).unwrap();
        assert_eq!(s.next_seq(), 1);
        for i in 0..7 {
            s.append(format!("m{i}").as_bytes()).unwrap();
        }
        assert_eq!(s.head().unwrap().unwrap(), (1, b"m0".to_vec()));
        assert!(!s.ack(2).unwrap());
        assert!(s.ack(1).unwrap());
        assert!(s.ack(2).unwrap());
        drop(s);
        let s = Spool::open(dir.path(), 10).unwrap();
        assert_eq!(s.seqs().collect::<Vec<_>>(), [3, 4, 5, 6, 7]);
        assert_eq!(s.next_seq(), 8);
        assert!(dir.path().join("00000000000000000003.json").exists());
    }

    #[test]
    fn seq_survives_drain() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Spool::open(dir.path(), 4).unwrap();
        s.append(b"a").unwrap();
        s.ack(1).unwrap();
        drop(s);
        let s = Spool::open(dir.path(), 4).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.next_seq(), 2);
    }

    #[test]
    fn overflow_drops_oldest_first() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Spool::open(dir.path(), 10).unwrap();
        let dropped: Vec<_> = (0..12).filter_map(|_| s.append(b"x").unwrap()).collect();
        assert_eq!(dropped, [1, 2]);
        assert_eq!(s.len(), 10);
        assert_eq!(s.head().unwrap().unwrap().0, 3);
    }

    #[test]
    fn stray_files_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.json"), b"{}").unwrap();
        fs::write(dir.path().join(".00000000000000000009.json.tmp"), b"{}").unwrap();
        let s = Spool::open(dir.path(), 3).unwrap();
        assert!(s.is_empty());
        assert!(Spool::open(dir.path(), 0).is_err());
    }
}
