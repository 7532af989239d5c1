//! Persistent kernel performance store.
//!
//! One record per line:
//! `opcode|shape(csv)|split_dim|sword|sched_type|block_threads|extra|cost_us|synthetic`
//! with `-` for an absent `extra`. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use crate::error::PerfLibError;
use crate::schedule::{SchedType, Schedule};

pub const HEADER: &str = "# opcode|shape|split_dim|sword|sched_type|block_threads|extra|cost_us|synthetic";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PerfKey {
    pub opcode: String,
    pub shape: Vec<usize>,
    pub split_dim: usize,
    pub sword: usize,
    pub sched_type: SchedType,
    pub block_threads: usize,
    /// reduce_warps or trans_warps.
    pub extra: Option<usize>,
}

impl PerfKey {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            split_dim: self.split_dim,
            sword: self.sword,
            sched_type: self.sched_type,
        }
    }

    pub fn is_valid(&self) -> bool {
        (32..=1024).contains(&self.block_threads) && self.block_threads % 32 == 0
    }
}

impl fmt::Display for PerfKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let extra = self.extra.map_or("-".to_string(), |e| e.to_string());
        write!(
            f,
            "{}|{}|{}|{}|{}|{}|{}",
            self.opcode,
            shape.join(","),
            self.split_dim,
            self.sword,
            self.sched_type.name(),
            self.block_threads,
            extra
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfEntry {
    pub cost_us: f64,
    /// Produced by the cost model rather than measured.
    pub synthetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfStats {
    pub entries: usize,
    pub synthetic: usize,
    pub hits: usize,
    pub misses: usize,
}

impl PerfStats {
    pub fn synthetic_fraction(&self) -> f64 {
        if self.entries == 0 {
            0.0
        } else {
            self.synthetic as f64 / self.entries as f64
        }
    }
}

impl fmt::Display for PerfStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entries: {}", self.entries)?;
        writeln!(f, "synthetic: {}", self.synthetic)?;
        writeln!(f, "synthetic_fraction: {:.4}", self.synthetic_fraction())?;
        writeln!(f, "hits: {}", self.hits)?;
        write!(f, "misses: {}", self.misses)
    }
}

/// Concurrent lookups, serialized inserts.
#[derive(Debug, Default)]
pub struct PerfLibrary {
    entries: RwLock<BTreeMap<PerfKey, PerfEntry>>,
    storage_path: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Clone for PerfLibrary {
    fn clone(&self) -> Self {
        PerfLibrary {
            entries: RwLock::new(self.snapshot()),
            storage_path: self.storage_path.clone(),
            hits: AtomicUsize::new(self.hits.load(Ordering::Relaxed)),
            misses: AtomicUsize::new(self.misses.load(Ordering::Relaxed)),
        }
    }
}

impl PerfLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists, else starts empty; `save` writes back there.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PerfLibError> {
        let path = path.as_ref();
        let mut lib = if path.exists() {
            Self::load(path)?
        } else {
            Self::new()
        };
        lib.storage_path = Some(path.to_path_buf());
        Ok(lib)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PerfLibError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PerfLibError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, entry) = parse_record(line).map_err(|message| PerfLibError::Malformed {
                line: i + 1,
                message,
            })?;
            entries.insert(key, entry);
        }
        Ok(PerfLibrary {
            entries: RwLock::new(entries),
            ..Self::default()
        })
    }

    pub fn storage_path(&self) -> Option<&Path> {
        self.storage_path.as_deref()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (key, entry) in self.read().iter() {
            out.push_str(&format!("{key}|{}|{}\n", entry.cost_us, entry.synthetic));
        }
        out
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<(), PerfLibError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Writes to the path given to [`PerfLibrary::open`], if any.
    pub fn save(&self) -> Result<(), PerfLibError> {
        match &self.storage_path {
            Some(p) => self.store(p),
            None => Ok(()),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<PerfKey, PerfEntry>> {
        self.entries.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, BTreeMap<PerfKey, PerfEntry>> {
        self.entries.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> BTreeMap<PerfKey, PerfEntry> {
        self.read().clone()
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &PerfKey) -> Option<PerfEntry> {
        self.read().get(key).copied()
    }

    pub fn insert(&self, key: PerfKey, entry: PerfEntry) {
        self.write().insert(key, entry);
    }

    /// Returns the stored cost, or inserts `estimate()` as a synthetic entry.
    pub fn get_or_insert_with(&self, key: &PerfKey, estimate: impl FnOnce() -> f64) -> f64 {
        if let Some(e) = self.get(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return e.cost_us;
        }
        let mut map = self.write();
        if let Some(e) = map.get(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return e.cost_us;
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let cost_us = estimate();
        map.insert(
            key.clone(),
            PerfEntry {
                cost_us,
                synthetic: true,
            },
        );
        cost_us
    }

    /// Union; on conflict keep the measured entry, else the cheaper one.
    pub fn merge(&self, other: &PerfLibrary) {
        let theirs = other.snapshot();
        let mut map = self.write();
        for (key, entry) in theirs {
            match map.get(&key) {
                None => {
                    map.insert(key, entry);
                }
                Some(mine) => {
                    if let Some(winner) = merge_entries(*mine, entry) {
                        map.insert(key, winner);
                    }
                }
            }
        }
    }

    pub fn stats(&self) -> PerfStats {
        let map = self.read();
        PerfStats {
            entries: map.len(),
            synthetic: map.values().filter(|e| e.synthetic).count(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

/// `Some(replacement)` when `theirs` should displace `mine`.
fn merge_entries(mine: PerfEntry, theirs: PerfEntry) -> Option<PerfEntry> {
    match (mine.synthetic, theirs.synthetic) {
        (true, false) => Some(theirs),
        (false, true) => None,
        _ if theirs.cost_us < mine.cost_us => Some(theirs),
        _ => None,
    }
}

fn parse_record(line: &str) -> Result<(PerfKey, PerfEntry), String> {
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 9 {
        return Err(format!("expected 9 `|`-separated fields, found {}", fields.len()));
    }
    let int = |s: &str, what: &str| -> Result<usize, String> {
        s.trim()
            .parse()
            .map_err(|_| format!("bad {what} `{s}`"))
    };
    let opcode = fields[0].trim();
    if opcode.is_empty() {
        return Err("empty opcode".into());
    }
    let shape = if fields[1].trim().is_empty() {
        Vec::new()
    } else {
        fields[1]
            .split(',')
            .map(|d| int(d, "shape extent"))
            .collect::<Result<_, _>>()?
    };
    let extra = match fields[6].trim() {
        "-" => None,
        s => Some(int(s, "extra")?),
    };
    let cost_us: f64 = fields[7]
        .trim()
        .parse()
        .map_err(|_| format!("bad cost_us `{}`", fields[7]))?;
    if !cost_us.is_finite() || cost_us < 0.0 {
        return Err(format!("cost_us must be finite and non-negative, got {cost_us}"));
    }
    let synthetic = match fields[8].trim() {
        "true" => true,
        "false" => false,
        s => return Err(format!("bad synthetic flag `{s}`")),
    };
    let key = PerfKey {
        opcode: opcode.to_string(),
        shape,
        split_dim: int(fields[2], "split_dim")?,
        sword: int(fields[3], "sword")?,
        sched_type: fields[4].trim().parse()?,
        block_threads: int(fields[5], "block_threads")?,
        extra,
    };
    if !key.is_valid() {
        return Err(format!("block_threads {} is not a multiple of 32 in [32, 1024]", key.block_threads));
    }
    Ok((key, PerfEntry { cost_us, synthetic }))
}
