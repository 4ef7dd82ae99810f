//! Episodic memory: historical maximum return per (state key, action).
//!
//! Transitions are buffered during an episode and only written to the
//! table once the buffer is sealed. Stored values never decrease.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{CanonicalKey, CANONICAL_FORM_VERSION};
use crate::gridworld::Action;
use crate::scalar::Scalar;

pub const MEMORY_FORMAT: &str = "aec-episodic-memory";
pub const MEMORY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("episode buffer is sealed")]
    Sealed,
    #[error("episode buffer must be sealed before commit")]
    NotSealed,
    #[error("discount mismatch: memory uses {memory}, commit used {given}")]
    GammaMismatch { memory: String, given: String },
    #[error("canonical form version mismatch: {ours} vs {theirs}")]
    CanonicalForm { ours: u32, theirs: u32 },
    #[error("{path}: line {line}: {message}")]
    Load {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord<S> {
    pub t: usize,
    pub key: CanonicalKey,
    pub action: Action,
    pub reward: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBuffer<S> {
    records: Vec<TransitionRecord<S>>,
    sealed: bool,
}

impl<S> Default for EpisodeBuffer<S> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            sealed: false,
        }
    }
}

impl<S: Scalar> EpisodeBuffer<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, key: CanonicalKey, action: Action, reward: S) -> Result<(), MemoryError> {
        if self.sealed {
            return Err(MemoryError::Sealed);
        }
        let t = self.records.len();
        self.records.push(TransitionRecord { t, key, action, reward });
        Ok(())
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn records(&self) -> &[TransitionRecord<S>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Discounted return-to-go for every record, in record order:
    /// `R_t = r_t + gamma * R_{t+1}` with the last record's return equal to
    /// its reward.
    pub fn compute_returns(&self, gamma: S) -> Result<Vec<(CanonicalKey, Action, S)>, MemoryError> {
        if !self.sealed {
            return Err(MemoryError::NotSealed);
        }
        let mut out = Vec::with_capacity(self.records.len());
        let mut ret = S::zero();
        for (i, rec) in self.records.iter().enumerate().rev() {
            ret = if i + 1 == self.records.len() {
                rec.reward
            } else {
                rec.reward + gamma * ret
            };
            out.push((rec.key.clone(), rec.action, ret));
        }
        out.reverse();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryMetadata<S> {
    pub format: String,
    pub version: u32,
    pub canonical_form: u32,
    pub task: String,
    pub gamma: S,
    /// Unix seconds; left empty for reproducible runs.
    pub created_unix: Option<u64>,
    /// Tasks whose memories were merged in.
    #[serde(default)]
    pub imported_from: Vec<String>,
}

impl<S: Scalar> MemoryMetadata<S> {
    pub fn new(task: impl Into<String>, gamma: S) -> Self {
        Self {
            format: MEMORY_FORMAT.into(),
            version: MEMORY_FORMAT_VERSION,
            canonical_form: CANONICAL_FORM_VERSION,
            task: task.into(),
            gamma,
            created_unix: None,
            imported_from: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicEntry<S> {
    pub key: CanonicalKey,
    pub values: BTreeMap<Action, S>,
    /// Number of commits that wrote each action's value.
    pub visits: BTreeMap<Action, u64>,
    /// Commit sequence number of the last write, for eviction.
    pub last_write: u64,
}

impl<S: Scalar> EpisodicEntry<S> {
    /// Highest value, first action in the fixed order on ties.
    pub fn best(&self) -> Option<(Action, S)> {
        let mut best: Option<(Action, S)> = None;
        for (&a, &v) in &self.values {
            match best {
                Some((_, bv)) if v.partial_cmp(&bv) != Some(std::cmp::Ordering::Greater) => {}
                _ => best = Some((a, v)),
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitStats {
    pub inserts: usize,
    pub raises: usize,
    pub noops: usize,
    pub evictions: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStats {
    pub new_keys: usize,
    pub new_pairs: usize,
    pub raised: usize,
    pub unchanged: usize,
}

/// Read access used by the controller.
pub trait ValueStore<S> {
    fn best_action(&self, key: &CanonicalKey) -> Option<(Action, S)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory<S> {
    meta: MemoryMetadata<S>,
    entries: HashMap<CanonicalKey, EpisodicEntry<S>>,
    capacity: Option<usize>,
    seq: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine<S> {
    #[serde(flatten)]
    meta: MemoryMetadata<S>,
    entries: usize,
    seq: u64,
}

#[derive(Serialize, Deserialize)]
struct ActionLine<S> {
    action: Action,
    value: S,
    visits: u64,
}

#[derive(Serialize, Deserialize)]
struct EntryLine<S> {
    key: CanonicalKey,
    last_write: u64,
    actions: Vec<ActionLine<S>>,
}

impl<S: Scalar> EpisodicMemory<S> {
    pub fn new(meta: MemoryMetadata<S>) -> Self {
        Self {
            meta,
            entries: HashMap::new(),
            capacity: None,
            seq: 0,
        }
    }

    /// Caps the number of keys; the least recently written key is evicted.
    pub fn with_capacity_limit(mut self, cap: usize) -> Self {
        self.capacity = Some(cap.max(1));
        self
    }

    pub fn metadata(&self) -> &MemoryMetadata<S> {
        &self.meta
    }

    pub fn gamma(&self) -> S {
        self.meta.gamma
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of stored (key, action) pairs.
    pub fn pair_count(&self) -> usize {
        self.entries.values().map(|e| e.values.len()).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = &EpisodicEntry<S>> {
        self.entries.values()
    }

    /// Entries ordered by key.
    pub fn sorted_entries(&self) -> Vec<&EpisodicEntry<S>> {
        let mut v: Vec<_> = self.entries.values().collect();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }

    pub fn lookup(&self, key: &CanonicalKey) -> Option<&EpisodicEntry<S>> {
        self.entries.get(key)
    }

    pub fn best_action(&self, key: &CanonicalKey) -> Option<(Action, S)> {
        self.lookup(key).and_then(EpisodicEntry::best)
    }

    /// Max-updates one (key, action) pair. Returns whether it was
    /// inserted, raised, or left alone.
    pub fn update(&mut self, key: &CanonicalKey, action: Action, ret: S) -> CommitStats {
        let mut stats = CommitStats::default();
        let seq = self.seq + 1;
        let entry = self.entries.entry(key.clone()).or_insert_with(|| EpisodicEntry {
            key: key.clone(),
            values: BTreeMap::new(),
            visits: BTreeMap::new(),
            last_write: seq,
        });
        let wrote = match entry.values.get_mut(&action) {
            None => {
                entry.values.insert(action, ret);
                stats.inserts = 1;
                true
            }
            Some(v) if ret > *v => {
                *v = ret;
                stats.raises = 1;
                true
            }
            Some(_) => {
                stats.noops = 1;
                false
            }
        };
        if wrote {
            *entry.visits.entry(action).or_insert(0) += 1;
            entry.last_write = seq;
            self.seq = seq;
            stats.evictions = self.enforce_capacity(Some(key));
        }
        stats
    }

    fn enforce_capacity(&mut self, keep: Option<&CanonicalKey>) -> usize {
        let Some(cap) = self.capacity else { return 0 };
        let mut evicted = 0;
        while self.entries.len() > cap {
            let victim = self
                .entries
                .values()
                .filter(|e| Some(&e.key) != keep)
                .min_by(|a, b| a.last_write.cmp(&b.last_write).then_with(|| a.key.cmp(&b.key)))
                .map(|e| e.key.clone());
            match victim {
                Some(k) => {
                    self.entries.remove(&k);
                    evicted += 1;
                }
                None => break,
            }
        }
        evicted
    }

    /// Writes a sealed episode into the table.
    pub fn commit(&mut self, buffer: &EpisodeBuffer<S>, gamma: S) -> Result<CommitStats, MemoryError> {
        if gamma != self.meta.gamma {
            return Err(MemoryError::GammaMismatch {
                memory: format!("{:?}", self.meta.gamma),
                given: format!("{gamma:?}"),
            });
        }
        let returns = buffer.compute_returns(gamma)?;
        let mut total = CommitStats::default();
        for (key, action, ret) in returns {
            let s = self.update(&key, action, ret);
            total.inserts += s.inserts;
            total.raises += s.raises;
            total.noops += s.noops;
            total.evictions += s.evictions;
        }
        Ok(total)
    }

    /// Unions another memory into this one, keeping the larger value on
    /// colliding pairs.
    pub fn import_foreign(&mut self, other: &EpisodicMemory<S>) -> Result<MergeStats, MemoryError> {
        if other.meta.canonical_form != self.meta.canonical_form {
            return Err(MemoryError::CanonicalForm {
                ours: self.meta.canonical_form,
                theirs: other.meta.canonical_form,
            });
        }
        let mut stats = MergeStats::default();
        for theirs in other.sorted_entries() {
            let seq = self.seq + 1;
            let mine = self.entries.entry(theirs.key.clone()).or_insert_with(|| {
                stats.new_keys += 1;
                EpisodicEntry {
                    key: theirs.key.clone(),
                    values: BTreeMap::new(),
                    visits: BTreeMap::new(),
                    last_write: seq,
                }
            });
            let mut wrote = false;
            for (&a, &v) in &theirs.values {
                let visits = theirs.visits.get(&a).copied().unwrap_or(1);
                match mine.values.get_mut(&a) {
                    None => {
                        mine.values.insert(a, v);
                        mine.visits.insert(a, visits);
                        stats.new_pairs += 1;
                        wrote = true;
                    }
                    Some(cur) => {
                        if v > *cur {
                            *cur = v;
                            stats.raised += 1;
                            wrote = true;
                        } else {
                            stats.unchanged += 1;
                        }
                        *mine.visits.entry(a).or_insert(0) += visits;
                    }
                }
            }
            if wrote {
                mine.last_write = seq;
                self.seq = seq;
            }
        }
        let mut origins = vec![other.meta.task.clone()];
        origins.extend(other.meta.imported_from.iter().cloned());
        for o in origins {
            if !self.meta.imported_from.contains(&o) {
                self.meta.imported_from.push(o);
            }
        }
        self.enforce_capacity(None);
        Ok(stats)
    }

    /// Values only, for comparisons that should ignore bookkeeping.
    pub fn value_table(&self) -> BTreeMap<(CanonicalKey, Action), S> {
        self.entries
            .values()
            .flat_map(|e| e.values.iter().map(move |(a, v)| ((e.key.clone(), *a), *v)))
            .collect()
    }
}

impl<S: Scalar> ValueStore<S> for EpisodicMemory<S> {
    fn best_action(&self, key: &CanonicalKey) -> Option<(Action, S)> {
        EpisodicMemory::best_action(self, key)
    }
}

impl<S: Scalar + Serialize + DeserializeOwned> EpisodicMemory<S> {
    /// Header line plus one JSON line per key, keys sorted.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = HeaderLine {
            meta: self.meta.clone(),
            entries: self.entries.len(),
            seq: self.seq,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for e in self.sorted_entries() {
            let line = EntryLine {
                key: e.key.clone(),
                last_write: e.last_write,
                actions: e
                    .values
                    .iter()
                    .map(|(&action, &value)| ActionLine {
                        action,
                        value,
                        visits: e.visits.get(&action).copied().unwrap_or(1),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self, MemoryError> {
        let err = |line: usize, message: String| MemoryError::Load {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let header: HeaderLine<S> =
            serde_json::from_str(first).map_err(|e| err(1, format!("bad header: {e}")))?;
        if header.meta.format != MEMORY_FORMAT || header.meta.version != MEMORY_FORMAT_VERSION {
            return Err(err(
                1,
                format!(
                    "unsupported format {} v{} (expected {MEMORY_FORMAT} v{MEMORY_FORMAT_VERSION})",
                    header.meta.format, header.meta.version
                ),
            ));
        }
        if header.meta.canonical_form != CANONICAL_FORM_VERSION {
            return Err(err(
                1,
                format!("canonical form {} is not {CANONICAL_FORM_VERSION}", header.meta.canonical_form),
            ));
        }
        let mut mem = EpisodicMemory::new(header.meta);
        mem.seq = header.seq;
        let mut last_valid = 1;
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let entry: EntryLine<S> = serde_json::from_str(line)
                .map_err(|e| err(n, format!("corrupt entry ({e}); last valid line {last_valid}")))?;
            CanonicalKey::parse(entry.key.as_str())
                .map_err(|e| err(n, format!("bad key: {e}; last valid line {last_valid}")))?;
            if entry.actions.is_empty() {
                return Err(err(n, format!("entry without actions; last valid line {last_valid}")));
            }
            let mut values = BTreeMap::new();
            let mut visits = BTreeMap::new();
            for a in entry.actions {
                values.insert(a.action, a.value);
                visits.insert(a.action, a.visits.max(1));
            }
            if mem.entries.contains_key(&entry.key) {
                return Err(err(n, format!("duplicate key; last valid line {last_valid}")));
            }
            mem.entries.insert(
                entry.key.clone(),
                EpisodicEntry {
                    key: entry.key,
                    values,
                    visits,
                    last_write: entry.last_write,
                },
            );
            last_valid = n;
        }
        if mem.entries.len() != header.entries {
            return Err(err(
                last_valid,
                format!(
                    "truncated: header announces {} entries, found {}; last valid line {last_valid}",
                    header.entries,
                    mem.entries.len()
                ),
            ));
        }
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let io = |source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text, &path.display().to_string())
    }
}

/// Single-writer, many-reader handle. Commits take the write lock for the
/// whole episode so readers never observe a partial commit.
#[derive(Debug, Clone)]
pub struct SharedMemory<S>(Arc<RwLock<EpisodicMemory<S>>>);

impl<S: Scalar> SharedMemory<S> {
    pub fn new(memory: EpisodicMemory<S>) -> Self {
        Self(Arc::new(RwLock::new(memory)))
    }

    pub fn commit(&self, buffer: &EpisodeBuffer<S>, gamma: S) -> Result<CommitStats, MemoryError> {
        self.0.write().expect("memory lock").commit(buffer, gamma)
    }

    pub fn snapshot(&self) -> EpisodicMemory<S> {
        self.0.read().expect("memory lock").clone()
    }

    pub fn with<R>(&self, f: impl FnOnce(&EpisodicMemory<S>) -> R) -> R {
        f(&self.0.read().expect("memory lock"))
    }
}

impl<S: Scalar> ValueStore<S> for SharedMemory<S> {
    fn best_action(&self, key: &CanonicalKey) -> Option<(Action, S)> {
        self.0.read().expect("memory lock").best_action(key)
    }
}
