use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::recsys::RecsysLog;
use super::{RawEvent, UserTrail};
use crate::error::{Error, Result};

/// Key reported for id 0.
pub const OOV_KEY: &str = "<OOV>";

/// Anything carrying a class label, where 0 means "no conversion".
pub trait Labeled {
    fn label(&self) -> usize;

    fn is_positive(&self) -> bool {
        self.label() != 0
    }
}

impl Labeled for UserTrail {
    fn label(&self) -> usize {
        self.label
    }
}

/// A labeled trail of raw events, before vocabulary mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrail {
    pub id: String,
    pub events: Vec<RawEvent>,
    pub label: usize,
    pub prediction_time: f64,
}

impl Labeled for RawTrail {
    fn label(&self) -> usize {
        self.label
    }
}

/// The prefix of `events` strictly before the first event whose key is
/// blacklisted; all of `events` when none is.
pub fn cut_at_retargeting<'a>(events: &'a [RawEvent], blacklist: &HashSet<String>) -> &'a [RawEvent] {
    let end = events
        .iter()
        .position(|e| blacklist.contains(&e.key))
        .unwrap_or(events.len());
    &events[..end]
}

/// Keeps every positive and a seeded uniform subset of negatives so that
/// positives make up `target_positive_rate` of the result. Never adds data:
/// when positives are already at or above the target, nothing changes.
/// Relative order is preserved.
pub fn downsample_negatives<T: Labeled + Clone>(
    trails: &[T],
    target_positive_rate: f64,
    seed: u64,
) -> Result<Vec<T>> {
    if !(target_positive_rate > 0.0 && target_positive_rate < 1.0) {
        return Err(Error::Config(format!(
            "target positive rate must lie in (0, 1), got {target_positive_rate}"
        )));
    }
    let positives = trails.iter().filter(|t| t.is_positive()).count();
    if positives == 0 {
        return Err(Error::Config("cannot downsample: no positive trails".into()));
    }
    let negatives: Vec<usize> = (0..trails.len()).filter(|&i| !trails[i].is_positive()).collect();
    let wanted = (positives as f64 * (1.0 - target_positive_rate) / target_positive_rate).round() as usize;
    if negatives.len() <= wanted {
        return Ok(trails.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; trails.len()];
    for i in sample(&mut rng, negatives.len(), wanted) {
        keep[negatives[i]] = true;
    }
    Ok(trails
        .iter()
        .enumerate()
        .filter(|(i, t)| t.is_positive() || keep[*i])
        .map(|(_, t)| t.clone())
        .collect())
}

/// Bijection between retained event keys and ids `1..`; id 0 is the
/// out-of-vocabulary bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    keys: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabRow {
    id: usize,
    key: String,
    count: usize,
}

impl Vocabulary {
    /// Keys with at least `min_count` occurrences get ids in order of
    /// descending frequency, then ascending key.
    pub fn from_counts(counts: &BTreeMap<String, usize>, min_count: usize) -> Self {
        let mut retained: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count.max(1))
            .map(|(k, &c)| (k, c))
            .collect();
        retained.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let oov: usize = counts
            .iter()
            .filter(|(_, &c)| c < min_count.max(1))
            .map(|(_, &c)| c)
            .sum();
        let mut keys = vec![OOV_KEY.to_string()];
        let mut cnts = vec![oov];
        for (k, c) in retained {
            keys.push(k.clone());
            cnts.push(c);
        }
        Self::from_parts(keys, cnts, min_count)
    }

    fn from_parts(keys: Vec<String>, counts: Vec<usize>, min_count: usize) -> Self {
        let index = keys
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, k)| (k.clone(), i))
            .collect();
        Self {
            keys,
            counts,
            index,
            min_count,
        }
    }

    /// Vocabulary with fixed key order (ids `1..=keys.len()`).
    pub fn from_keys(keys: Vec<String>, counts: Vec<usize>, oov_count: usize) -> Self {
        let mut all = vec![OOV_KEY.to_string()];
        all.extend(keys);
        let mut cnts = vec![oov_count];
        cnts.extend(counts);
        Self::from_parts(all, cnts, 1)
    }

    /// Number of ids, including the OOV id.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, key: &str) -> usize {
        self.index.get(key).copied().unwrap_or(0)
    }

    pub fn key(&self, id: usize) -> Option<&str> {
        self.keys.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// CSV with header `id,key,count`, one row per id.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (id, (key, &count)) in self.keys.iter().zip(&self.counts).enumerate() {
            w.serialize(VocabRow {
                id,
                key: key.clone(),
                count,
            })
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut keys = Vec::new();
        let mut counts = Vec::new();
        for (i, row) in csv::Reader::from_reader(text.as_bytes())
            .deserialize::<VocabRow>()
            .enumerate()
        {
            let row = row.map_err(|e| Error::Parse(format!("vocabulary row {i}: {e}")))?;
            if row.id != i {
                return Err(Error::Parse(format!("vocabulary ids not contiguous at row {i}")));
            }
            keys.push(row.key);
            counts.push(row.count);
        }
        if keys.is_empty() {
            return Err(Error::Parse("vocabulary file has no rows".into()));
        }
        Ok(Self::from_parts(keys, counts, 1))
    }
}

/// Counts event keys over `trails` and builds the vocabulary.
pub fn build_vocab(trails: &[RawTrail], min_count: usize) -> Vocabulary {
    let mut counts = BTreeMap::new();
    for e in trails.iter().flat_map(|t| &t.events) {
        *counts.entry(e.key.clone()).or_insert(0) += 1;
    }
    Vocabulary::from_counts(&counts, min_count)
}

/// Deterministic uniform value in `[0, 1)` for an id.
fn id_unit(id: &str, seed: u64) -> f64 {
    let digest = Sha256::digest(format!("{seed}:{id}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

/// Splits by a hash of each trail id: the same id always lands on the same
/// side for a given seed.
pub fn split_train_test(
    trails: Vec<UserTrail>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<UserTrail>, Vec<UserTrail>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    Ok(trails
        .into_iter()
        .partition(|t| id_unit(&t.id, seed) >= test_fraction))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Event keys that mark retargeting; trails are cut before the first one.
    pub blacklist: Vec<String>,
    /// Positive share to reach by dropping negatives; `None` keeps all.
    pub target_positive_rate: Option<f64>,
    pub min_count: usize,
    pub max_len: usize,
    pub test_fraction: f64,
    /// Keep at most this many sessions (lowest ids first) before anything
    /// else happens.
    pub max_sessions: Option<usize>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            blacklist: Vec::new(),
            target_positive_rate: Some(0.10),
            min_count: 1,
            max_len: 64,
            test_fraction: 0.2,
            max_sessions: None,
        }
    }
}

/// Counts reported by [`prepare`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub sessions: usize,
    pub skipped_click_rows: usize,
    pub skipped_buy_rows: usize,
    pub dropped_empty_after_cut: usize,
    pub cut_trails: usize,
    pub truncated_trails: usize,
    pub removed_by_downsampling: usize,
    pub trails: usize,
    pub positives: usize,
    pub negatives: usize,
    pub positive_rate: f64,
    pub vocab_size: usize,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Vec<UserTrail>,
    pub test: Vec<UserTrail>,
    pub vocab: Vocabulary,
    pub summary: PrepareSummary,
}

/// Maps raw events to ids, keeping the `max_len` most recent events.
pub fn to_user_trail(raw: &RawTrail, vocab: &Vocabulary, max_len: usize) -> UserTrail {
    let trail = UserTrail {
        id: raw.id.clone(),
        label: raw.label,
        prediction_time: raw.prediction_time,
        event_ids: raw.events.iter().map(|e| vocab.id(&e.key)).collect(),
        timestamps: raw.events.iter().map(|e| e.timestamp).collect(),
    };
    trail.most_recent(max_len)
}

/// parse output → cut → downsample → vocabulary → split.
pub fn prepare(log: &RecsysLog, config: &PrepareConfig, seed: u64) -> Result<PreparedData> {
    if config.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let blacklist: HashSet<String> = config.blacklist.iter().cloned().collect();
    let mut summary = PrepareSummary {
        skipped_click_rows: log.skipped_click_rows,
        skipped_buy_rows: log.skipped_buy_rows,
        ..PrepareSummary::default()
    };
    let limit = config.max_sessions.unwrap_or(usize::MAX);
    let mut raw = Vec::new();
    for (id, session) in log.sessions.iter().take(limit) {
        summary.sessions += 1;
        let kept = cut_at_retargeting(&session.events, &blacklist);
        if kept.len() < session.events.len() {
            summary.cut_trails += 1;
        }
        let Some(last) = kept.last() else {
            summary.dropped_empty_after_cut += 1;
            continue;
        };
        raw.push(RawTrail {
            id: id.clone(),
            events: kept.to_vec(),
            label: session.label(),
            prediction_time: last.timestamp,
        });
    }
    if let Some(rate) = config.target_positive_rate {
        let before = raw.len();
        raw = downsample_negatives(&raw, rate, seed)?;
        summary.removed_by_downsampling = before - raw.len();
    }
    let vocab = build_vocab(&raw, config.min_count);
    let trails: Vec<UserTrail> = raw
        .iter()
        .map(|r| {
            if r.events.len() > config.max_len {
                summary.truncated_trails += 1;
            }
            to_user_trail(r, &vocab, config.max_len)
        })
        .collect();
    for t in &trails {
        t.validate(config.max_len, 2)?;
    }
    summary.trails = trails.len();
    summary.positives = trails.iter().filter(|t| t.is_positive()).count();
    summary.negatives = summary.trails - summary.positives;
    summary.positive_rate = if summary.trails == 0 {
        0.0
    } else {
        summary.positives as f64 / summary.trails as f64
    };
    summary.vocab_size = vocab.len();
    let (train, test) = split_train_test(trails, config.test_fraction, seed)?;
    summary.train_size = train.len();
    summary.test_size = test.len();
    Ok(PreparedData {
        train,
        test,
        vocab,
        summary,
    })
}
