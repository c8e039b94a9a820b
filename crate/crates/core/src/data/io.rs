use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::UserTrail;
use crate::error::{Error, Result};

/// One line of a trails file. Events are `(vocab_id, epoch_seconds)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrailRecord {
    pub id: String,
    pub label: usize,
    pub prediction_time: f64,
    pub events: Vec<(usize, f64)>,
}

impl From<&UserTrail> for TrailRecord {
    fn from(t: &UserTrail) -> Self {
        Self {
            id: t.id.clone(),
            label: t.label,
            prediction_time: t.prediction_time,
            events: t
                .event_ids
                .iter()
                .copied()
                .zip(t.timestamps.iter().copied())
                .collect(),
        }
    }
}

impl From<TrailRecord> for UserTrail {
    fn from(r: TrailRecord) -> Self {
        let (event_ids, timestamps) = r.events.into_iter().unzip();
        Self {
            id: r.id,
            label: r.label,
            prediction_time: r.prediction_time,
            event_ids,
            timestamps,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_trails<W: Write>(mut w: W, trails: &[UserTrail]) -> Result<()> {
    for t in trails {
        let line = serde_json::to_string(&TrailRecord::from(t)).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Parse(e.to_string()))?;
    }
    Ok(())
}

pub fn read_trails<R: Read>(r: R) -> Result<Vec<UserTrail>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrailRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        out.push(rec.into());
    }
    Ok(out)
}

pub fn write_trails_file(path: impl AsRef<Path>, trails: &[UserTrail]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_trails(&mut buf, trails)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_trails_file(path: impl AsRef<Path>) -> Result<Vec<UserTrail>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trails(file)
}
