use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};

use super::{RawEvent, SourceTag};
use crate::error::{Error, Result};

/// Click events of one session and whether the session ended in a purchase.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub events: Vec<RawEvent>,
    pub bought: bool,
}

impl Session {
    pub fn label(&self) -> usize {
        usize::from(self.bought)
    }
}

/// Parsed click/buy logs keyed by session id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecsysLog {
    pub sessions: BTreeMap<String, Session>,
    pub skipped_click_rows: usize,
    pub skipped_buy_rows: usize,
}

/// Parses an ISO-8601 / RFC 3339 instant into epoch seconds.
pub fn parse_timestamp(s: &str) -> Result<f64> {
    let dt =
        DateTime::parse_from_rfc3339(s.trim()).map_err(|e| Error::Parse(format!("timestamp {s:?}: {e}")))?;
    Ok(dt.timestamp_millis() as f64 / 1000.0)
}

/// Formats epoch seconds as `YYYY-MM-DDTHH:MM:SS.sssZ`.
pub fn format_timestamp(epoch_seconds: f64) -> String {
    let millis = (epoch_seconds * 1000.0).round() as i64;
    DateTime::<Utc>::from_timestamp_millis(millis)
        .expect("timestamp in range")
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Event key of a click: its category, or the item id when the category is
/// empty.
pub fn click_key(item: &str, category: &str) -> String {
    if category.trim().is_empty() {
        format!("item:{}", item.trim())
    } else {
        format!("cat:{}", category.trim())
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r)
}

/// Reads click (`session,timestamp,item,category`) and buy
/// (`session,timestamp,item,price,quantity`) files. Malformed rows are
/// skipped and counted.
pub fn parse_recsys(clicks_path: impl AsRef<Path>, buys_path: impl AsRef<Path>) -> Result<RecsysLog> {
    let clicks = open(clicks_path.as_ref())?;
    let buys = open(buys_path.as_ref())?;
    parse_recsys_readers(clicks, buys)
}

pub fn parse_recsys_readers<C: Read, B: Read>(clicks: C, buys: B) -> Result<RecsysLog> {
    let mut log = RecsysLog::default();
    let mut events: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    for record in reader(clicks).records() {
        let Ok(rec) = record else {
            log.skipped_click_rows += 1;
            continue;
        };
        if rec.len() != 4
            || rec[0].trim().is_empty()
            || (rec[2].trim().is_empty() && rec[3].trim().is_empty())
        {
            log.skipped_click_rows += 1;
            continue;
        }
        let Ok(timestamp) = parse_timestamp(&rec[1]) else {
            log.skipped_click_rows += 1;
            continue;
        };
        let session_id = rec[0].trim().to_string();
        events.entry(session_id.clone()).or_default().push(RawEvent {
            session_id,
            timestamp,
            key: click_key(&rec[2], &rec[3]),
            source: SourceTag::Click,
        });
    }
    let mut bought = std::collections::BTreeSet::new();
    for record in reader(buys).records() {
        let Ok(rec) = record else {
            log.skipped_buy_rows += 1;
            continue;
        };
        if rec.len() != 5 || rec[0].trim().is_empty() || parse_timestamp(&rec[1]).is_err() {
            log.skipped_buy_rows += 1;
            continue;
        }
        bought.insert(rec[0].trim().to_string());
    }
    for (id, mut evs) in events {
        evs.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let b = bought.contains(&id);
        log.sessions.insert(
            id,
            Session {
                events: evs,
                bought: b,
            },
        );
    }
    Ok(log)
}
