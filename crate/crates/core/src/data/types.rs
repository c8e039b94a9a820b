use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a raw activity came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Click,
    Buy,
    Search,
    Mail,
    Content,
    Ad,
    SiteVisit,
    Other,
}

/// One timestamped activity before vocabulary mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub session_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: f64,
    pub key: String,
    pub source: SourceTag,
}

/// A labeled, time-ordered sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTrail {
    pub id: String,
    pub label: usize,
    /// Seconds since the Unix epoch at which the prediction is served.
    pub prediction_time: f64,
    pub event_ids: Vec<usize>,
    /// Event timestamps in epoch seconds, non-decreasing.
    pub timestamps: Vec<f64>,
}

impl UserTrail {
    pub fn len(&self) -> usize {
        self.event_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_ids.is_empty()
    }

    /// The trail restricted to its `max_len` most recent events.
    pub fn most_recent(&self, max_len: usize) -> UserTrail {
        let skip = self.len().saturating_sub(max_len);
        UserTrail {
            id: self.id.clone(),
            label: self.label,
            prediction_time: self.prediction_time,
            event_ids: self.event_ids[skip..].to_vec(),
            timestamps: self.timestamps[skip..].to_vec(),
        }
    }

    /// Checks length bounds, ordering and label range.
    pub fn validate(&self, max_len: usize, num_classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptySequence(format!("trail {} has no events", self.id)));
        }
        if self.event_ids.len() != self.timestamps.len() {
            return Err(Error::Contract(format!(
                "trail {} has {} ids but {} timestamps",
                self.id,
                self.event_ids.len(),
                self.timestamps.len()
            )));
        }
        if self.len() > max_len {
            return Err(Error::Contract(format!(
                "trail {} has {} events, limit {max_len}",
                self.id,
                self.len()
            )));
        }
        if self.timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::DataOrdering(format!(
                "trail {} timestamps not sorted",
                self.id
            )));
        }
        if self.prediction_time < *self.timestamps.last().expect("non-empty") {
            return Err(Error::DataOrdering(format!(
                "trail {} prediction time precedes its last event",
                self.id
            )));
        }
        if self.label >= num_classes.max(2) {
            return Err(Error::Contract(format!(
                "trail {} label {} outside {} classes",
                self.id,
                self.label,
                num_classes.max(2)
            )));
        }
        Ok(())
    }
}
