//! Trial storage, label binarization and synthetic data.

mod interchange;
mod labels;
mod synth;

pub use interchange::{decode, encode, read_interchange, write_interchange, MAGIC, VERSION};
pub(crate) use interchange::{frame, unframe};
pub use labels::{binarize_labels, Class, Dimension};
pub use synth::{synth_dataset, SynthConfig, SynthScheme};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::topology::{Channel, ChannelLayout, Modality, TopologyError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("not an interchange file (bad magic)")]
    BadMagic,
    #[error("unsupported interchange version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: need {expected} bytes, have {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("index and payload disagree: {0}")]
    IndexMismatch(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("rating {value} outside the {dataset:?} scale [{lo}, {hi}]")]
    RatingOutOfRange {
        value: f64,
        dataset: DatasetKind,
        lo: f64,
        hi: f64,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Layout(#[from] TopologyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which rating scale and binarization rule applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Deap,
    Dreamer,
}

impl DatasetKind {
    pub fn rating_range(self) -> (f64, f64) {
        match self {
            DatasetKind::Deap => (1.0, 9.0),
            DatasetKind::Dreamer => (1.0, 5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    pub modality: Modality,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub name: String,
    pub sample_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dataset: DatasetKind,
    pub source: String,
    pub channels: Vec<ChannelInfo>,
    pub channel_groups: Vec<GroupInfo>,
    pub label_names: Vec<String>,
    /// Leading seconds of every trial that carry no stimulus.
    pub baseline_seconds: f64,
}

/// One channel group of a trial: `rows` channels × `cols` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Block {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Raw ratings and one block per channel group, in group order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub subject: u32,
    pub trial: u32,
    pub ratings: Vec<f64>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trials: Vec<TrialRecord>,
}

impl Dataset {
    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        self.trials
            .iter()
            .map(|t| t.subject)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn group_channels(&self, group: &str) -> Vec<usize> {
        self.meta
            .channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// Channel layout at the given common sample rate.
    pub fn layout(&self, sample_rate: f64) -> Result<ChannelLayout, DataError> {
        let channels = self
            .meta
            .channels
            .iter()
            .map(|c| Channel {
                name: c.name.clone(),
                modality: c.modality,
            })
            .collect();
        Ok(ChannelLayout::new(channels, sample_rate)?)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let meta = &self.meta;
        let mut groups = BTreeSet::new();
        for g in &meta.channel_groups {
            if !(g.sample_rate > 0.0) || !groups.insert(g.name.as_str()) {
                return Err(DataError::Invalid(format!("bad channel group `{}`", g.name)));
            }
        }
        let mut names = BTreeSet::new();
        for c in &meta.channels {
            if !names.insert(c.name.as_str()) {
                return Err(DataError::Invalid(format!("duplicate channel `{}`", c.name)));
            }
            if !groups.contains(c.group.as_str()) {
                return Err(DataError::Invalid(format!(
                    "channel `{}` names unknown group `{}`",
                    c.name, c.group
                )));
            }
        }
        if !(meta.baseline_seconds >= 0.0) {
            return Err(DataError::Invalid("negative baseline".into()));
        }
        let (lo, hi) = meta.dataset.rating_range();
        for t in &self.trials {
            if t.ratings.len() != meta.label_names.len() {
                return Err(DataError::Invalid(format!(
                    "trial {}/{} has {} ratings for {} label names",
                    t.subject,
                    t.trial,
                    t.ratings.len(),
                    meta.label_names.len()
                )));
            }
            if let Some(&value) = t.ratings.iter().find(|r| !(lo..=hi).contains(*r)) {
                return Err(DataError::RatingOutOfRange {
                    value,
                    dataset: meta.dataset,
                    lo,
                    hi,
                });
            }
            if t.blocks.len() != meta.channel_groups.len() {
                return Err(DataError::Invalid(format!(
                    "trial {}/{} has {} blocks for {} channel groups",
                    t.subject,
                    t.trial,
                    t.blocks.len(),
                    meta.channel_groups.len()
                )));
            }
            for (b, g) in t.blocks.iter().zip(&meta.channel_groups) {
                let rows = self.group_channels(&g.name).len();
                if b.group != g.name || b.rows != rows || b.cols == 0 || b.data.len() != b.rows * b.cols {
                    return Err(DataError::Invalid(format!(
                        "trial {}/{}: block `{}` ({}×{}, {} values) does not match group `{}` with {} channels",
                        t.subject,
                        t.trial,
                        b.group,
                        b.rows,
                        b.cols,
                        b.data.len(),
                        g.name,
                        rows
                    )));
                }
            }
        }
        Ok(())
    }
}
