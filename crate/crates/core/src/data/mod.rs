//! Embedding datasets with codec-parameter labels.

pub mod embfile;
pub mod manifest;
pub mod scaler;
pub mod synth;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_TASKS;
use crate::tensor::Tensor;

pub use manifest::{load_manifest, write_manifest, EmbeddingStorage};
pub use scaler::LabelScaler;
pub use synth::{gen_synth, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetType {
    Closed,
    Open,
}

/// Regression targets, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "SR")]
    SampleRate,
    #[serde(rename = "BPS")]
    Bitrate,
    #[serde(rename = "Q")]
    Quantizers,
}

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [Task::SampleRate, Task::Bitrate, Task::Quantizers];

    pub fn name(self) -> &'static str {
        match self {
            Task::SampleRate => "SR",
            Task::Bitrate => "BPS",
            Task::Quantizers => "Q",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Task::SampleRate => "kHz",
            Task::Bitrate => "kbps",
            Task::Quantizers => "count",
        }
    }

    /// Native units (Hz, bit/s, count) to reporting units.
    pub fn to_reporting(self, native: f64) -> f64 {
        match self {
            Task::SampleRate | Task::Bitrate => native / 1000.0,
            Task::Quantizers => native,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: Vec<f32>,
    pub sr_hz: f64,
    pub bps: f64,
    pub q: u32,
    pub codec_name: String,
    pub split: Split,
    pub set_type: SetType,
}

impl EmbeddingRecord {
    /// `[sr_hz, bps, q]`.
    pub fn labels(&self) -> [f64; NUM_TASKS] {
        [self.sr_hz, self.bps, self.q as f64]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.sr_hz) || !positive(self.bps) || self.q == 0 {
            return Err(Error::Record(format!(
                "record {}: labels must be positive (sr_hz={}, bps={}, q={})",
                self.id, self.sr_hz, self.bps, self.q
            )));
        }
        if self.embedding.is_empty() {
            return Err(Error::Record(format!(
                "record {}: empty embedding",
                self.id
            )));
        }
        if let Some(i) = self.embedding.iter().position(|v| !v.is_finite()) {
            return Err(Error::Record(format!(
                "record {}: non-finite embedding value at index {i}",
                self.id
            )));
        }
        if self.set_type == SetType::Open && self.split != Split::Test {
            return Err(Error::Protocol(format!(
                "record {}: open-set records may only appear in the test split",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub closed: usize,
    pub open: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<EmbeddingRecord>,
}

impl Dataset {
    /// Validates every record, dimension consistency and id uniqueness.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        let dim = records.first().map(|r| r.embedding.len());
        for r in &records {
            r.validate()?;
            if Some(r.embedding.len()) != dim {
                return Err(Error::Schema(format!(
                    "record {} has dimension {}, dataset has {}",
                    r.id,
                    r.embedding.len(),
                    dim.unwrap_or(0)
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Schema(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Embedding dimension, `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.embedding.len())
    }

    pub fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for r in &self.records {
            match r.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
            match r.set_type {
                SetType::Closed => c.closed += 1,
                SetType::Open => c.open += 1,
            }
        }
        c
    }

    pub fn split(&self, split: Split) -> Vec<&EmbeddingRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Stacks embeddings into a `[n, d]` tensor.
pub fn features(records: &[&EmbeddingRecord]) -> Result<Tensor> {
    let dim = records
        .first()
        .map(|r| r.embedding.len())
        .ok_or_else(|| Error::Usage("no records to stack".into()))?;
    let data = records
        .iter()
        .flat_map(|r| r.embedding.iter().map(|&v| v as f64))
        .collect();
    Tensor::new(vec![records.len(), dim], data)
}
