//! Records of which chunks each head selected, step by step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PolicyTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Encode,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: Phase,
    /// Decode step index, or the token index during encoding.
    pub step: usize,
    /// Absolute index of the query token.
    pub position: usize,
    pub layer: usize,
    pub head: usize,
    pub chunks: Vec<usize>,
    /// `(chunk, score)` of the non-mandatory candidates, when captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<(usize, f32)>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Tokens processed when the trace was taken.
    pub n: usize,
    pub chunk_size: usize,
    pub num_selected: usize,
    pub policy: Option<PolicyTag>,
    pub seed: u64,
    /// Sealed (selectable) chunks at the end of the run.
    pub n_chunks: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub meta: RunMeta,
    pub records: Vec<TraceRecord>,
}

impl SelectionTrace {
    pub fn new(meta: RunMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    /// Restores `(position, layer, head)` order after out-of-order appends.
    pub fn sort(&mut self) {
        self.records
            .sort_by_key(|r| (r.position, r.phase == Phase::Decode, r.layer, r.head));
    }

    pub fn filtered(&self, phase: Phase) -> SelectionTrace {
        SelectionTrace {
            meta: self.meta.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.phase == phase)
                .cloned()
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|source| Error::Json {
            context: "trace".into(),
            source,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }
}
