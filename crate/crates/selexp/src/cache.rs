//! Append-only JSON-lines store for computed explanations.
//!
//! One record per explained (input, method, seed); downstream stages consume
//! these files instead of re-running explainers. The logical key is
//! `(input_id, method, seed)` — method names carry their parameters (e.g.
//! `svs-12`) — and duplicate keys are rejected to prevent silent target drift.

use crate::data::{AttributionVector, TargetClass};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub input_id: u64,
    pub method: String,
    pub params: serde_json::Value,
    pub target: usize,
    pub scores: Vec<f64>,
    pub inference_cost: u64,
    pub seed: u64,
}

impl ExplanationRecord {
    pub fn from_attribution(att: &AttributionVector, method: &str, seed: u64) -> Self {
        let params = match crate::attribution::MethodSpec::parse(method) {
            Ok(crate::attribution::MethodSpec::Svs { permutations }) => {
                serde_json::json!({ "permutations": permutations })
            }
            Ok(crate::attribution::MethodSpec::KernelShap { inferences }) => {
                serde_json::json!({ "inferences": inferences })
            }
            _ => serde_json::json!({}),
        };
        Self {
            input_id: att.input_id,
            method: method.to_string(),
            params,
            target: att.target.index(),
            scores: att.scores.clone(),
            inference_cost: att.inference_cost,
            seed,
        }
    }

    pub fn key(&self) -> (u64, String, u64) {
        (self.input_id, self.method.clone(), self.seed)
    }

    pub fn target_class(&self) -> TargetClass {
        TargetClass(self.target)
    }
}

/// In-memory view of one cache file, indexed by logical key.
#[derive(Debug, Default, Clone)]
pub struct ExplanationCache {
    records: Vec<ExplanationRecord>,
    index: HashMap<(u64, String, u64), usize>,
}

impl ExplanationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ExplanationRecord] {
        &self.records
    }

    pub fn push(&mut self, record: ExplanationRecord) -> Result<()> {
        let key = record.key();
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateCacheKey {
                input_id: key.0,
                method: key.1,
                seed: key.2,
            });
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, input_id: u64, method: &str, seed: u64) -> Option<&ExplanationRecord> {
        self.index
            .get(&(input_id, method.to_string(), seed))
            .map(|&i| &self.records[i])
    }

    /// First record for (input_id, method) under any seed.
    pub fn get_any_seed(&self, input_id: u64, method: &str) -> Option<&ExplanationRecord> {
        self.records
            .iter()
            .find(|r| r.input_id == input_id && r.method == method)
    }

    /// Score vectors for `ids` in order, all from `method` (any seed).
    /// Missing ids are an error.
    pub fn scores_for(&self, ids: &[u64], method: &str) -> Result<Vec<Vec<f64>>> {
        ids.iter()
            .map(|&id| {
                self.get_any_seed(id, method)
                    .map(|r| r.scores.clone())
                    .ok_or(Error::MissingTarget(id))
            })
            .collect()
    }

    pub fn total_inference_cost(&self) -> u64 {
        self.records.iter().map(|r| r.inference_cost).sum()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cache = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            cache.push(serde_json::from_str(line)?)?;
        }
        Ok(cache)
    }

    /// Append records to a JSON-lines file, creating it if needed. Duplicate
    /// keys against the existing file content are rejected before writing.
    pub fn append_jsonl(path: &Path, records: &[ExplanationRecord]) -> Result<()> {
        let mut existing = if path.exists() {
            Self::read_jsonl(path)?
        } else {
            Self::new()
        };
        for r in records {
            existing.push(r.clone())?;
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        for r in records {
            writeln!(file, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    /// Idempotent append: records whose key already exists with identical
    /// content are skipped; a key collision with different content is target
    /// drift and is rejected. Returns the number of records written.
    pub fn append_jsonl_idempotent(path: &Path, records: &[ExplanationRecord]) -> Result<usize> {
        let mut existing = if path.exists() {
            Self::read_jsonl(path)?
        } else {
            Self::new()
        };
        let mut fresh = Vec::new();
        for r in records {
            let key = r.key();
            match existing.index.get(&key) {
                Some(&i) if existing.records[i] == *r => {}
                Some(_) => {
                    return Err(Error::DuplicateCacheKey {
                        input_id: key.0,
                        method: key.1,
                        seed: key.2,
                    })
                }
                None => {
                    existing.push(r.clone())?;
                    fresh.push(r.clone());
                }
            }
        }
        if !fresh.is_empty() {
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            for r in &fresh {
                writeln!(file, "{}", serde_json::to_string(r)?)?;
            }
        }
        Ok(fresh.len())
    }
}
