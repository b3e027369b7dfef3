//! Ingestion of precomputed embedding datasets for offline replay.
//!
//! File format: JSON Lines, one record per line:
//! `{"id": str, "cluster": int, "prompt_vec": [f64...], "outputs": {"0": [f64...], ...},
//!   "fidelity": {"0": f64, ...}?}`.
//! Every record must carry the same arm ids and consistent dimensions.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GenerativeEnv, RoundContext};
use crate::kernels::check_finite;
use crate::{Error, Result};

/// One replayable datum: a prompt with each arm's precomputed output
/// embedding and optional precomputed fidelity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub cluster: usize,
    pub prompt_vec: Vec<f64>,
    pub outputs: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<BTreeMap<String, f64>>,
}

/// A validated embedding dataset.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    records: Vec<EmbeddingRecord>,
    arm_ids: Vec<String>,
    prompt_dim: usize,
    output_dim: usize,
    cluster_count: usize,
}

impl EmbeddingDataset {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Schema("embedding dataset is empty".into()));
        }
        let arm_ids: Vec<String> = records[0].outputs.keys().cloned().collect();
        if arm_ids.is_empty() {
            return Err(Error::Schema(
                "records must contain at least one arm output".into(),
            ));
        }
        let prompt_dim = records[0].prompt_vec.len();
        let output_dim = records[0].outputs[&arm_ids[0]].len();
        if prompt_dim == 0 || output_dim == 0 {
            return Err(Error::Schema("zero-dimensional embeddings".into()));
        }
        let mut cluster_count = 0;
        for (i, record) in records.iter().enumerate() {
            let place = |msg: String| Error::Schema(format!("record {} ({}): {msg}", i, record.id));
            check_finite(&record.prompt_vec).map_err(|e| place(format!("prompt: {e}")))?;
            if record.prompt_vec.len() != prompt_dim {
                return Err(place(format!(
                    "prompt dim {} != {prompt_dim}",
                    record.prompt_vec.len()
                )));
            }
            let ids: Vec<String> = record.outputs.keys().cloned().collect();
            if ids != arm_ids {
                return Err(place(format!(
                    "arm ids {ids:?} differ from the first record's {arm_ids:?}"
                )));
            }
            for (arm, out) in &record.outputs {
                check_finite(out).map_err(|e| place(format!("output {arm}: {e}")))?;
                if out.len() != output_dim {
                    return Err(place(format!(
                        "output dim {} != {output_dim} for arm {arm}",
                        out.len()
                    )));
                }
            }
            if let Some(fid) = &record.fidelity {
                for (arm, value) in fid {
                    if !record.outputs.contains_key(arm) {
                        return Err(place(format!("fidelity for unknown arm {arm}")));
                    }
                    if !value.is_finite() {
                        return Err(place(format!("non-finite fidelity for arm {arm}")));
                    }
                }
            }
            cluster_count = cluster_count.max(record.cluster + 1);
        }
        Ok(EmbeddingDataset {
            records,
            arm_ids,
            prompt_dim,
            output_dim,
            cluster_count,
        })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn arm_ids(&self) -> &[String] {
        &self.arm_ids
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The (prompt, output) corpus of one arm column.
    pub fn arm_corpus(&self, arm: usize) -> Result<crate::scores::PairedCorpus> {
        let id = self
            .arm_ids
            .get(arm)
            .ok_or_else(|| Error::invalid(format!("unknown arm index {arm}")))?;
        let mut corpus = crate::scores::PairedCorpus::new();
        for record in &self.records {
            corpus.push(crate::scores::EmbeddedPair::new(
                record.prompt_vec.clone(),
                record.outputs[id].clone(),
            ))?;
        }
        Ok(corpus)
    }
}

/// Loads and validates a JSON-Lines embedding dataset.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.to_path_buf(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    EmbeddingDataset::from_records(records)
}

/// Writes records as JSON Lines (the inverse of [`load_embeddings`]).
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.to_path_buf(), e))?;
    }
    Ok(())
}

/// Replay environment: serves dataset records in a seeded shuffled order,
/// reshuffling at each pass. Fidelity comes from the file when present,
/// otherwise from prompt/output cosine (requiring equal dimensions).
#[derive(Debug, Clone)]
pub struct ReplayEnv {
    dataset: EmbeddingDataset,
    order: Vec<usize>,
    cursor: usize,
}

impl ReplayEnv {
    pub fn new(dataset: EmbeddingDataset) -> Result<Self> {
        let has_fidelity = dataset.records().iter().all(|r| {
            r.fidelity
                .as_ref()
                .is_some_and(|f| f.len() == dataset.arm_ids().len())
        });
        if !has_fidelity && dataset.prompt_dim() != dataset.output_dim() {
            return Err(Error::Schema(
                "replay needs per-arm fidelity values or equal prompt/output dimensions \
                 for the cosine fallback"
                    .into(),
            ));
        }
        Ok(ReplayEnv {
            order: (0..dataset.len()).collect(),
            dataset,
            cursor: 0,
        })
    }

    pub fn dataset(&self) -> &EmbeddingDataset {
        &self.dataset
    }

    fn reshuffle(&mut self, rng: &mut ChaCha12Rng) {
        for i in (1..self.order.len()).rev() {
            let j = rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }
}

impl GenerativeEnv for ReplayEnv {
    fn arm_count(&self) -> usize {
        self.dataset.arm_ids().len()
    }

    fn prompt_dim(&self) -> usize {
        self.dataset.prompt_dim()
    }

    fn output_dim(&self) -> usize {
        self.dataset.output_dim()
    }

    fn cluster_count(&self) -> usize {
        self.dataset.cluster_count
    }

    fn next_context(&mut self, rng: &mut ChaCha12Rng) -> Result<RoundContext> {
        if self.cursor == 0 || self.cursor >= self.order.len() {
            self.reshuffle(rng);
        }
        let record_idx = self.order[self.cursor];
        self.cursor += 1;
        let record = &self.dataset.records()[record_idx];
        Ok(RoundContext {
            cluster: record.cluster,
            prompt: record.prompt_vec.clone(),
            record: Some(record_idx),
        })
    }

    fn generate(&self, arm: usize, ctx: &RoundContext, _rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
        let record_idx = ctx
            .record
            .ok_or_else(|| Error::invalid("replay context lacks a record index"))?;
        let id = self
            .dataset
            .arm_ids()
            .get(arm)
            .ok_or_else(|| Error::invalid(format!("unknown arm index {arm}")))?;
        Ok(self.dataset.records()[record_idx].outputs[id].clone())
    }

    fn fidelity(&self, arm: usize, ctx: &RoundContext, output: &[f64]) -> Result<f64> {
        let record_idx = ctx
            .record
            .ok_or_else(|| Error::invalid("replay context lacks a record index"))?;
        let record = &self.dataset.records()[record_idx];
        let id = &self.dataset.arm_ids()[arm];
        if let Some(value) = record.fidelity.as_ref().and_then(|f| f.get(id)) {
            return Ok(*value);
        }
        let tn = crate::kernels::dot(&record.prompt_vec, &record.prompt_vec).sqrt();
        let on = crate::kernels::dot(output, output).sqrt();
        if tn == 0.0 || on == 0.0 {
            return Err(Error::invalid("fidelity is undefined for zero vectors"));
        }
        Ok(0.5 + 0.5 * crate::kernels::dot(&record.prompt_vec, output) / (tn * on))
    }
}
