//! Candidate records, ingestion, feature fusion, training-subset sampling and
//! the selection file format.
//!
//! Records are stored one JSON object per line:
//!
//! ```text
//! {"id":"a","task":"vqa","clip_embedding":[0.1,0.2],"llm_score":4.0,"clip_score":0.3,"image_reward":-0.2,"label":1}
//! ```
//!
//! Selections are written as `id<TAB>task<TAB>score` lines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::numerics::norm;
use crate::rng::{stream, Stream};

/// Number of scalar quality scores appended to the embedding.
pub const SCALAR_FEATURES: usize = 3;

/// One candidate sample with its precomputed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub task: String,
    pub clip_embedding: Vec<f64>,
    pub llm_score: f64,
    pub clip_score: f64,
    pub image_reward: f64,
    pub label: usize,
}

impl FeatureRecord {
    pub fn scalars(&self) -> [f64; SCALAR_FEATURES] {
        [self.llm_score, self.clip_score, self.image_reward]
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::MalformedRecord {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() || self.id.contains(['\t', '\n', '\r']) {
            return Err(bad("id must be non-empty and free of tabs/newlines"));
        }
        if self.task.contains(['\t', '\n', '\r']) {
            return Err(bad("task must be free of tabs/newlines"));
        }
        if self.clip_embedding.is_empty() {
            return Err(bad("clip_embedding is empty"));
        }
        if self.clip_embedding.iter().any(|v| !v.is_finite()) {
            return Err(bad("clip_embedding has a non-finite entry"));
        }
        for (name, v) in [
            ("llm_score", self.llm_score),
            ("clip_score", self.clip_score),
            ("image_reward", self.image_reward),
        ] {
            if !v.is_finite() {
                return Err(bad(&format!("{name} is not finite")));
            }
        }
        if !(-1.0..=1.0).contains(&self.clip_score) {
            return Err(bad("clip_score outside [-1, 1]"));
        }
        Ok(())
    }
}

// Every field optional so a missing one can be reported against the record id.
#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    task: Option<String>,
    clip_embedding: Option<Vec<f64>>,
    llm_score: Option<f64>,
    clip_score: Option<f64>,
    image_reward: Option<f64>,
    label: Option<usize>,
}

impl RawRecord {
    fn into_record(self, line_no: usize) -> Result<FeatureRecord> {
        let id = self.id.ok_or_else(|| Error::MalformedRecord {
            id: format!("<line {line_no}>"),
            reason: "missing id".into(),
        })?;
        let missing = |field: &str| Error::MalformedRecord {
            id: id.clone(),
            reason: format!("missing {field}"),
        };
        Ok(FeatureRecord {
            task: self.task.ok_or_else(|| missing("task"))?,
            clip_embedding: self.clip_embedding.ok_or_else(|| missing("clip_embedding"))?,
            llm_score: self.llm_score.ok_or_else(|| missing("llm_score"))?,
            clip_score: self.clip_score.ok_or_else(|| missing("clip_score"))?,
            image_reward: self.image_reward.ok_or_else(|| missing("image_reward"))?,
            label: self.label.ok_or_else(|| missing("label"))?,
            id,
        })
    }
}

/// A validated, immutable candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<FeatureRecord>,
    tasks: BTreeSet<String>,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<FeatureRecord>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let dim = first.clip_embedding.len();
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate()?;
            if s.clip_embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: s.clip_embedding.len(),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        let tasks = samples.iter().map(|s| s.task.clone()).collect();
        Ok(Dataset {
            samples,
            tasks,
            dim,
        })
    }

    pub fn samples(&self) -> &[FeatureRecord] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tasks(&self) -> &BTreeSet<String> {
        &self.tasks
    }

    /// Embedding dimension `d`.
    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    /// Length of a fused feature vector, `d + 3`.
    pub fn feature_dim(&self) -> usize {
        self.dim + SCALAR_FEATURES
    }

    /// One past the largest label, at least 2.
    pub fn num_classes(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.label + 1)
            .max()
            .unwrap_or(0)
            .max(2)
    }

    pub fn zero_embedding_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.clip_embedding.iter().all(|&v| v == 0.0))
            .count()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("records always serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(line, i + 1)?);
    }
    Dataset::new(samples)
}

fn parse_line(line: &str, line_no: usize) -> Result<FeatureRecord> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
        // salvage the id for the diagnostic when the line is at least an object
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("id").and_then(|x| x.as_str()).map(String::from))
            .unwrap_or_else(|| format!("<line {line_no}>"));
        Error::MalformedRecord {
            id,
            reason: e.to_string(),
        }
    })?;
    raw.into_record(line_no)
}

/// Reads a JSON-lines record file, preserving record order.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(&line, i + 1)?);
    }
    Dataset::new(samples)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset.to_jsonl().as_bytes())
}

/// Per-scalar mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; SCALAR_FEATURES],
    pub std: [f64; SCALAR_FEATURES],
}

impl NormStats {
    /// Statistics over the given rows only (the training subset).
    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = indices.len() as f64;
        let mut mean = [0.0; SCALAR_FEATURES];
        for &i in indices {
            for (m, v) in mean.iter_mut().zip(dataset.samples[i].scalars()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; SCALAR_FEATURES];
        for &i in indices {
            for ((acc, v), m) in var.iter_mut().zip(dataset.samples[i].scalars()).zip(mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.map(|v| (v / n).sqrt());
        Ok(NormStats { mean, std })
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.std).all(|v| v.is_finite())
    }
}

/// Fused model input: unit embedding followed by z-scored scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn fuse_features(record: &FeatureRecord, stats: &NormStats) -> Result<FeatureVector> {
    if !stats.is_finite() {
        return Err(Error::NonFiniteInput("normalization stats".into()));
    }
    if record.clip_embedding.iter().any(|v| !v.is_finite())
        || record.scalars().iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteInput(format!("record {}", record.id)));
    }
    let len = norm(&record.clip_embedding);
    let mut values = Vec::with_capacity(record.clip_embedding.len() + SCALAR_FEATURES);
    if len > 0.0 {
        values.extend(record.clip_embedding.iter().map(|v| v / len));
    } else {
        values.extend(std::iter::repeat_n(0.0, record.clip_embedding.len()));
    }
    for ((v, m), s) in record.scalars().into_iter().zip(stats.mean).zip(stats.std) {
        values.push(if s > 0.0 { (v - m) / s } else { 0.0 });
    }
    Ok(FeatureVector(values))
}

pub fn fuse_all(dataset: &Dataset, indices: &[usize], stats: &NormStats) -> Result<Vec<FeatureVector>> {
    use rayon::prelude::*;
    indices
        .par_iter()
        .map(|&i| fuse_features(&dataset.samples[i], stats))
        .collect()
}

/// `max(1, floor(p·N/100))` distinct indices drawn uniformly, returned ascending.
pub fn sample_training_subset(dataset: &Dataset, p: f64, seed: u64) -> Result<Vec<usize>> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidConfig(format!("p={p} must lie in (0, 100]")));
    }
    let amount = ((p * n as f64 / 100.0).floor() as usize).clamp(1, n);
    let mut rng = stream(seed, Stream::Sampling);
    let mut picked = index::sample(&mut rng, n, amount).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// One selected sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSample {
    pub id: String,
    pub task: String,
    pub score: f64,
}

/// Chosen samples in canonical `(task, score, id)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub gamma: f64,
    pub entries: Vec<SelectedSample>,
}

impl SelectionResult {
    pub fn new(gamma: f64, mut entries: Vec<SelectedSample>) -> Self {
        sort_canonical(&mut entries);
        SelectionResult { gamma, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_task_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.task.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn to_tsv(&self) -> String {
        format_scores(&self.entries)
    }
}

pub fn sort_canonical(entries: &mut [SelectedSample]) {
    entries.sort_by(|a, b| {
        a.task
            .cmp(&b.task)
            .then(a.score.total_cmp(&b.score))
            .then(a.id.cmp(&b.id))
    });
}

/// `id<TAB>task<TAB>score` lines; `{:?}` keeps the shortest round-trip float form.
pub fn format_scores(entries: &[SelectedSample]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{:?}\n", e.id, e.task, e.score));
    }
    out
}

pub fn write_selection(result: &SelectionResult, path: &Path) -> Result<()> {
    write_atomic(path, result.to_tsv().as_bytes())
}

/// Reads `id<TAB>task<TAB>score` lines (selection or score files).
pub fn read_scores(path: &Path) -> Result<Vec<SelectedSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(task), Some(score), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::MalformedRecord {
                id: format!("<line {}>", i + 1),
                reason: "expected id<TAB>task<TAB>score".into(),
            });
        };
        let score: f64 = score.parse().map_err(|_| Error::MalformedRecord {
            id: id.to_string(),
            reason: format!("bad score {score:?}"),
        })?;
        out.push(SelectedSample {
            id: id.to_string(),
            task: task.to_string(),
            score,
        });
    }
    Ok(out)
}
