//! Synthetic data with planted structure, baseline selection strategies and
//! subset-retraining evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{fuse_all, Dataset, FeatureRecord, FeatureVector, NormStats, SelectionResult};
use crate::error::{Error, Result};
use crate::numerics::{mean, norm, population_variance, squared_distance};
use crate::objective::LossMode;
use crate::optim::{adam_step, AdamState};
use crate::pipeline::{prepare, select_subset, train_prepared, Prepared, TrainConfig};
use crate::proxy::{predict, proxy_ce_grad, ProxyParams};
use crate::rng::{derive_seed, stream, Stream};
use crate::scorer::infer_all_scores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Planted concept blobs.
    pub groups: usize,
    pub classes: usize,
    pub dim: usize,
    /// Minimum distance between blob centers.
    pub separation: f64,
    /// Per-coordinate standard deviation around a center.
    pub blob_noise: f64,
    /// Mean fraction of samples pulled toward a foreign-class blob; the
    /// per-blob rate varies uniformly in `[0, 2·hard_fraction]`.
    pub hard_fraction: f64,
    pub noise_label_fraction: f64,
    /// Size of the clean-label held-out set relative to `n`.
    pub heldout_fraction: f64,
    pub n_tasks: usize,
    /// Each blob belongs to task `blob mod n_tasks` instead of tasks being
    /// drawn independently of content.
    pub tasks_by_blob: bool,
    /// Within-blob spread of the quality scores relative to the spread of
    /// blob profiles.
    pub quality_spread: f64,
    /// Mean gap of the quality scores between clean and noisy samples, in
    /// units of the within-blob spread.
    pub quality_signal: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 5000,
            groups: 20,
            classes: 10,
            dim: 32,
            separation: 10.0,
            blob_noise: 1.0,
            hard_fraction: 0.15,
            noise_label_fraction: 0.2,
            heldout_fraction: 0.2,
            n_tasks: 4,
            tasks_by_blob: false,
            quality_spread: 1.0,
            quality_signal: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n == 0 || self.groups == 0 || self.dim == 0 || self.n_tasks == 0 {
            return bad("n, groups, dim and n_tasks must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        for (name, f) in [
            ("noise_label_fraction", self.noise_label_fraction),
            ("heldout_fraction", self.heldout_fraction),
            ("hard_fraction", self.hard_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} outside [0, 1]"));
            }
        }
        if !(self.quality_signal.is_finite() && self.quality_signal >= 0.0)
            || !(self.quality_spread.is_finite() && self.quality_spread >= 0.0)
        {
            return bad("quality_signal and quality_spread must be non-negative".into());
        }
        if self.hard_fraction > 0.5 {
            return bad(format!("hard_fraction = {} above 0.5", self.hard_fraction));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) || !(self.blob_noise >= 0.0 && self.blob_noise.is_finite()) {
            return bad("separation must be positive and blob_noise non-negative".into());
        }
        if self.groups > 1 && (0..self.groups).all(|g| g % self.classes == 0) {
            return bad("every blob has the same class".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Clean labels, drawn from the same blobs.
    pub heldout: Dataset,
    pub planted: Vec<usize>,
    pub hard: Vec<bool>,
    pub noisy: Vec<bool>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

struct Blobs {
    centers: Vec<Vec<f64>>,
    hard_rate: Vec<f64>,
    /// Per-blob offsets of the three quality scores, in units of their scale.
    profiles: Vec<[f64; 3]>,
}

fn blob_class(g: usize, classes: usize) -> usize {
    g % classes
}

fn make_blobs<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Blobs {
    let dirs: Vec<Vec<f64>> = (0..spec.groups)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| gaussian(rng)).collect();
            let l = norm(&v).max(1e-12);
            v.into_iter().map(|x| x / l).collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..dirs.len() {
        for j in 0..i {
            min_dist = min_dist.min(squared_distance(&dirs[i], &dirs[j]).sqrt());
        }
    }
    let radius = if min_dist.is_finite() && min_dist > 0.0 {
        spec.separation / min_dist
    } else {
        spec.separation
    };
    let centers = dirs
        .into_iter()
        .map(|d| d.into_iter().map(|x| x * radius).collect())
        .collect();
    let hard_rate = (0..spec.groups)
        .map(|_| 2.0 * spec.hard_fraction * rng.random::<f64>())
        .collect();
    let profiles = (0..spec.groups)
        .map(|_| [gaussian(rng), gaussian(rng), gaussian(rng)])
        .collect();
    Blobs {
        centers,
        hard_rate,
        profiles,
    }
}

/// Range of the interpolation factor toward a foreign blob for hard samples.
const HARD_PULL: (f64, f64) = (0.4, 0.5);

struct Draw {
    embedding: Vec<f64>,
    blob: usize,
    hard: bool,
}

fn draw_point<R: Rng + ?Sized>(spec: &SyntheticSpec, blobs: &Blobs, rng: &mut R) -> Draw {
    let g = rng.random_range(0..spec.groups);
    let hard = rng.random::<f64>() < blobs.hard_rate[g];
    let mut anchor = blobs.centers[g].clone();
    if hard {
        let foreign: Vec<usize> = (0..spec.groups)
            .filter(|&h| blob_class(h, spec.classes) != blob_class(g, spec.classes))
            .collect();
        if let Some(&h) = foreign.get(rng.random_range(0..foreign.len().max(1))) {
            let t = rng.random_range(HARD_PULL.0..HARD_PULL.1);
            for (a, c) in anchor.iter_mut().zip(&blobs.centers[h]) {
                *a += t * (c - *a);
            }
        }
    }
    let embedding = anchor
        .into_iter()
        .map(|a| a + spec.blob_noise * gaussian(rng))
        .collect();
    Draw { embedding, blob: g, hard }
}

/// Scale of each quality score and its center.
const QUALITY_SCALE: [(f64, f64); 3] = [(0.6, 0.15), (0.3, 0.08), (0.2, 0.5)];

/// Quality triple around the blob's profile, lower for noisy samples.
fn quality_scores<R: Rng + ?Sized>(
    profile: &[f64; 3],
    noisy: bool,
    spec: &SyntheticSpec,
    rng: &mut R,
) -> (f64, f64, f64) {
    let penalty = if noisy { spec.quality_signal } else { 0.0 };
    let v: Vec<f64> = QUALITY_SCALE
        .iter()
        .zip(profile)
        .map(|(&(center, scale), &offset)| {
            center + scale * (offset + spec.quality_spread * (gaussian(rng) - penalty))
        })
        .collect();
    (v[0], v[1].clamp(-1.0, 1.0), v[2])
}

/// Blobs in `dim` dimensions with labels tied to blobs, boundary samples,
/// label noise and noise-correlated quality scores.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream(seed, Stream::Synthetic);
    let blobs = make_blobs(spec, &mut rng);
    let mut samples = Vec::with_capacity(spec.n);
    let mut planted = Vec::with_capacity(spec.n);
    let mut hard = Vec::with_capacity(spec.n);
    let mut noisy = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let d = draw_point(spec, &blobs, &mut rng);
        let is_noisy = rng.random::<f64>() < spec.noise_label_fraction;
        let label = if is_noisy {
            rng.random_range(0..spec.classes)
        } else {
            blob_class(d.blob, spec.classes)
        };
        let (llm, clip, reward) = quality_scores(&blobs.profiles[d.blob], is_noisy, spec, &mut rng);
        let t = rng.random_range(0..spec.n_tasks);
        let task = format!("task{}", if spec.tasks_by_blob { d.blob % spec.n_tasks } else { t });
        samples.push(FeatureRecord {
            id: format!("s{i:05}"),
            task,
            clip_embedding: d.embedding,
            llm_score: llm,
            clip_score: clip,
            image_reward: reward,
            label,
        });
        planted.push(d.blob);
        hard.push(d.hard);
        noisy.push(is_noisy);
    }
    let n_held = ((spec.n as f64 * spec.heldout_fraction).round() as usize).max(1);
    let mut held = Vec::with_capacity(n_held);
    for i in 0..n_held {
        let d = draw_point(spec, &blobs, &mut rng);
        let (llm, clip, reward) = quality_scores(&blobs.profiles[d.blob], false, spec, &mut rng);
        held.push(FeatureRecord {
            id: format!("h{i:05}"),
            task: "heldout".into(),
            clip_embedding: d.embedding,
            llm_score: llm,
            clip_score: clip,
            image_reward: reward,
            label: blob_class(d.blob, spec.classes),
        });
    }
    Ok(SyntheticData {
        dataset: Dataset::new(samples)?,
        heldout: Dataset::new(held)?,
        planted,
        hard,
        noisy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    StaticScore,
    ImportanceOnly,
    PlainSum,
    FixedLambda,
    Coido,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::StaticScore,
        Strategy::ImportanceOnly,
        Strategy::PlainSum,
        Strategy::FixedLambda,
        Strategy::Coido,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::StaticScore => "static_score",
            Strategy::ImportanceOnly => "importance_only",
            Strategy::PlainSum => "plain_sum",
            Strategy::FixedLambda => "fixed_lambda",
            Strategy::Coido => "coido",
        }
    }

    pub fn loss_mode(self) -> Option<LossMode> {
        match self {
            Strategy::Random | Strategy::StaticScore => None,
            Strategy::ImportanceOnly => Some(LossMode::ImportanceOnly),
            Strategy::PlainSum => Some(LossMode::PlainSum),
            Strategy::FixedLambda => Some(LossMode::FixedLambda),
            Strategy::Coido => Some(LossMode::Coido),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// Selects with `strategy`. Learned strategies train on `prepared` (or
/// prepare from `train` when absent) with the strategy's loss mode.
pub fn baseline_select(
    strategy: Strategy,
    dataset: &Dataset,
    train: &TrainConfig,
    prepared: Option<&Prepared>,
    gamma: f64,
    seed: u64,
) -> Result<SelectionResult> {
    let scores: Vec<f64> = match strategy.loss_mode() {
        None if strategy == Strategy::Random => {
            let mut rng = stream(derive_seed(seed, 0x52414e44), Stream::Bench);
            (0..dataset.len()).map(|_| rng.random::<f64>()).collect()
        }
        None => dataset.samples().iter().map(|r| -r.clip_score).collect(),
        Some(mode) => {
            let cfg = TrainConfig {
                loss_mode: mode,
                seed,
                ..train.clone()
            };
            let owned;
            let prep = match prepared {
                Some(p) => p,
                None => {
                    owned = prepare(&cfg, dataset)?;
                    &owned
                }
            };
            let state = train_prepared(&cfg, prep)?;
            infer_all_scores(&state.scorer, dataset, &state.stats)?
        }
    };
    select_subset(&scores, dataset, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Gradient steps, identical for every arm.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 300,
            batch_size: 32,
            lr: 5e-2,
        }
    }
}

/// Features of a dataset and a held-out set under the dataset's own stats.
pub struct EvalData {
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
    heldout: Vec<FeatureVector>,
    heldout_labels: Vec<usize>,
    index: HashMap<String, usize>,
    classes: usize,
}

impl EvalData {
    pub fn new(dataset: &Dataset, heldout: &Dataset) -> Result<Self> {
        if dataset.embedding_dim() != heldout.embedding_dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.embedding_dim(),
                actual: heldout.embedding_dim(),
            });
        }
        let all: Vec<usize> = (0..dataset.len()).collect();
        let stats = NormStats::from_indices(dataset, &all)?;
        let features = fuse_all(dataset, &all, &stats)?;
        let held_idx: Vec<usize> = (0..heldout.len()).collect();
        let held = fuse_all(heldout, &held_idx, &stats)?;
        Ok(EvalData {
            features,
            labels: dataset.samples().iter().map(|r| r.label).collect(),
            heldout: held,
            heldout_labels: heldout.samples().iter().map(|r| r.label).collect(),
            index: dataset
                .samples()
                .iter()
                .enumerate()
                .map(|(i, r)| (r.id.clone(), i))
                .collect(),
            classes: dataset.num_classes().max(heldout.num_classes()),
        })
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.features.len()).collect()
    }

    /// Dataset indices of a selection, ascending.
    pub fn indices_of(&self, selection: &SelectionResult) -> Result<Vec<usize>> {
        let mut idx = selection
            .entries
            .iter()
            .map(|e| {
                self.index.get(&e.id).copied().ok_or_else(|| Error::MalformedRecord {
                    id: e.id.clone(),
                    reason: "selected id not in dataset".into(),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }

    /// Held-out accuracy of a fresh proxy trained on `indices` for a fixed budget.
    pub fn train_and_score(&self, indices: &[usize], eval: &EvalConfig, seed: u64) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::EmptySelection);
        }
        let dim = self.features[0].len();
        let mut params = ProxyParams::init(self.classes, dim, &mut stream(derive_seed(seed, 0x4556414c), Stream::Init));
        let mut adam = AdamState::new(params.as_slice().len());
        let mut rng = stream(seed, Stream::Eval);
        let mut order = indices.to_vec();
        let mut cursor = order.len();
        let b = eval.batch_size.max(1).min(order.len());
        for _ in 0..eval.steps {
            let mut batch = Vec::with_capacity(b);
            while batch.len() < b {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let xs: Vec<&[f64]> = batch.iter().map(|&i| self.features[i].values()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
            let coeffs = vec![1.0 / b as f64; b];
            let g = proxy_ce_grad(&params, &xs, &ys, &coeffs)?;
            adam_step(params.as_mut_slice(), &g, &mut adam, eval.lr)?;
        }
        let mut correct = 0usize;
        for (x, &y) in self.heldout.iter().zip(&self.heldout_labels) {
            if predict(&params, x.values())? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.heldout.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub full_accuracy: f64,
    /// `accuracy / full_accuracy × 100`.
    pub rel: f64,
}

pub fn relative_performance(accuracy: f64, full_accuracy: f64) -> f64 {
    if full_accuracy == 0.0 {
        return 0.0;
    }
    accuracy / full_accuracy * 100.0
}

/// Trains a fresh proxy on the selection and on the full dataset with the
/// same budget and seed, and compares held-out accuracy.
pub fn evaluate_subset(
    selection: &SelectionResult,
    dataset: &Dataset,
    heldout: &Dataset,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Evaluation> {
    if selection.is_empty() {
        return Err(Error::EmptySelection);
    }
    let data = EvalData::new(dataset, heldout)?;
    let accuracy = data.train_and_score(&data.indices_of(selection)?, eval, seed)?;
    let full_accuracy = data.train_and_score(&data.all_indices(), eval, seed)?;
    Ok(Evaluation {
        accuracy,
        full_accuracy,
        rel: relative_performance(accuracy, full_accuracy),
    })
}

/// Number of distinct planted blobs among the selected samples.
pub fn planted_coverage(selection: &SelectionResult, data: &SyntheticData) -> usize {
    let ids = selection.ids();
    data.dataset
        .samples()
        .iter()
        .zip(&data.planted)
        .filter(|(r, _)| ids.contains(r.id.as_str()))
        .map(|(_, &g)| g)
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub spec: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            spec: SyntheticSpec::default(),
            train: TrainConfig {
                epochs: 6,
                lr_uncertainty: 2e-2,
                learnable_lambda: true,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            gamma: 0.2,
            seeds: (0..5).collect(),
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub seed: u64,
    pub accuracy: f64,
    pub rel: f64,
    pub selected: usize,
    pub coverage: usize,
    pub noisy_fraction: f64,
    pub hard_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_rel: f64,
    pub std_rel: f64,
    pub mean_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl BenchResult {
    fn accuracies(&self, strategy: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| (r.seed, r.accuracy))
            .collect()
    }

    /// Mean and population std of the per-seed accuracy differences `a − b`.
    pub fn paired_gap(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        let bs: BTreeMap<u64, f64> = self.accuracies(b).into_iter().collect();
        let diffs: Vec<f64> = self
            .accuracies(a)
            .into_iter()
            .filter_map(|(s, x)| bs.get(&s).map(|y| x - y))
            .collect();
        if diffs.is_empty() {
            return None;
        }
        Some((mean(&diffs), population_variance(&diffs).ok()?.sqrt()))
    }

    pub fn mean_accuracy(&self, strategy: &str) -> Option<f64> {
        self.aggregates.get(strategy).map(|a| a.mean_accuracy)
    }

    /// Tab-separated rows, then aggregates, then adjacent-pair gaps.
    pub fn to_tsv(&self, gap_pairs: &[(Strategy, Strategy)]) -> String {
        let mut out = String::from("kind\tstrategy\tseed\taccuracy\trel\tselected\tcoverage\tnoisy_fraction\thard_fraction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "row\t{}\t{}\t{:.6}\t{:.4}\t{}\t{}\t{:.4}\t{:.4}\n",
                r.strategy, r.seed, r.accuracy, r.rel, r.selected, r.coverage, r.noisy_fraction, r.hard_fraction
            ));
        }
        out.push_str("kind\tstrategy\tmean_accuracy\tstd_accuracy\tmean_rel\tstd_rel\tmean_coverage\n");
        for (name, a) in &self.aggregates {
            out.push_str(&format!(
                "aggregate\t{name}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.2}\n",
                a.mean_accuracy, a.std_accuracy, a.mean_rel, a.std_rel, a.mean_coverage
            ));
        }
        out.push_str("kind\tpair\tmean_gap\tstd_gap\n");
        for (a, b) in gap_pairs {
            if let Some((m, s)) = self.paired_gap(a.name(), b.name()) {
                out.push_str(&format!("gap\t{a}-{b}\t{m:.6}\t{s:.6}\n"));
            }
        }
        out
    }
}

/// The pairs whose ordering the benchmark is meant to exhibit.
pub const ORDERING_PAIRS: [(Strategy, Strategy); 4] = [
    (Strategy::Coido, Strategy::FixedLambda),
    (Strategy::FixedLambda, Strategy::PlainSum),
    (Strategy::PlainSum, Strategy::ImportanceOnly),
    (Strategy::Coido, Strategy::Random),
];

pub const FULL_ARM: &str = "full";

/// Runs every strategy on every seed. Clustering is computed once per seed
/// and shared by the learned strategies.
pub fn run_bench(config: &BenchConfig) -> Result<BenchResult> {
    if config.seeds.is_empty() {
        return Err(Error::InvalidConfig("bench needs at least one seed".into()));
    }
    config.train.validate()?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let data = gen_synthetic(&config.spec, seed)?;
        let eval = EvalData::new(&data.dataset, &data.heldout)?;
        let full = eval.train_and_score(&eval.all_indices(), &config.eval, seed)?;
        rows.push(BenchRow {
            strategy: FULL_ARM.into(),
            seed,
            accuracy: full,
            rel: relative_performance(full, full),
            selected: data.dataset.len(),
            coverage: data.planted.iter().collect::<BTreeSet<_>>().len(),
            noisy_fraction: data.noisy.iter().filter(|&&x| x).count() as f64 / data.noisy.len() as f64,
            hard_fraction: data.hard.iter().filter(|&&x| x).count() as f64 / data.hard.len() as f64,
        });
        let train = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let prepared = if config.strategies.iter().any(|s| s.loss_mode().is_some()) {
            Some(prepare(&train, &data.dataset)?)
        } else {
            None
        };
        for &strategy in &config.strategies {
            let sel = baseline_select(strategy, &data.dataset, &train, prepared.as_ref(), config.gamma, seed)?;
            let idx = eval.indices_of(&sel)?;
            let acc = eval.train_and_score(&idx, &config.eval, seed)?;
            let noisy = idx.iter().filter(|&&i| data.noisy[i]).count();
            let hard = idx.iter().filter(|&&i| data.hard[i]).count();
            rows.push(BenchRow {
                strategy: strategy.name().into(),
                seed,
                accuracy: acc,
                rel: relative_performance(acc, full),
                selected: sel.len(),
                coverage: planted_coverage(&sel, &data),
                noisy_fraction: noisy as f64 / idx.len() as f64,
                hard_fraction: hard as f64 / idx.len() as f64,
            });
        }
    }
    let mut grouped: BTreeMap<String, Vec<&BenchRow>> = BTreeMap::new();
    for r in &rows {
        grouped.entry(r.strategy.clone()).or_default().push(r);
    }
    let aggregates = grouped
        .into_iter()
        .map(|(name, rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let rel: Vec<f64> = rs.iter().map(|r| r.rel).collect();
            let cov: Vec<f64> = rs.iter().map(|r| r.coverage as f64).collect();
            let agg = Aggregate {
                mean_accuracy: mean(&acc),
                std_accuracy: population_variance(&acc).map(f64::sqrt).unwrap_or(0.0),
                mean_rel: mean(&rel),
                std_rel: population_variance(&rel).map(f64::sqrt).unwrap_or(0.0),
                mean_coverage: mean(&cov),
            };
            (name, agg)
        })
        .collect();
    Ok(BenchResult { rows, aggregates })
}

/// Mean Rel of the coupled strategy for each cluster count.
pub fn cluster_sweep(config: &BenchConfig, cluster_counts: &[usize]) -> Result<Vec<(usize, f64)>> {
    cluster_counts
        .iter()
        .map(|&m| {
            let cfg = BenchConfig {
                train: TrainConfig {
                    clusters: m,
                    ..config.train.clone()
                },
                strategies: vec![Strategy::Coido],
                ..config.clone()
            };
            let res = run_bench(&cfg)?;
            Ok((m, res.aggregates[Strategy::Coido.name()].mean_rel))
        })
        .collect()
}
