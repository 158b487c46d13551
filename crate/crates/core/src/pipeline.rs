//! End-to-end training and selection: subsample, fuse, cluster, co-train the
//! proxy, scorer and balancing parameters, then score everything and keep the
//! lowest-scoring fraction of each task.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{spectral_cluster, ClusterAssignment};
use crate::dataset::{
    format_scores, fuse_all, load_dataset, sample_training_subset, Dataset, FeatureVector, NormStats,
    SelectedSample, SelectionResult,
};
use crate::error::{Error, Result};
use crate::fsio::StagedWrites;
use crate::numerics::{mean, population_variance};
use crate::objective::{objective_backward, Balance, LossMode, UncertaintyParams};
use crate::optim::{adam_step, AdamState};
use crate::proxy::{batch_ce, proxy_ce_grad, ProxyParams};
use crate::rng::{stream, Stream};
use crate::scorer::{
    infer_all_scores, scorer_backward_raw, scorer_forward, BatchState, ScorerCheckpoint, ScorerParams,
};

/// Divergence guard on the log-variances.
pub const MAX_LOG_VARIANCE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Percentage of the pool used for training, in (0, 100].
    pub p: f64,
    /// Fraction of each task kept, in (0, 1].
    pub gamma: f64,
    #[serde(alias = "M")]
    pub clusters: usize,
    #[serde(alias = "K")]
    pub knn: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_proxy: f64,
    pub lr_scorer: f64,
    pub lr_uncertainty: f64,
    pub hidden: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub lambda: f64,
    pub learnable_lambda: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 20.0,
            gamma: 0.2,
            clusters: 20,
            knn: 10,
            batch_size: 8,
            epochs: 2,
            lr_proxy: 1e-2,
            lr_scorer: 1e-3,
            lr_uncertainty: 1e-2,
            hidden: 32,
            seed: 0,
            loss_mode: LossMode::Coido,
            lambda: 0.5,
            learnable_lambda: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.p > 0.0 && self.p <= 100.0) {
            return bad(format!("p = {} outside (0, 100]", self.p));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma = {} outside (0, 1]", self.gamma));
        }
        if self.clusters == 0 {
            return bad("clusters must be at least 1".into());
        }
        if self.knn == 0 {
            return bad("knn must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        for (name, lr) in [
            ("lr_proxy", self.lr_proxy),
            ("lr_scorer", self.lr_scorer),
            ("lr_uncertainty", self.lr_uncertainty),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} = {lr} must be finite and non-negative"));
            }
        }
        Balance::new(self.loss_mode, self.lambda, self.learnable_lambda)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything computed before the first gradient step; shared by training
/// runs that differ only in loss mode.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Dataset indices of the training subset, ascending.
    pub subset: Vec<usize>,
    pub stats: NormStats,
    pub features: Vec<FeatureVector>,
    pub labels: Vec<usize>,
    pub clusters: ClusterAssignment,
    pub num_classes: usize,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.subset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset.is_empty()
    }
}

pub fn prepare(config: &TrainConfig, dataset: &Dataset) -> Result<Prepared> {
    config.validate()?;
    let subset = sample_training_subset(dataset, config.p, config.seed)?;
    let stats = NormStats::from_indices(dataset, &subset)?;
    let features = fuse_all(dataset, &subset, &stats)?;
    let clusters = spectral_cluster(&features, config.clusters, config.knn, config.seed)?;
    let labels = subset.iter().map(|&i| dataset.samples()[i].label).collect();
    Ok(Prepared {
        subset,
        stats,
        features,
        labels,
        clusters,
        num_classes: dataset.num_classes(),
    })
}

/// Per-step records, taken before each update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectories {
    pub loss: Vec<f64>,
    pub importance_loss: Vec<f64>,
    pub diversity_loss: Vec<f64>,
    pub sigma_i: Vec<f64>,
    pub sigma_d: Vec<f64>,
    /// Standard deviation of the present clusters' mean weights.
    pub cluster_mean_std: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Trajectories {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedState {
    pub scorer: ScorerParams,
    pub proxy: ProxyParams,
    pub balance: Balance,
    pub stats: NormStats,
    pub clusters: ClusterAssignment,
    pub trajectories: Trajectories,
}

impl TrainedState {
    pub fn uncertainty(&self) -> UncertaintyParams {
        self.balance.uncertainty
    }
}

pub fn train_coido(config: &TrainConfig, dataset: &Dataset) -> Result<TrainedState> {
    let prepared = prepare(config, dataset)?;
    train_prepared(config, &prepared)
}

fn diverged(step: usize, reason: String) -> Error {
    Error::DivergedLoss { step, reason }
}

pub fn train_prepared(config: &TrainConfig, prepared: &Prepared) -> Result<TrainedState> {
    config.validate()?;
    let n = prepared.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if prepared.features.len() != n || prepared.labels.len() != n || prepared.clusters.len() != n {
        return Err(Error::InconsistentBatch("prepared training data has mismatched lengths".into()));
    }
    let dim = prepared.features[0].len();
    let mut init_rng = stream(config.seed, Stream::Init);
    let mut scorer = ScorerParams::init(dim, config.hidden, &mut init_rng);
    let mut proxy = ProxyParams::init(prepared.num_classes, dim, &mut init_rng);
    let mut balance = Balance::new(config.loss_mode, config.lambda, config.learnable_lambda)?;

    let mut scorer_adam = AdamState::new(scorer.as_slice().len());
    let mut proxy_adam = AdamState::new(proxy.as_slice().len());
    let mut unc_adam = AdamState::new(2);
    let mut lambda_adam = AdamState::new(1);

    let mut traj = Trajectories::default();
    let mut batch_rng = stream(config.seed, Stream::Batching);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut batch_rng);
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&k| prepared.features[k].values()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&k| prepared.labels[k]).collect();
            let ces = batch_ce(&proxy, &xs, &ys)?;
            let raw = xs
                .iter()
                .map(|x| scorer_forward(&scorer, x))
                .collect::<Result<Vec<f64>>>()?;
            let batch = BatchState::new(
                chunk.iter().map(|&k| prepared.subset[k]).collect(),
                raw,
                ces,
                chunk.iter().map(|&k| prepared.clusters.assignment[k]).collect(),
            )
            .map_err(|e| diverged(step, e.to_string()))?;
            let grad = objective_backward(&batch, &balance).map_err(|e| diverged(step, e.to_string()))?;
            let b = &grad.breakdown;
            if !b.total.is_finite() {
                return Err(diverged(step, format!("total loss {}", b.total)));
            }
            traj.loss.push(b.total);
            traj.importance_loss.push(b.l_i);
            traj.diversity_loss.push(b.l_d);
            traj.sigma_i.push(b.sigma_i_sq.sqrt());
            traj.sigma_d.push(b.sigma_d_sq.sqrt());
            traj.cluster_mean_std.push(b.l_d.sqrt());
            traj.lambda.push(balance.lambda());

            let proxy_grad = proxy_ce_grad(&proxy, &xs, &ys, &grad.ce_coeffs)?;
            let scorer_grad = scorer_backward_raw(&scorer, &xs, &grad.d_raw)?;
            adam_step(proxy.as_mut_slice(), &proxy_grad, &mut proxy_adam, config.lr_proxy)?;
            adam_step(scorer.as_mut_slice(), &scorer_grad, &mut scorer_adam, config.lr_scorer)?;
            if balance.learns_uncertainty() {
                let mut s = [balance.uncertainty.s_i, balance.uncertainty.s_d];
                adam_step(&mut s, &[grad.d_s_i, grad.d_s_d], &mut unc_adam, config.lr_uncertainty)?;
                balance.uncertainty = UncertaintyParams::new(s[0], s[1]);
                if s.iter().any(|v| !v.is_finite() || v.abs() > MAX_LOG_VARIANCE) {
                    return Err(diverged(step, format!("log-variances ({}, {}) out of range", s[0], s[1])));
                }
            }
            if let (Some(z), Some(dz)) = (balance.lambda_logit(), grad.d_lambda_logit) {
                let mut zs = [z];
                adam_step(&mut zs, &[dz], &mut lambda_adam, config.lr_uncertainty)?;
                balance.set_lambda_logit(zs[0]);
            }
            step += 1;
        }
    }
    if scorer.as_slice().iter().chain(proxy.as_slice()).any(|v| !v.is_finite()) {
        return Err(diverged(step, "non-finite parameters".into()));
    }
    Ok(TrainedState {
        scorer,
        proxy,
        balance,
        stats: prepared.stats,
        clusters: prepared.clusters.clone(),
        trajectories: traj,
    })
}

/// `max(1, ⌊γ n⌋)`, with a tolerance so products like `0.29 × 100` land on 29.
pub fn selection_count(gamma: f64, n: usize) -> usize {
    ((gamma * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Per task: sort by `(score, id)` ascending and keep `max(1, ⌊γ n_task⌋)`.
pub fn select_entries(entries: Vec<SelectedSample>, gamma: f64) -> Result<SelectionResult> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidConfig(format!("gamma = {gamma} outside (0, 1]")));
    }
    if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
        return Err(Error::NonFiniteInput(format!("score of {}", e.id)));
    }
    let mut by_task: BTreeMap<String, Vec<SelectedSample>> = BTreeMap::new();
    for e in entries {
        by_task.entry(e.task.clone()).or_default().push(e);
    }
    let mut chosen = Vec::new();
    for (_, mut pool) in by_task {
        pool.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.id.cmp(&b.id)));
        let k = selection_count(gamma, pool.len());
        chosen.extend(pool.into_iter().take(k));
    }
    Ok(SelectionResult::new(gamma, chosen))
}

pub fn scored_entries(scores: &[f64], dataset: &Dataset) -> Result<Vec<SelectedSample>> {
    if scores.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: dataset.len(),
        });
    }
    Ok(dataset
        .samples()
        .iter()
        .zip(scores)
        .map(|(r, &score)| SelectedSample {
            id: r.id.clone(),
            task: r.task.clone(),
            score,
        })
        .collect())
}

pub fn select_subset(scores: &[f64], dataset: &Dataset, gamma: f64) -> Result<SelectionResult> {
    select_entries(scored_entries(scores, dataset)?, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty);
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(ScoreSummary {
            min: sorted[0],
            max: sorted[n - 1],
            mean: mean(scores),
            std: population_variance(scores)?.sqrt(),
            median,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub config_fingerprint: String,
    pub config: TrainConfig,
    pub dataset_size: usize,
    pub training_subset_size: usize,
    pub steps: usize,
    pub selected_total: usize,
    pub per_task_counts: BTreeMap<String, usize>,
    pub per_task_ids: BTreeMap<String, Vec<String>>,
    pub score_summary: ScoreSummary,
    pub selected_score_summary: ScoreSummary,
    pub final_s_i: f64,
    pub final_s_d: f64,
    pub final_lambda: f64,
    pub cluster_sizes: Vec<usize>,
    pub loss_curve: Vec<f64>,
    pub importance_loss: Vec<f64>,
    pub diversity_loss: Vec<f64>,
    pub sigma_i: Vec<f64>,
    pub sigma_d: Vec<f64>,
    pub cluster_mean_std: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl SelectionReport {
    pub fn build(
        config: &TrainConfig,
        dataset: &Dataset,
        state: &TrainedState,
        training_subset_size: usize,
        scores: &[f64],
        selection: &SelectionResult,
    ) -> Result<Self> {
        let mut per_task_ids: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in &selection.entries {
            per_task_ids.entry(e.task.clone()).or_default().push(e.id.clone());
        }
        let selected_scores: Vec<f64> = selection.entries.iter().map(|e| e.score).collect();
        let t = state.trajectories.clone();
        Ok(SelectionReport {
            config_fingerprint: config.fingerprint(),
            config: config.clone(),
            dataset_size: dataset.len(),
            training_subset_size,
            steps: t.len(),
            selected_total: selection.len(),
            per_task_counts: selection.per_task_counts(),
            per_task_ids,
            score_summary: ScoreSummary::of(scores)?,
            selected_score_summary: ScoreSummary::of(&selected_scores)?,
            final_s_i: state.balance.uncertainty.s_i,
            final_s_d: state.balance.uncertainty.s_d,
            final_lambda: state.balance.lambda(),
            cluster_sizes: state.clusters.counts.clone(),
            loss_curve: t.loss,
            importance_loss: t.importance_loss,
            diversity_loss: t.diversity_loss,
            sigma_i: t.sigma_i,
            sigma_d: t.sigma_d,
            cluster_mean_std: t.cluster_mean_std,
            lambda: t.lambda,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub const SELECTION_FILE: &str = "selection.tsv";
pub const SCORES_FILE: &str = "scores.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const CLUSTERS_FILE: &str = "clusters.tsv";

/// Everything `run_pipeline` produces, before it touches the disk.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub state: TrainedState,
    pub scores: Vec<f64>,
    pub selection: SelectionResult,
    pub checkpoint: ScorerCheckpoint,
    pub report: SelectionReport,
    pub cluster_dump: String,
}

pub fn run_in_memory(config: &TrainConfig, dataset: &Dataset) -> Result<PipelineOutput> {
    let prepared = prepare(config, dataset)?;
    let state = train_prepared(config, &prepared)?;
    let scores = infer_all_scores(&state.scorer, dataset, &state.stats)?;
    let selection = select_subset(&scores, dataset, config.gamma)?;
    let checkpoint = ScorerCheckpoint::new(&state.scorer, state.stats, config.fingerprint());
    let report = SelectionReport::build(config, dataset, &state, prepared.len(), &scores, &selection)?;
    let mut cluster_dump = String::new();
    for (&i, c) in prepared.subset.iter().zip(&prepared.clusters.assignment) {
        cluster_dump.push_str(&format!("{}\t{c}\n", dataset.samples()[i].id));
    }
    Ok(PipelineOutput {
        state,
        scores,
        selection,
        checkpoint,
        report,
        cluster_dump,
    })
}

/// Trains, scores the full dataset, selects, and writes the selection,
/// all scores, the scorer checkpoint, the training clusters and the report
/// into `out_dir`. Either every file lands or none does.
pub fn run_pipeline(config: &TrainConfig, dataset_path: &Path, out_dir: &Path) -> Result<SelectionReport> {
    let dataset = load_dataset(dataset_path)?;
    let out = run_in_memory(config, &dataset)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let all_scores = scored_entries(&out.scores, &dataset)?;
    let mut staged = StagedWrites::new();
    staged.stage(&out_dir.join(SELECTION_FILE), out.selection.to_tsv().as_bytes())?;
    staged.stage(&out_dir.join(SCORES_FILE), format_scores(&all_scores).as_bytes())?;
    staged.stage(&out_dir.join(CHECKPOINT_FILE), out.checkpoint.to_json().as_bytes())?;
    staged.stage(&out_dir.join(CLUSTERS_FILE), out.cluster_dump.as_bytes())?;
    staged.stage(&out_dir.join(REPORT_FILE), out.report.to_json().as_bytes())?;
    staged.commit()?;
    Ok(out.report)
}
