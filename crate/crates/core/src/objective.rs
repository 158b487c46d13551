//! Importance and diversity losses, their uncertainty-weighted coupling and
//! the analytic gradients used by the training loop.
//!
//! The uncertainties are stored as log-variances `s = log σ²`, so
//! `σ² = exp(s)` is positive for any finite `s` and `s = 0` means `σ = 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, mean, population_variance};
use crate::proxy::per_sample_ce;
use crate::scorer::{softmax_backward, BatchState};

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UncertaintyParams {
    pub s_i: f64,
    pub s_d: f64,
}

impl UncertaintyParams {
    pub fn new(s_i: f64, s_d: f64) -> Self {
        UncertaintyParams { s_i, s_d }
    }

    pub fn sigma_i_sq(&self) -> f64 {
        self.s_i.exp()
    }

    pub fn sigma_d_sq(&self) -> f64 {
        self.s_d.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.s_i.is_finite() && self.s_d.is_finite()
    }
}

/// How the two losses are combined into the training total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Uncertainty-weighted: `e^{-s_I} L_I + ½e^{-s_D} L_D + s_I/2 + s_D/2`.
    Coido,
    ImportanceOnly,
    PlainSum,
    /// `λ L_I + (1 − λ) L_D`, optionally with `λ = sigmoid(z)` learned.
    FixedLambda,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::Coido,
        LossMode::ImportanceOnly,
        LossMode::PlainSum,
        LossMode::FixedLambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Coido => "coido",
            LossMode::ImportanceOnly => "importance_only",
            LossMode::PlainSum => "plain_sum",
            LossMode::FixedLambda => "fixed_lambda",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss mode {s:?}")))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A loss mode together with its current trainable balancing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Balance {
    pub mode: LossMode,
    pub uncertainty: UncertaintyParams,
    lambda: f64,
    lambda_logit: Option<f64>,
}

impl Balance {
    pub fn coido(uncertainty: UncertaintyParams) -> Self {
        Balance {
            mode: LossMode::Coido,
            uncertainty,
            lambda: 0.5,
            lambda_logit: None,
        }
    }

    /// Uncertainties start at `s = 0`; a learnable λ starts at `logit(lambda)`.
    pub fn new(mode: LossMode, lambda: f64, learnable_lambda: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidConfig(format!("lambda {lambda} outside [0, 1]")));
        }
        let lambda_logit = if mode == LossMode::FixedLambda && learnable_lambda {
            if lambda <= 0.0 || lambda >= 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "learnable lambda needs a start in (0, 1), got {lambda}"
                )));
            }
            Some((lambda / (1.0 - lambda)).ln())
        } else {
            None
        };
        Ok(Balance {
            mode,
            uncertainty: UncertaintyParams::default(),
            lambda,
            lambda_logit,
        })
    }

    pub fn lambda(&self) -> f64 {
        match self.lambda_logit {
            Some(z) => sigmoid(z),
            None => self.lambda,
        }
    }

    pub fn lambda_logit(&self) -> Option<f64> {
        self.lambda_logit
    }

    pub fn set_lambda_logit(&mut self, z: f64) {
        if self.lambda_logit.is_some() {
            self.lambda_logit = Some(z);
        }
    }

    pub fn learns_uncertainty(&self) -> bool {
        self.mode == LossMode::Coido
    }

    /// Multipliers `(a, b)` of `L_I` and `L_D` in the total.
    pub fn coefficients(&self) -> (f64, f64) {
        match self.mode {
            LossMode::Coido => (
                (-self.uncertainty.s_i).exp(),
                0.5 * (-self.uncertainty.s_d).exp(),
            ),
            LossMode::ImportanceOnly => (1.0, 0.0),
            LossMode::PlainSum => (1.0, 1.0),
            LossMode::FixedLambda => {
                let l = self.lambda();
                (l, 1.0 - l)
            }
        }
    }

    pub fn total(&self, l_i: f64, l_d: f64) -> Result<f64> {
        match self.mode {
            LossMode::Coido => coupled_total(l_i, l_d, &self.uncertainty),
            _ => {
                let (a, b) = self.coefficients();
                let t = a * l_i + b * l_d;
                if t.is_finite() {
                    Ok(t)
                } else {
                    Err(Error::NonFinite("total loss".into()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_i: f64,
    pub l_d: f64,
    pub total: f64,
    pub sigma_i_sq: f64,
    pub sigma_d_sq: f64,
    pub cluster_means: BTreeMap<usize, f64>,
    pub mu: f64,
}

/// `Σ_k w_k ce_k`.
pub fn importance_loss(weights: &[f64], ces: &[f64]) -> Result<f64> {
    if weights.len() != ces.len() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: ces.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized(sum));
    }
    if ces.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    Ok(weights.iter().zip(ces).map(|(w, c)| w * c).sum())
}

/// Mean weight of every cluster that has at least one member in the batch.
pub fn cluster_mean_weights(weights: &[f64], cluster_ids: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if weights.len() != cluster_ids.len() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: cluster_ids.len(),
        });
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&w, &c) in weights.iter().zip(cluster_ids) {
        let e = acc.entry(c).or_insert((0.0, 0));
        e.0 += w;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect())
}

/// Population variance of the cluster means.
pub fn diversity_loss(cluster_means: &BTreeMap<usize, f64>) -> Result<f64> {
    let values: Vec<f64> = cluster_means.values().copied().collect();
    population_variance(&values)
}

/// `∂L_D/∂w_k = (2/m)(w̄_{c(k)} − μ)/n_{c(k)}`.
pub fn diversity_grad(weights: &[f64], cluster_ids: &[usize]) -> Result<Vec<f64>> {
    let means = cluster_mean_weights(weights, cluster_ids)?;
    if means.is_empty() {
        return Err(Error::Empty);
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in cluster_ids {
        *counts.entry(c).or_insert(0) += 1;
    }
    let m = means.len() as f64;
    let mu = mean(&means.values().copied().collect::<Vec<_>>());
    Ok(cluster_ids
        .iter()
        .map(|c| 2.0 / m * (means[c] - mu) / counts[c] as f64)
        .collect())
}

/// `e^{-s_I} L_I + ½ e^{-s_D} L_D + s_I/2 + s_D/2`.
pub fn coupled_total(l_i: f64, l_d: f64, u: &UncertaintyParams) -> Result<f64> {
    if !l_i.is_finite() || !l_d.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite("coupled total inputs".into()));
    }
    if l_d < 0.0 {
        return Err(Error::NonFinite(format!("negative diversity loss {l_d}")));
    }
    let t = (-u.s_i).exp() * l_i + 0.5 * (-u.s_d).exp() * l_d + 0.5 * u.s_i + 0.5 * u.s_d;
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite("coupled total".into()))
    }
}

/// Losses of a batch given its weights, CEs and cluster ids.
pub fn evaluate(balance: &Balance, weights: &[f64], ces: &[f64], cluster_ids: &[usize]) -> Result<LossBreakdown> {
    let l_i = importance_loss(weights, ces)?;
    let cluster_means = cluster_mean_weights(weights, cluster_ids)?;
    let l_d = diversity_loss(&cluster_means)?;
    let mu = mean(&cluster_means.values().copied().collect::<Vec<_>>());
    Ok(LossBreakdown {
        l_i,
        l_d,
        total: balance.total(l_i, l_d)?,
        sigma_i_sq: balance.uncertainty.sigma_i_sq(),
        sigma_d_sq: balance.uncertainty.sigma_d_sq(),
        cluster_means,
        mu,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub breakdown: LossBreakdown,
    /// `∂total/∂w_k`.
    pub d_weights: Vec<f64>,
    /// `∂total/∂r_k` for the raw scorer outputs.
    pub d_raw: Vec<f64>,
    /// `∂total/∂ce_k`; the proxy gradient is `Σ_k ce_coeffs_k ∂ce_k/∂θ`.
    pub ce_coeffs: Vec<f64>,
    pub d_s_i: f64,
    pub d_s_d: f64,
    /// Present only for a learnable λ.
    pub d_lambda_logit: Option<f64>,
}

/// Analytic gradients of the balanced total for one batch.
pub fn objective_backward(batch: &BatchState, balance: &Balance) -> Result<ObjectiveGrad> {
    let s = batch.size();
    if batch.ces.len() != s || batch.cluster_ids.len() != s {
        return Err(Error::InconsistentBatch(format!(
            "batch of {s} with {} CEs and {} cluster ids",
            batch.ces.len(),
            batch.cluster_ids.len()
        )));
    }
    let breakdown = evaluate(balance, &batch.weights, &batch.ces, &batch.cluster_ids)?;
    let (a, b) = balance.coefficients();
    let div = diversity_grad(&batch.weights, &batch.cluster_ids)?;
    let d_weights: Vec<f64> = batch
        .ces
        .iter()
        .zip(&div)
        .map(|(ce, g)| a * ce + b * g)
        .collect();
    let d_raw = softmax_backward(&batch.weights, &d_weights)?;
    let ce_coeffs = batch.weights.iter().map(|w| a * w).collect();
    let (d_s_i, d_s_d) = if balance.learns_uncertainty() {
        (-a * breakdown.l_i + 0.5, -b * breakdown.l_d + 0.5)
    } else {
        (0.0, 0.0)
    };
    let d_lambda_logit = balance.lambda_logit().map(|_| {
        let l = balance.lambda();
        l * (1.0 - l) * (breakdown.l_i - breakdown.l_d)
    });
    Ok(ObjectiveGrad {
        breakdown,
        d_weights,
        d_raw,
        ce_coeffs,
        d_s_i,
        d_s_d,
        d_lambda_logit,
    })
}

/// Gradients of the uncertainty-weighted total.
pub fn coupled_backward(batch: &BatchState, u: &UncertaintyParams) -> Result<ObjectiveGrad> {
    objective_backward(batch, &Balance::coido(*u))
}

fn check_sigma(sigma_i_sq: f64) -> Result<()> {
    if sigma_i_sq > 0.0 && sigma_i_sq.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("sigma_I^2 must be positive, got {sigma_i_sq}")))
    }
}

/// NLL of the label under the Boltzmann distribution over logits scaled by
/// `α = w/σ_I²`: `−α f_c + log Σ_j exp(α f_j)`.
pub fn exact_weighted_nll(logits: &[f64], label: usize, w: f64, sigma_i_sq: f64) -> Result<f64> {
    check_sigma(sigma_i_sq)?;
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let alpha = w / sigma_i_sq;
    let scaled: Vec<f64> = logits.iter().map(|f| alpha * f).collect();
    Ok(log_sum_exp(&scaled) - scaled[label])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorGap {
    /// `|exact − α·CE|`.
    pub gap: f64,
    /// `exact − α·CE = log Σ_j p_j^α`.
    pub signed_gap: f64,
    /// `H(p) = −Σ p_j log p_j`.
    pub entropy: f64,
    pub alpha: f64,
    /// What the first-order term `−(α−1)H(p)` fails to explain.
    pub residual: f64,
}

/// How far the weighted NLL is from its linearization `α·CE`.
pub fn approximation_gap(logits: &[f64], label: usize, w: f64, sigma_i_sq: f64) -> Result<TaylorGap> {
    check_sigma(sigma_i_sq)?;
    let ce = per_sample_ce(logits, label)?;
    let alpha = w / sigma_i_sq;
    let lse = log_sum_exp(logits);
    let log_p: Vec<f64> = logits.iter().map(|f| f - lse).collect();
    let entropy = -log_p
        .iter()
        .map(|lp| if lp.is_finite() { lp.exp() * lp } else { 0.0 })
        .sum::<f64>();
    let signed_gap = if alpha == 1.0 {
        0.0
    } else {
        let scaled: Vec<f64> = log_p.iter().map(|lp| alpha * lp).collect();
        log_sum_exp(&scaled)
    };
    debug_assert!({
        let exact = exact_weighted_nll(logits, label, w, sigma_i_sq)?;
        (exact - alpha * ce - signed_gap).abs() <= 1e-9 * (1.0 + exact.abs())
    });
    Ok(TaylorGap {
        gap: signed_gap.abs(),
        signed_gap,
        entropy,
        alpha,
        residual: (signed_gap + (alpha - 1.0) * entropy).abs(),
    })
}
