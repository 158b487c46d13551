//! Linear softmax classifier standing in for the task model.
//!
//! It supplies per-sample cross-entropies to the importance objective and
//! receives the weighted CE gradient in return.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp};

const INIT_SCALE: f64 = 0.01;

/// Weights `C × D` (row-major) followed by `C` biases, in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyParams {
    classes: usize,
    input_dim: usize,
    values: Vec<f64>,
}

impl ProxyParams {
    pub fn zeros(classes: usize, input_dim: usize) -> Self {
        ProxyParams {
            classes,
            input_dim,
            values: vec![0.0; classes * input_dim + classes],
        }
    }

    /// Small uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(classes: usize, input_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(classes, input_dim);
        for w in &mut p.values[..classes * input_dim] {
            *w = rng.random_range(-INIT_SCALE..INIT_SCALE);
        }
        p
    }

    pub fn from_parts(classes: usize, input_dim: usize, values: Vec<f64>) -> Result<Self> {
        let expected = classes * input_dim + classes;
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(ProxyParams {
            classes,
            input_dim,
            values,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn weight_row(&self, c: usize) -> &[f64] {
        &self.values[c * self.input_dim..(c + 1) * self.input_dim]
    }

    pub fn bias(&self, c: usize) -> f64 {
        self.values[self.classes * self.input_dim + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// `W x + b`.
pub fn proxy_forward(params: &ProxyParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim,
            actual: x.len(),
        });
    }
    Ok((0..params.classes)
        .map(|c| dot(params.weight_row(c), x) + params.bias(c))
        .collect())
}

/// Cross-entropy and the softmax probabilities it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub probs: Vec<f64>,
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<CrossEntropy> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let lse = log_sum_exp(logits);
    let probs = logits.iter().map(|f| (f - lse).exp()).collect();
    Ok(CrossEntropy {
        loss: (lse - logits[label]).max(0.0),
        probs,
    })
}

/// `−f_c + log Σ_j exp(f_j)`.
pub fn per_sample_ce(logits: &[f64], label: usize) -> Result<f64> {
    cross_entropy(logits, label).map(|ce| ce.loss)
}

/// Per-sample CE of the proxy over a set of inputs.
pub fn batch_ce(params: &ProxyParams, xs: &[&[f64]], labels: &[usize]) -> Result<Vec<f64>> {
    if xs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: labels.len(),
        });
    }
    xs.iter()
        .zip(labels)
        .map(|(x, &y)| per_sample_ce(&proxy_forward(params, x)?, y))
        .collect()
}

/// `Σ_k coeff_k · ∂CE_k/∂θ`, accumulated in batch order.
pub fn proxy_ce_grad(
    params: &ProxyParams,
    xs: &[&[f64]],
    labels: &[usize],
    coeffs: &[f64],
) -> Result<Vec<f64>> {
    if xs.len() != labels.len() || xs.len() != coeffs.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: labels.len().min(coeffs.len()),
        });
    }
    let (c, d) = (params.classes, params.input_dim);
    let mut grad = vec![0.0; params.values.len()];
    for ((x, &y), &coef) in xs.iter().zip(labels).zip(coeffs) {
        if coef == 0.0 {
            continue;
        }
        let ce = cross_entropy(&proxy_forward(params, x)?, y)?;
        for class in 0..c {
            // ∂CE/∂f = p − onehot(y)
            let delta = coef * (ce.probs[class] - if class == y { 1.0 } else { 0.0 });
            let row = &mut grad[class * d..(class + 1) * d];
            for (g, xi) in row.iter_mut().zip(x.iter()) {
                *g += delta * xi;
            }
            grad[c * d + class] += delta;
        }
    }
    Ok(grad)
}

/// Gradient of `(1/σ_I²) Σ_k w_k CE_k` with respect to the proxy parameters.
pub fn proxy_weighted_grad(
    params: &ProxyParams,
    xs: &[&[f64]],
    labels: &[usize],
    weights: &[f64],
    sigma_i_sq_inv: f64,
) -> Result<Vec<f64>> {
    let coeffs: Vec<f64> = weights.iter().map(|w| w * sigma_i_sq_inv).collect();
    proxy_ce_grad(params, xs, labels, &coeffs)
}

pub fn predict(params: &ProxyParams, x: &[f64]) -> Result<usize> {
    let logits = proxy_forward(params, x)?;
    Ok(logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0)
}
