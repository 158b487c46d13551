//! The four-layer scorer network, its batch softmax, hand-written backward
//! pass, full-dataset inference and checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fuse_features, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::numerics::{batch_softmax, dot};

pub const LAYERS: usize = 4;

/// Weights of `D → h → h → h → 1` with ReLU between layers, stored flat as
/// `[W1, b1, W2, b2, W3, b3, W4, b4]` with row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    input_dim: usize,
    hidden: usize,
    values: Vec<f64>,
}

impl ScorerParams {
    /// `(rows, cols)` of each weight matrix.
    pub fn layer_shapes(input_dim: usize, hidden: usize) -> [(usize, usize); LAYERS] {
        [(hidden, input_dim), (hidden, hidden), (hidden, hidden), (1, hidden)]
    }

    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        Self::layer_shapes(input_dim, hidden)
            .iter()
            .map(|(r, c)| r * c + r)
            .sum()
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        ScorerParams {
            input_dim,
            hidden,
            values: vec![0.0; Self::param_count(input_dim, hidden)],
        }
    }

    /// Uniform `±1/√fan_in` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let mut offset = 0;
        for (rows, cols) in Self::layer_shapes(input_dim, hidden) {
            let bound = 1.0 / (cols as f64).sqrt();
            for v in &mut p.values[offset..offset + rows * cols + rows] {
                *v = rng.random_range(-bound..bound);
            }
            offset += rows * cols + rows;
        }
        p
    }

    pub fn from_parts(input_dim: usize, hidden: usize, values: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(input_dim, hidden);
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(ScorerParams {
            input_dim,
            hidden,
            values,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Offset of layer `l`'s weights, its bias offset and its shape.
    fn layout(&self, l: usize) -> (usize, usize, usize, usize) {
        let shapes = Self::layer_shapes(self.input_dim, self.hidden);
        let offset: usize = shapes[..l].iter().map(|(r, c)| r * c + r).sum();
        let (rows, cols) = shapes[l];
        (offset, offset + rows * cols, rows, cols)
    }
}

struct Trace {
    /// Input to each layer (x, then post-ReLU activations).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    output: f64,
}

fn forward_trace(params: &ScorerParams, x: &[f64]) -> Result<Trace> {
    if x.len() != params.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim,
            actual: x.len(),
        });
    }
    let mut inputs = Vec::with_capacity(LAYERS);
    let mut pre = Vec::with_capacity(LAYERS - 1);
    let mut current = x.to_vec();
    for l in 0..LAYERS {
        let (w, b, rows, cols) = params.layout(l);
        let z: Vec<f64> = (0..rows)
            .map(|r| dot(&params.values[w + r * cols..w + (r + 1) * cols], &current) + params.values[b + r])
            .collect();
        inputs.push(current);
        if l + 1 < LAYERS {
            current = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
        } else {
            return Ok(Trace {
                inputs,
                pre,
                output: z[0],
            });
        }
    }
    unreachable!("loop returns on the last layer")
}

/// Raw (pre-softmax) score of one fused feature vector.
pub fn scorer_forward(params: &ScorerParams, x: &[f64]) -> Result<f64> {
    forward_trace(params, x).map(|t| t.output)
}

/// Which hidden units are active for `x`; finite-difference checks skip
/// coordinates whose stencil flips this pattern.
pub fn relu_pattern(params: &ScorerParams, x: &[f64]) -> Result<Vec<bool>> {
    let t = forward_trace(params, x)?;
    Ok(t.pre.into_iter().flatten().map(|z| z > 0.0).collect())
}

/// Accumulates `upstream · ∂score/∂θ` into `grad`.
fn backprop_into(params: &ScorerParams, trace: &Trace, upstream: f64, grad: &mut [f64]) {
    let mut delta = vec![upstream];
    for l in (0..LAYERS).rev() {
        let (w, b, rows, cols) = params.layout(l);
        let input = &trace.inputs[l];
        for r in 0..rows {
            let d = delta[r];
            if d == 0.0 {
                continue;
            }
            for (g, xi) in grad[w + r * cols..w + (r + 1) * cols].iter_mut().zip(input) {
                *g += d * xi;
            }
            grad[b + r] += d;
        }
        if l == 0 {
            break;
        }
        let pre = &trace.pre[l - 1];
        delta = (0..cols)
            .map(|c| {
                if pre[c] <= 0.0 {
                    return 0.0;
                }
                (0..rows)
                    .map(|r| delta[r] * params.values[w + r * cols + c])
                    .sum()
            })
            .collect();
    }
}

/// Per-batch softmax of raw scores.
pub fn make_batch_weights(raw_scores: &[f64]) -> Result<Vec<f64>> {
    batch_softmax(raw_scores)
}

/// Chains `∂L/∂w` through the softmax Jacobian `w_k(δ_kl − w_l)`.
pub fn softmax_backward(weights: &[f64], d_weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != d_weights.len() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: d_weights.len(),
        });
    }
    let mean: f64 = weights.iter().zip(d_weights).map(|(w, g)| w * g).sum();
    Ok(weights
        .iter()
        .zip(d_weights)
        .map(|(w, g)| w * (g - mean))
        .collect())
}

/// Per-batch bookkeeping for one training step.
#[derive(Debug, Clone)]
pub struct BatchState {
    pub indices: Vec<usize>,
    pub raw_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub ces: Vec<f64>,
    pub cluster_ids: Vec<usize>,
    /// Present cluster id → member count `n_i`.
    pub cluster_counts: BTreeMap<usize, usize>,
}

impl BatchState {
    pub fn new(
        indices: Vec<usize>,
        raw_scores: Vec<f64>,
        ces: Vec<f64>,
        cluster_ids: Vec<usize>,
    ) -> Result<Self> {
        let s = raw_scores.len();
        if indices.len() != s || ces.len() != s || cluster_ids.len() != s {
            return Err(Error::InconsistentBatch(format!(
                "lengths: indices {}, scores {s}, ces {}, clusters {}",
                indices.len(),
                ces.len(),
                cluster_ids.len()
            )));
        }
        if s == 0 {
            return Err(Error::InconsistentBatch("empty batch".into()));
        }
        let weights = make_batch_weights(&raw_scores)?;
        let mut cluster_counts = BTreeMap::new();
        for &c in &cluster_ids {
            *cluster_counts.entry(c).or_insert(0) += 1;
        }
        Ok(BatchState {
            indices,
            raw_scores,
            weights,
            ces,
            cluster_ids,
            cluster_counts,
        })
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    /// Distinct clusters present, `m`.
    pub fn clusters_present(&self) -> usize {
        self.cluster_counts.len()
    }
}

/// Gradient of the loss with respect to the scorer parameters, given
/// `∂L/∂w` for the batch's softmax weights.
pub fn scorer_backward(
    params: &ScorerParams,
    xs: &[&[f64]],
    weights: &[f64],
    d_weights: &[f64],
) -> Result<Vec<f64>> {
    if xs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: weights.len(),
        });
    }
    if d_weights.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("upstream weight gradient".into()));
    }
    let d_raw = softmax_backward(weights, d_weights)?;
    let mut grad = vec![0.0; params.values.len()];
    for (x, &up) in xs.iter().zip(&d_raw) {
        if up == 0.0 {
            continue;
        }
        let trace = forward_trace(params, x)?;
        backprop_into(params, &trace, up, &mut grad);
    }
    Ok(grad)
}

/// Gradient of `Σ_k upstream_k · score_k` with respect to the parameters.
pub fn scorer_backward_raw(params: &ScorerParams, xs: &[&[f64]], d_raw: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != d_raw.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: d_raw.len(),
        });
    }
    let mut grad = vec![0.0; params.values.len()];
    for (x, &up) in xs.iter().zip(d_raw) {
        let trace = forward_trace(params, x)?;
        backprop_into(params, &trace, up, &mut grad);
    }
    Ok(grad)
}

/// Raw scores for every sample, in dataset order.
pub fn infer_all_scores(params: &ScorerParams, dataset: &Dataset, stats: &NormStats) -> Result<Vec<f64>> {
    if dataset.feature_dim() != params.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim,
            actual: dataset.feature_dim(),
        });
    }
    dataset
        .samples()
        .par_iter()
        .map(|r| {
            let x = fuse_features(r, stats)?;
            scorer_forward(params, x.values())
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "coselect-scorer-v1";

/// Self-describing scorer checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerCheckpoint {
    pub format: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub layer_shapes: Vec<(usize, usize)>,
    pub params: Vec<f64>,
    pub norm_stats: NormStats,
    pub config_fingerprint: String,
}

impl ScorerCheckpoint {
    pub fn new(params: &ScorerParams, norm_stats: NormStats, config_fingerprint: String) -> Self {
        ScorerCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            input_dim: params.input_dim,
            hidden: params.hidden,
            layer_shapes: ScorerParams::layer_shapes(params.input_dim, params.hidden).to_vec(),
            params: params.values.clone(),
            norm_stats,
            config_fingerprint,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: ScorerCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::BadCheckpoint(format!("unknown format {:?}", ckpt.format)));
        }
        let expected = ScorerParams::layer_shapes(ckpt.input_dim, ckpt.hidden);
        if ckpt.layer_shapes != expected {
            return Err(Error::BadCheckpoint(format!(
                "layer shapes {:?} do not chain for input {} hidden {}",
                ckpt.layer_shapes, ckpt.input_dim, ckpt.hidden
            )));
        }
        if ckpt.params.len() != ScorerParams::param_count(ckpt.input_dim, ckpt.hidden) {
            return Err(Error::BadCheckpoint(format!(
                "{} parameters for shapes {:?}",
                ckpt.params.len(),
                ckpt.layer_shapes
            )));
        }
        if ckpt.params.iter().any(|v| !v.is_finite()) || !ckpt.norm_stats.is_finite() {
            return Err(Error::BadCheckpoint("non-finite values".into()));
        }
        Ok(ckpt)
    }

    pub fn scorer(&self) -> Result<ScorerParams> {
        ScorerParams::from_parts(self.input_dim, self.hidden, self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn random_params(d: usize, h: usize, seed: u64) -> ScorerParams {
        ScorerParams::init(d, h, &mut stream(seed, Stream::Init))
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Stream::Eval);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    // Independent layer-by-layer forward pass using explicit matrices.
    fn naive_forward(p: &ScorerParams, x: &[f64]) -> f64 {
        let (d, h) = (p.input_dim(), p.hidden());
        let v = p.as_slice();
        let mut off = 0;
        let mut act = x.to_vec();
        let dims = [(h, d), (h, h), (h, h), (1, h)];
        for (l, &(rows, cols)) in dims.iter().enumerate() {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += v[off + r * cols + c] * act[c];
                }
                out[r] = acc + v[off + rows * cols + r];
            }
            off += rows * cols + rows;
            act = if l < 3 { out.iter().map(|z| if *z > 0.0 { *z } else { 0.0 }).collect() } else { out };
        }
        act[0]
    }

    #[test]
    fn zero_params_score_zero() {
        let p = ScorerParams::zeros(5, 4);
        assert_eq!(scorer_forward(&p, &[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_propagated_two_unit_network() {
        // input [a, b] → hidden: unit0 = a + b, unit1 = b (identity-like paths);
        // layers 2 and 3 copy, output sums both units.
        let (d, h) = (2, 2);
        let mut v = Vec::new();
        v.extend([1.0, 1.0, 0.0, 1.0]); // W1
        v.extend([0.0, 0.0]); // b1
        v.extend([1.0, 0.0, 0.0, 1.0]); // W2
        v.extend([0.0, 0.0]);
        v.extend([1.0, 0.0, 0.0, 1.0]); // W3
        v.extend([0.0, 0.0]);
        v.extend([1.0, 1.0]); // W4
        v.push(0.5); // b4
        let p = ScorerParams::from_parts(d, h, v).unwrap();
        // a=2, b=3: units (5, 3) → output 5 + 3 + 0.5
        assert_eq!(scorer_forward(&p, &[2.0, 3.0]).unwrap(), 8.5);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        for seed in 0..25 {
            let p = random_params(7, 5, seed);
            let x = random_vec(7, seed);
            let a = scorer_forward(&p, &x).unwrap();
            assert!((a - naive_forward(&p, &x)).abs() < 1e-12);
            assert_eq!(a, scorer_forward(&p, &x).unwrap());
        }
        let p = random_params(3, 2, 0);
        assert!(matches!(scorer_forward(&p, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    fn loss_of(p: &ScorerParams, xs: &[&[f64]], coef: &[f64]) -> f64 {
        let raw: Vec<f64> = xs.iter().map(|x| scorer_forward(p, x).unwrap()).collect();
        let w = make_batch_weights(&raw).unwrap();
        // a nonlinear function of the weights so second-order structure is exercised
        w.iter().zip(coef).map(|(w, c)| c * w + 0.5 * w * w).sum()
    }

    fn relu_masks(p: &ScorerParams, xs: &[&[f64]]) -> Vec<bool> {
        xs.iter()
            .flat_map(|x| {
                let t = forward_trace(p, x).unwrap();
                t.pre.into_iter().flatten().map(|z| z > 0.0).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..100 {
            let mut p = random_params(4, 3, seed);
            let xs_owned: Vec<Vec<f64>> = (0..3).map(|k| random_vec(4, seed * 7 + k)).collect();
            let xs: Vec<&[f64]> = xs_owned.iter().map(Vec::as_slice).collect();
            let coef = random_vec(3, seed + 5000);
            let raw: Vec<f64> = xs.iter().map(|x| scorer_forward(&p, x).unwrap()).collect();
            let w = make_batch_weights(&raw).unwrap();
            let d_w: Vec<f64> = w.iter().zip(&coef).map(|(w, c)| c + w).collect();
            let g = scorer_backward(&p, &xs, &w, &d_w).unwrap();
            for i in 0..p.as_slice().len() {
                let orig = p.as_slice()[i];
                p.as_mut_slice()[i] = orig + h;
                let up = loss_of(&p, &xs, &coef);
                let mask_up = relu_masks(&p, &xs);
                p.as_mut_slice()[i] = orig - h;
                let down = loss_of(&p, &xs, &coef);
                let mask_down = relu_masks(&p, &xs);
                p.as_mut_slice()[i] = orig;
                // a ReLU switching inside the stencil makes the difference quotient meaningless
                if mask_up != mask_down {
                    continue;
                }
                let fd = (up - down) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs());
                if scale < 1e-9 {
                    continue;
                }
                let rel = (g[i] - fd).abs() / scale.max(1e-6);
                assert!(rel <= 1e-5, "seed {seed} param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn constant_or_zero_upstream_gives_zero_gradient() {
        let p = random_params(3, 4, 9);
        let xs_owned: Vec<Vec<f64>> = (0..4).map(|k| random_vec(3, 90 + k)).collect();
        let xs: Vec<&[f64]> = xs_owned.iter().map(Vec::as_slice).collect();
        let raw: Vec<f64> = xs.iter().map(|x| scorer_forward(&p, x).unwrap()).collect();
        let w = make_batch_weights(&raw).unwrap();
        let g = scorer_backward(&p, &xs, &w, &[0.7; 4]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let z = scorer_backward(&p, &xs, &w, &[0.0; 4]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_weights_cases() {
        assert_eq!(make_batch_weights(&[1.5; 8]).unwrap(), vec![0.125; 8]);
        let mut raw = vec![0.0; 8];
        raw[3] = 50.0;
        let w = make_batch_weights(&raw).unwrap();
        assert!(w[3] >= 1.0 - 1e-20);
        // 7·e^{-50} ≈ 1.35e-21
        assert!(w.iter().enumerate().filter(|(i, _)| *i != 3).all(|(_, &v)| v < 1e-21));
    }

    #[test]
    fn batch_state_bookkeeping() {
        let b = BatchState::new(
            vec![4, 5, 6],
            vec![0.1, 0.2, 0.3],
            vec![1.0, 2.0, 3.0],
            vec![2, 0, 2],
        )
        .unwrap();
        assert_eq!(b.clusters_present(), 2);
        assert_eq!(b.cluster_counts[&2], 2);
        assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(BatchState::new(vec![1], vec![0.0, 1.0], vec![1.0], vec![0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let p = random_params(6, 4, 3);
        let stats = NormStats { mean: [0.1, 0.2, 0.3], std: [1.0, 0.5, 0.0] };
        let ck = ScorerCheckpoint::new(&p, stats, "abc".into());
        let back = ScorerCheckpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.scorer().unwrap(), p);

        let mut bad = ck.clone();
        bad.layer_shapes[1] = (4, 5);
        assert!(matches!(
            ScorerCheckpoint::from_json(&bad.to_json()),
            Err(Error::BadCheckpoint(_))
        ));
        let mut short = ck;
        short.params.pop();
        assert!(matches!(
            ScorerCheckpoint::from_json(&short.to_json()),
            Err(Error::BadCheckpoint(_))
        ));
    }
}
