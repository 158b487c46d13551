//! Self-checks runnable without a dataset: analytic gradients against finite
//! differences, the linearization gap of the weighted NLL, spectral recovery
//! of planted blobs, and bit-for-bit reproducibility of the pipeline.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bench::{gen_synthetic, SyntheticSpec};
use crate::clustering::{adjusted_rand_index, normalized_laplacian, spectral_cluster, KnnGraph};
use crate::dataset::FeatureVector;
use crate::error::Result;
use crate::numerics::jacobi_eigh;
use crate::objective::{approximation_gap, coupled_backward, coupled_total, exact_weighted_nll, UncertaintyParams};
use crate::pipeline::{run_in_memory, TrainConfig};
use crate::proxy::{batch_ce, per_sample_ce, proxy_ce_grad, ProxyParams};
use crate::rng::{stream, Stream};
use crate::scorer::{relu_pattern, scorer_backward_raw, scorer_forward, BatchState, ScorerParams};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Below this magnitude gradients are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;

/// Worst relative error over every checked coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub instances: usize,
    pub coordinates: usize,
    /// Scorer coordinates whose stencil crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

struct Instance {
    scorer: ScorerParams,
    proxy: ProxyParams,
    xs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    clusters: Vec<usize>,
    u: UncertaintyParams,
}

impl Instance {
    fn random(seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Eval);
        let s = rng.random_range(2..=8);
        let m = rng.random_range(1..=3);
        let d = rng.random_range(1..=8);
        let classes = rng.random_range(2..=5);
        let hidden = rng.random_range(2..=6);
        let mut init = stream(seed, Stream::Init);
        let scorer = ScorerParams::init(d, hidden, &mut init);
        let proxy_values = (0..classes * d + classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proxy = ProxyParams::from_parts(classes, d, proxy_values).expect("sized above");
        let xs = (0..s)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels = (0..s).map(|_| rng.random_range(0..classes)).collect();
        let clusters = (0..s).map(|_| rng.random_range(0..m)).collect();
        let u = UncertaintyParams::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Instance {
            scorer,
            proxy,
            xs,
            labels,
            clusters,
            u,
        }
    }

    fn inputs(&self) -> Vec<&[f64]> {
        self.xs.iter().map(Vec::as_slice).collect()
    }

    fn batch(&self, scorer: &ScorerParams, proxy: &ProxyParams) -> Result<BatchState> {
        let xs = self.inputs();
        let raw = xs.iter().map(|x| scorer_forward(scorer, x)).collect::<Result<Vec<_>>>()?;
        let ces = batch_ce(proxy, &xs, &self.labels)?;
        BatchState::new((0..xs.len()).collect(), raw, ces, self.clusters.clone())
    }

    fn total(&self, scorer: &ScorerParams, proxy: &ProxyParams, u: &UncertaintyParams) -> Result<f64> {
        let batch = self.batch(scorer, proxy)?;
        Ok(coupled_backward(&batch, u)?.breakdown.total)
    }

    fn pattern(&self, scorer: &ScorerParams) -> Result<Vec<bool>> {
        let mut out = Vec::new();
        for x in &self.xs {
            out.extend(relu_pattern(scorer, x)?);
        }
        Ok(out)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central differences of the uncertainty-weighted total with respect to the
/// scorer, the proxy, `s_I` and `s_D` on `instances` random small batches.
pub fn gradient_check(instances: usize, seed: u64) -> Result<GradientCheck> {
    let h = FD_STEP;
    let mut out = GradientCheck {
        instances,
        coordinates: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    for k in 0..instances as u64 {
        let inst = Instance::random(seed.wrapping_mul(1_000_003).wrapping_add(k));
        let batch = inst.batch(&inst.scorer, &inst.proxy)?;
        let grad = coupled_backward(&batch, &inst.u)?;
        let xs = inst.inputs();
        let g_scorer = scorer_backward_raw(&inst.scorer, &xs, &grad.d_raw)?;
        let g_proxy = proxy_ce_grad(&inst.proxy, &xs, &inst.labels, &grad.ce_coeffs)?;

        let base_pattern = inst.pattern(&inst.scorer)?;
        let mut scorer = inst.scorer.clone();
        for i in 0..g_scorer.len() {
            let orig = scorer.as_slice()[i];
            scorer.as_mut_slice()[i] = orig + h;
            let up = inst.total(&scorer, &inst.proxy, &inst.u)?;
            let kink_up = inst.pattern(&scorer)? != base_pattern;
            scorer.as_mut_slice()[i] = orig - h;
            let down = inst.total(&scorer, &inst.proxy, &inst.u)?;
            let kink_down = inst.pattern(&scorer)? != base_pattern;
            scorer.as_mut_slice()[i] = orig;
            if kink_up || kink_down {
                out.skipped += 1;
                continue;
            }
            out.coordinates += 1;
            out.max_rel_err = out.max_rel_err.max(rel_err(g_scorer[i], (up - down) / (2.0 * h)));
        }

        let mut proxy = inst.proxy.clone();
        for i in 0..g_proxy.len() {
            let orig = proxy.as_slice()[i];
            proxy.as_mut_slice()[i] = orig + h;
            let up = inst.total(&inst.scorer, &proxy, &inst.u)?;
            proxy.as_mut_slice()[i] = orig - h;
            let down = inst.total(&inst.scorer, &proxy, &inst.u)?;
            proxy.as_mut_slice()[i] = orig;
            out.coordinates += 1;
            out.max_rel_err = out.max_rel_err.max(rel_err(g_proxy[i], (up - down) / (2.0 * h)));
        }

        let shifted = |di: f64, dd: f64| UncertaintyParams::new(inst.u.s_i + di, inst.u.s_d + dd);
        let fd_si = (inst.total(&inst.scorer, &inst.proxy, &shifted(h, 0.0))?
            - inst.total(&inst.scorer, &inst.proxy, &shifted(-h, 0.0))?)
            / (2.0 * h);
        let fd_sd = (inst.total(&inst.scorer, &inst.proxy, &shifted(0.0, h))?
            - inst.total(&inst.scorer, &inst.proxy, &shifted(0.0, -h))?)
            / (2.0 * h);
        out.coordinates += 2;
        out.max_rel_err = out
            .max_rel_err
            .max(rel_err(grad.d_s_i, fd_si))
            .max(rel_err(grad.d_s_d, fd_sd));
    }
    Ok(out)
}

/// The two fixed-point values of the coupled total.
pub fn coupled_total_examples() -> Result<(f64, f64)> {
    let unit = coupled_total(2.0, 0.04, &UncertaintyParams::new(0.0, 0.0))?;
    let wide = coupled_total(2.0, 0.04, &UncertaintyParams::new(2f64.ln(), 0.0))?;
    Ok((unit, wide))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorCheck {
    /// Largest `|exact − CE|` at `α = 1`.
    pub max_gap_at_one: f64,
    /// Largest deviation of the uniform-distribution gap from `|(1−α) log 8|`.
    pub uniform_err: f64,
    /// Summed residual at `δ = 0.05` over summed residual at `δ = 0.1`.
    pub shrink: f64,
}

pub fn taylor_check(vectors: usize, seed: u64) -> Result<TaylorCheck> {
    let mut max_gap_at_one: f64 = 0.0;
    let mut big = 0.0;
    let mut small = 0.0;
    for k in 0..vectors as u64 {
        let mut rng = stream(seed.wrapping_add(k), Stream::Eval);
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let label = rng.random_range(0..10);
        let exact = exact_weighted_nll(&logits, label, 1.0, 1.0)?;
        max_gap_at_one = max_gap_at_one.max((exact - per_sample_ce(&logits, label)?).abs());
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        big += approximation_gap(&logits, label, 1.0 + sign * 0.1, 1.0)?.residual;
        small += approximation_gap(&logits, label, 1.0 + sign * 0.05, 1.0)?.residual;
    }
    let mut uniform_err: f64 = 0.0;
    for alpha in [0.5, 0.8, 0.95, 1.05, 1.3, 2.0] {
        let g = approximation_gap(&[0.7; 8], 2, alpha, 1.0)?;
        uniform_err = uniform_err.max((g.gap - ((1.0 - alpha) * 8f64.ln()).abs()).abs());
    }
    Ok(TaylorCheck {
        max_gap_at_one,
        uniform_err,
        shrink: if big > 0.0 { small / big } else { 0.0 },
    })
}

/// `blobs` clusters of `per_blob` points around scaled axis directions with
/// unit Gaussian noise. Returns the points and their planted labels.
pub fn planted_blobs(blobs: usize, per_blob: usize, dim: usize, separation: f64, seed: u64) -> (Vec<FeatureVector>, Vec<usize>) {
    let mut rng = stream(seed, Stream::Synthetic);
    let mut points = Vec::with_capacity(blobs * per_blob);
    let mut labels = Vec::with_capacity(blobs * per_blob);
    for b in 0..blobs {
        for _ in 0..per_blob {
            let v = (0..dim)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    noise + if j == b % dim { separation } else { 0.0 }
                })
                .collect();
            points.push(FeatureVector(v));
            labels.push(b);
        }
    }
    (points, labels)
}

/// ARI of spectral clustering (M=4, K=10) on 4 planted blobs, one per seed.
pub fn blob_recovery(seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| {
            let (points, truth) = planted_blobs(4, 100, 8, 10.0, seed);
            let found = spectral_cluster(&points, 4, 10, seed)?;
            adjusted_rand_index(&found.assignment, &truth)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumCheck {
    pub eigenvalues_in_range: bool,
    /// `(components, zero eigenvalues)` for each hand-built graph.
    pub multiplicities: Vec<(usize, usize)>,
}

pub fn spectrum_check() -> Result<SpectrumCheck> {
    let graphs: Vec<(usize, KnnGraph)> = vec![
        (1, KnnGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 0.5)])?),
        (
            2,
            KnnGraph::from_edges(6, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 0.7), (4, 5, 0.7), (3, 5, 0.7)])?,
        ),
        (3, KnnGraph::from_edges(6, &[(0, 1, 0.9), (2, 3, 0.4), (4, 5, 1.0)])?),
        (1, KnnGraph::from_edges(5, &[(0, 1, 1.0), (1, 2, 0.3), (2, 3, 0.8), (3, 4, 0.6), (4, 0, 0.2)])?),
    ];
    let mut in_range = true;
    let mut multiplicities = Vec::new();
    for (components, g) in &graphs {
        let e = jacobi_eigh(&normalized_laplacian(g))?;
        in_range &= e.values.iter().all(|&v| (-1e-9..=2.0 + 1e-9).contains(&v));
        multiplicities.push((*components, e.values.iter().filter(|v| v.abs() < 1e-8).count()));
    }
    let (points, _) = planted_blobs(3, 20, 5, 4.0, 11);
    let knn = crate::clustering::build_knn_graph(&points, 5)?;
    let e = jacobi_eigh(&normalized_laplacian(&knn))?;
    in_range &= e.values.iter().all(|&v| (-1e-9..=2.0 + 1e-9).contains(&v));
    Ok(SpectrumCheck {
        eigenvalues_in_range: in_range,
        multiplicities,
    })
}

/// Runs the in-memory pipeline twice on a small synthetic pool and compares
/// every serialized artifact.
pub fn determinism_check(seed: u64) -> Result<bool> {
    let spec = SyntheticSpec {
        n: 300,
        groups: 5,
        classes: 4,
        dim: 8,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec, seed)?;
    let config = TrainConfig {
        p: 50.0,
        clusters: 5,
        seed,
        ..TrainConfig::default()
    };
    let a = run_in_memory(&config, &data.dataset)?;
    let b = run_in_memory(&config, &data.dataset)?;
    Ok(a.selection.to_tsv() == b.selection.to_tsv()
        && a.checkpoint.to_json() == b.checkpoint.to_json()
        && a.report.to_json() == b.report.to_json()
        && a.cluster_dump == b.cluster_dump)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Every check at its acceptance tolerance.
pub fn run_suite() -> Vec<CheckOutcome> {
    vec![
        outcome(
            "gradients",
            gradient_check(100, 0).map(|g| {
                (
                    g.max_rel_err <= GRAD_TOLERANCE,
                    format!(
                        "{} instances, {} coordinates ({} skipped at kinks), max rel err {:.2e}",
                        g.instances, g.coordinates, g.skipped, g.max_rel_err
                    ),
                )
            }),
        ),
        outcome(
            "coupled-total",
            coupled_total_examples().map(|(unit, wide)| {
                let expected = 1.0 + 0.02 + 2f64.ln() / 2.0;
                (
                    unit == 2.02 && (wide - expected).abs() <= 1e-12,
                    format!("unit {unit}, sigma_I^2=2 {wide}"),
                )
            }),
        ),
        outcome(
            "taylor-gap",
            taylor_check(1000, 0).map(|t| {
                (
                    t.max_gap_at_one <= 1e-12 && t.uniform_err <= 1e-10 && t.shrink <= 0.4,
                    format!(
                        "gap at alpha=1 {:.1e}, uniform err {:.1e}, shrink {:.3}",
                        t.max_gap_at_one, t.uniform_err, t.shrink
                    ),
                )
            }),
        ),
        outcome(
            "blob-recovery",
            blob_recovery(&[0, 1, 2, 3, 4]).map(|aris| {
                (
                    aris.iter().all(|&a| a >= 0.99),
                    format!("ARI {aris:.3?}"),
                )
            }),
        ),
        outcome(
            "laplacian-spectrum",
            spectrum_check().map(|s| {
                (
                    s.eigenvalues_in_range && s.multiplicities.iter().all(|(c, z)| c == z),
                    format!("in range {}, (components, zeros) {:?}", s.eigenvalues_in_range, s.multiplicities),
                )
            }),
        ),
        outcome(
            "determinism",
            determinism_check(3).map(|same| (same, format!("artifacts identical: {same}"))),
        ),
    ]
}
