//! Small dense numerical kernels: cosine similarity, a Jacobi symmetric
//! eigensolver, seeded k-means++, stable softmax and population variance.

use std::ops::{Index, IndexMut};

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// Largest absolute difference between `A` and `Aᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows.min(self.cols) {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.values[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.values[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine of the angle between `u` and `v`, clamped to [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroVector);
    }
    // sqrt of the product keeps cos(u, u) at exactly 1
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: DenseMatrix,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver for a dense symmetric matrix.
///
/// Each rotation annihilates one off-diagonal pair; sweeps repeat until the
/// off-diagonal mass is negligible relative to the matrix norm. Rotations are
/// applied in a fixed (p, q) order, so results are bit-reproducible.
pub fn jacobi_eigh(a: &DenseMatrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if n == 0 {
        return Err(Error::Empty);
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("jacobi_eigh input".into()));
    }
    let asym = a.asymmetry();
    if asym > 1e-10 {
        return Err(Error::NotSymmetric(asym));
    }

    // Work on the symmetrized copy; `vt` holds eigenvectors as rows.
    let mut m = a.values.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut vt = DenseMatrix::identity(n).values;

    let frob = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        return Ok(SymmetricEigen {
            values: vec![0.0; n],
            vectors: DenseMatrix::identity(n),
        });
    }
    let stop = 1e-15 * frob;
    let skip = 1e-18 * frob;

    let mut converged = n == 1;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= stop {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= skip {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = m[r * n + p];
                    let arq = m[r * n + q];
                    let np = c * arp - s * arq;
                    let nq = s * arp + c * arq;
                    m[r * n + p] = np;
                    m[p * n + r] = np;
                    m[r * n + q] = nq;
                    m[q * n + r] = nq;
                }
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;

                let (head, tail) = vt.split_at_mut(q * n);
                let vp = &mut head[p * n..(p + 1) * n];
                let vq = &mut tail[..n];
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let a = *x;
                    let b = *y;
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, k)] = vt[src * n + r];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Result of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(x, centroid);
        // strict `<` keeps the lowest index on ties
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Iterates until assignments stop changing or `max_iters` is reached. Ties
/// go to the lowest centroid index; an emptied cluster is re-seeded with the
/// point farthest from its current centroid.
pub fn kmeans_pp<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
    max_iters: usize,
) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        let last = centroids.last().unwrap();
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(squared_distance(p, last));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            total += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, squared_distance(&points[i], &centroids[assignment[i]])))
                    .fold((0, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
                counts[assignment[far.0]] -= 1;
                counts[c] = 1;
                assignment[far.0] = c;
                centroids[c] = points[far.0].clone();
            }
        }
    }

    Ok(KMeans {
        assignment,
        centroids,
        objective,
        iterations,
    })
}

/// `log Σ exp(xᵢ)` with max-shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax over the whole vector, shifted by the maximum for stability.
pub fn batch_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `(1/m) Σ (vᵢ − mean)²`, no Bessel correction.
pub fn population_variance(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = stream(seed, Stream::Bench);
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = StandardNormal.sample(&mut rng);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn jacobi_small_cases() {
        let e = jacobi_eigh(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);

        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = jacobi_eigh(&a).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] - 3.0).abs() < 1e-12);

        let d = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let e = jacobi_eigh(&d).unwrap();
        assert_eq!(e.values, vec![3.0, 5.0]);
        assert_eq!(e.vector(0)[0].abs(), 1.0);
        assert_eq!(e.vector(1)[1].abs(), 1.0);
    }

    #[test]
    fn jacobi_rejects_bad_input() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(jacobi_eigh(&a), Err(Error::NotSymmetric(_))));
        let b = DenseMatrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(matches!(jacobi_eigh(&b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn jacobi_reconstructs_random_matrices() {
        for (n, seed) in [(1, 1), (3, 2), (8, 3), (17, 4), (33, 5), (64, 6)] {
            let a = random_symmetric(n, seed);
            let e = jacobi_eigh(&a).unwrap();
            let scale = a.max_abs();
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            for k in 0..n {
                let v = e.vector(k);
                let av = a.matvec(&v).unwrap();
                let resid = av
                    .iter()
                    .zip(&v)
                    .map(|(x, y)| (x - e.values[k] * y).abs())
                    .fold(0.0, f64::max);
                assert!(resid <= 1e-9 * scale, "n={n} k={k} resid={resid}");
            }
            let mut lam = DenseMatrix::zeros(n, n);
            for k in 0..n {
                lam[(k, k)] = e.values[k];
            }
            let recon = e
                .vectors
                .matmul(&lam)
                .unwrap()
                .matmul(&e.vectors.transpose())
                .unwrap();
            for (x, y) in recon.as_slice().iter().zip(a.as_slice()) {
                assert!((x - y).abs() <= 1e-8 * scale);
            }
            let gram = e.vectors.transpose().matmul(&e.vectors).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - target).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn kmeans_trivial_cases() {
        let pts = vec![vec![0.0, 0.0], vec![100.0, 0.0]];
        let km = kmeans_pp(&pts, 2, &mut stream(1, Stream::Clustering), 50).unwrap();
        assert_ne!(km.assignment[0], km.assignment[1]);

        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let km = kmeans_pp(&pts, 1, &mut stream(1, Stream::Clustering), 50).unwrap();
        assert!(km.assignment.iter().all(|&c| c == 0));

        assert!(matches!(
            kmeans_pp(&pts, 0, &mut stream(1, Stream::Clustering), 5),
            Err(Error::InvalidK { .. })
        ));
        assert!(matches!(
            kmeans_pp(&pts, 11, &mut stream(1, Stream::Clustering), 5),
            Err(Error::InvalidK { .. })
        ));
    }

    #[test]
    fn kmeans_objective_never_increases() {
        for seed in 0..20 {
            let mut rng = stream(seed, Stream::Bench);
            let pts: Vec<Vec<f64>> = (0..120)
                .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let km = kmeans_pp(&pts, 6, &mut stream(seed, Stream::Clustering), 100).unwrap();
            for w in km.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", km.objective);
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = stream(3, Stream::Bench);
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let a = kmeans_pp(&pts, 4, &mut stream(9, Stream::Clustering), 100).unwrap();
        let b = kmeans_pp(&pts, 4, &mut stream(9, Stream::Clustering), 100).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(batch_softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let w = batch_softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            batch_softmax(&[0.3, -1.2]).unwrap(),
            batch_softmax(&[7.3, 5.8]).unwrap()
        );
        assert!(batch_softmax(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn variance_cases() {
        assert_eq!(population_variance(&[0.25, 0.25, 0.25]).unwrap(), 0.0);
        assert!((population_variance(&[0.2, 0.3]).unwrap() - 0.0025).abs() < 1e-15);
        assert_eq!(population_variance(&[4.2]).unwrap(), 0.0);
        assert!(matches!(population_variance(&[]), Err(Error::Empty)));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in prop::collection::vec(-700.0f64..700.0, 1..2000)) {
            let w = batch_softmax(&xs).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..64), c in -100.0f64..100.0) {
            let a = batch_softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = batch_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_long_vector_sums_to_one() {
        let mut rng = stream(11, Stream::Bench);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                30.0 * z
            })
            .collect();
        let total: f64 = batch_softmax(&xs).unwrap().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
}
