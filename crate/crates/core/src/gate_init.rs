//! Initial gate construction: K-means over base-model embeddings, the soft
//! assignment `g0`, its clipped variant used as expert training weights, and
//! the hard per-class routing used as a comparison baseline.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::nn::softmax;
use crate::rng::{rng_for, sub_seed};

/// Default lower clip of `g0` when it is used as per-sample training weight.
pub const DEFAULT_GAMMA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    means: Matrix,
}

impl Centroids {
    pub fn new(means: Matrix) -> Result<Self> {
        if means.rows() == 0 {
            return Err(Error::invalid("need at least one centroid"));
        }
        Ok(Self { means })
    }

    pub fn k(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids` (ties → lowest index).
pub fn nearest(centroids: &Matrix, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Within-cluster sum of squared distances under nearest assignment.
pub fn sse(points: &Matrix, centroids: &Matrix) -> f64 {
    points
        .iter_rows()
        .map(|p| sq_dist(p, centroids.row(nearest(centroids, p))))
        .sum()
}

/// Independent k-means++ seedings tried by [`kmeans`].
pub const KMEANS_RESTARTS: usize = 4;

/// Lloyd's algorithm with k-means++ seeding, keeping the lowest-SSE fit of
/// [`KMEANS_RESTARTS`] seedings (earliest on ties).
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<Centroids> {
    let mut best: Option<(f64, Centroids)> = None;
    for r in 0..KMEANS_RESTARTS {
        let init_seed = if r == 0 { seed } else { sub_seed(seed, &format!("restart/{r}")) };
        let init = kmeans_plus_plus(points, k, init_seed)?;
        let fit = kmeans_from(points, init, max_iters, tol)?;
        let err = sse(points, fit.centroids.means());
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, fit.centroids));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Result of a Lloyd run with its objective trace.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Centroids,
    /// SSE of the initial centroids followed by the SSE after each iteration.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans_plus_plus(points: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let mut rng = rng_for(seed, "kmeans++");
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    Ok(points.select_rows(&chosen))
}

/// Lloyd iterations from the given centroids. Stops when the largest
/// centroid shift drops below `tol` or after `max_iters`. An empty cluster is
/// moved to the point farthest from its current centroid.
pub fn kmeans_from(points: &Matrix, init: Matrix, max_iters: usize, tol: f64) -> Result<KMeansFit> {
    let (n, k) = (points.rows(), init.rows());
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    if init.cols() != points.cols() {
        return Err(Error::Shape {
            context: "centroid dimension",
            expected: points.cols(),
            got: init.cols(),
        });
    }
    let d = points.cols();
    let mut centroids = init;
    let mut history = vec![sse(points, &centroids)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let assign: Vec<usize> = points.iter_rows().map(|p| nearest(&centroids, p)).collect();
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter_rows().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                for (dst, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / count as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centroids.row(assign[a]));
                        let db = sq_dist(points.row(b), centroids.row(assign[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= k leaves a free point");
                taken[far] = true;
                next.row_mut(c).copy_from_slice(points.row(far));
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        history.push(sse(points, &centroids));
        if shift < tol {
            break;
        }
    }
    Ok(KMeansFit {
        centroids: Centroids::new(centroids)?,
        sse_history: history,
        iterations,
    })
}

/// The initial soft gate: `N × K`, row-stochastic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateInit {
    weights: Matrix,
    temperature: f64,
}

impl GateInit {
    /// Wraps precomputed weights; every row must be a distribution.
    pub fn from_weights(weights: Matrix, temperature: f64) -> Result<Self> {
        for row in weights.iter_rows() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("gate weights must be row-stochastic"));
            }
        }
        Ok(GateInit {
            weights,
            temperature,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_experts(&self) -> usize {
        self.weights.cols()
    }

    /// Argmax expert per sample.
    pub fn assignments(&self) -> Vec<usize> {
        self.weights.iter_rows().map(argmax).collect()
    }
}

/// Median pairwise squared distance among centroids; 1 when undefined.
pub fn default_temperature(centroids: &Centroids) -> f64 {
    let m = centroids.means();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            d.push(sq_dist(m.row(i), m.row(j)));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// `g0[i, k] = softmax_k(−‖z_i − c_k‖² / temperature)`.
pub fn build_g0(embeddings: &Matrix, centroids: &Centroids, temperature: f64) -> Result<GateInit> {
    if embeddings.cols() != centroids.dim() {
        return Err(Error::Shape {
            context: "embedding dimension",
            expected: centroids.dim(),
            got: embeddings.cols(),
        });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let k = centroids.k();
    let mut weights = Matrix::zeros(embeddings.rows(), k);
    let mut logits = vec![0.0; k];
    for (i, z) in embeddings.iter_rows().enumerate() {
        for (c, l) in logits.iter_mut().enumerate() {
            *l = -sq_dist(z, centroids.means().row(c)) / temperature;
        }
        weights.row_mut(i).copy_from_slice(&softmax(&logits));
    }
    Ok(GateInit {
        weights,
        temperature,
    })
}

/// Element-wise clip to `[gamma, 1]`, without renormalizing.
pub fn smooth_gamma(weights: &Matrix, gamma: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(weights.map(|v| v.clamp(gamma, 1.0)))
}

/// Hard class-to-expert map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRouting {
    pub class_to_expert: Vec<usize>,
    pub num_experts: usize,
}

impl ClassRouting {
    /// `N × K` one-hot matrix routing each sample by its label.
    pub fn one_hot(&self, labels: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), self.num_experts);
        for (i, &y) in labels.iter().enumerate() {
            m.set(i, self.class_to_expert[y], 1.0);
        }
        m
    }
}

/// Maps each class to the expert with the largest mean `g0` weight over that
/// class's samples (ties → lowest expert; classes without samples → 0).
pub fn per_class_gate(g0: &GateInit, labels: &[usize], num_classes: usize) -> Result<ClassRouting> {
    let w = g0.weights();
    if labels.len() != w.rows() {
        return Err(Error::Shape {
            context: "labels vs g0 rows",
            expected: w.rows(),
            got: labels.len(),
        });
    }
    let k = w.cols();
    let mut sums = vec![vec![0.0; k]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} >= {num_classes}")));
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(w.row(i)) {
            *s += v;
        }
    }
    let class_to_expert = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            let mean: Vec<f64> = s.iter().map(|v| v / c.max(1) as f64).collect();
            argmax(&mean)
        })
        .collect();
    Ok(ClassRouting {
        class_to_expert,
        num_experts: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pts(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let p = pts(&[[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]]);
        let c = kmeans(&p, 1, 0, 10, 1e-12).unwrap();
        assert_abs_diff_eq!(c.means().get(0, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.means().get(0, 1), 1.0, epsilon = 1e-12);
    }

    /// Exhaustive search over all 2-partitions of the points.
    fn best_two_partition(p: &Matrix) -> (f64, Vec<Vec<f64>>) {
        let n = p.rows();
        let mut best = (f64::INFINITY, Vec::new());
        for mask in 1..(1u32 << n) - 1 {
            let mut cents = Vec::new();
            let mut total = 0.0;
            for side in [true, false] {
                let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
                let mut mean = vec![0.0; p.cols()];
                for &i in &members {
                    for (m, v) in mean.iter_mut().zip(p.row(i)) {
                        *m += v / members.len() as f64;
                    }
                }
                total += members.iter().map(|&i| sq_dist(p.row(i), &mean)).sum::<f64>();
                cents.push(mean);
            }
            if total < best.0 {
                best = (total, cents);
            }
        }
        best
    }

    #[test]
    fn two_clusters_match_exhaustive_optimum() {
        let p = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let (best_sse, mut oracle) = best_two_partition(&p);
        assert_abs_diff_eq!(best_sse, 1.0, epsilon = 1e-12);
        oracle.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(oracle, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        for seed in 0..5 {
            let c = kmeans(&p, 2, seed, 50, 1e-12).unwrap();
            let mut got: Vec<Vec<f64>> = c.means().iter_rows().map(<[f64]>::to_vec).collect();
            got.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn fixed_point_is_kept() {
        let p = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let init = pts(&[[10.0, 0.5], [0.0, 0.5]]);
        let fit = kmeans_from(&p, init.clone(), 10, 1e-12).unwrap();
        assert_eq!(fit.centroids.means(), &init);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn too_few_points() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(matches!(kmeans(&p, 2, 0, 5, 0.0), Err(Error::TooFewPoints { n: 1, k: 2 })));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]]);
        let init = pts(&[[0.0, 0.0], [100.0, 100.0]]);
        let fit = kmeans_from(&p, init, 10, 1e-12).unwrap();
        let m = fit.centroids.means();
        assert!(m.iter_rows().all(|r| r[0] < 10.0));
        assert_abs_diff_eq!(fit.sse_history.last().copied().unwrap(), 0.005, epsilon = 1e-12);
    }

    #[test]
    fn g0_examples() {
        let one = Centroids::new(pts(&[[1.0, 1.0]])).unwrap();
        let z = pts(&[[0.0, 0.0], [3.0, -2.0]]);
        let g = build_g0(&z, &one, 1.0).unwrap();
        assert_eq!(g.weights().as_slice(), &[1.0, 1.0]);

        let two = Centroids::new(pts(&[[-1.0, 0.0], [1.0, 0.0]])).unwrap();
        let g = build_g0(&pts(&[[0.0, 3.0]]), &two, 0.7).unwrap();
        assert_eq!(g.weights().row(0), &[0.5, 0.5]);

        // z = c1, |z - c2|^2 = 4, temperature 2
        let cs = Centroids::new(pts(&[[0.0, 0.0], [2.0, 0.0]])).unwrap();
        let g = build_g0(&pts(&[[0.0, 0.0]]), &cs, 2.0).unwrap();
        let e = (-2.0f64).exp();
        assert_abs_diff_eq!(g.weights().get(0, 0), 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(g.weights().get(0, 1), e / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(g.weights().get(0, 0), 0.8808, epsilon = 1e-4);
    }

    #[test]
    fn zero_temperature_limit_is_nearest_centroid() {
        let cs = Centroids::new(pts(&[[0.0, 0.0], [1.0, 1.0], [3.0, 0.0]])).unwrap();
        let z = pts(&[[0.2, 0.1], [0.9, 0.8], [2.0, 0.1], [1.6, 0.4]]);
        let g = build_g0(&z, &cs, 1e-6).unwrap();
        for (i, row) in z.iter_rows().enumerate() {
            let k = nearest(cs.means(), row);
            assert_abs_diff_eq!(g.weights().get(i, k), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn median_temperature() {
        // squared distances 1, 4, 9 -> median 4
        let cs = Centroids::new(Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap()).unwrap();
        assert_eq!(default_temperature(&cs), 4.0);
        let single = Centroids::new(Matrix::from_rows(&[[5.0]]).unwrap()).unwrap();
        assert_eq!(default_temperature(&single), 1.0);
    }

    #[test]
    fn gamma_clip_examples() {
        let m = Matrix::from_rows(&[[0.0, 0.5, 1.0]]).unwrap();
        assert_eq!(smooth_gamma(&m, 0.05).unwrap().row(0), &[0.05, 0.5, 1.0]);
        assert_eq!(smooth_gamma(&m, 0.0).unwrap(), m);
        assert!(smooth_gamma(&m, 1.5).is_err());
    }

    #[test]
    fn per_class_examples() {
        let g0 = GateInit {
            weights: Matrix::from_rows(&[
                [0.0, 0.0, 0.0, 1.0],
                [0.0, 0.0, 0.0, 1.0],
                [0.5, 0.5, 0.0, 0.0],
                [0.5, 0.5, 0.0, 0.0],
            ])
            .unwrap(),
            temperature: 1.0,
        };
        let r = per_class_gate(&g0, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.class_to_expert, vec![3, 0]);
        let oh = r.one_hot(&[1, 0]);
        assert_eq!(oh.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(oh.row(1), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn per_class_matches_brute_force_means() {
        let rows = [[0.6, 0.4], [0.1, 0.9], [0.7, 0.3], [0.2, 0.8], [0.45, 0.55]];
        let labels = [0, 0, 1, 1, 0];
        let g0 = GateInit {
            weights: Matrix::from_rows(&rows).unwrap(),
            temperature: 1.0,
        };
        let r = per_class_gate(&g0, &labels, 2).unwrap();
        // class 0: mean (0.3833, 0.6167) -> 1; class 1: mean (0.45, 0.55) -> 1
        for c in 0..2 {
            let members: Vec<&[f64; 2]> =
                rows.iter().zip(labels).filter(|(_, y)| *y == c).map(|(r, _)| r).collect();
            let m0: f64 = members.iter().map(|r| r[0]).sum();
            let m1: f64 = members.iter().map(|r| r[1]).sum();
            assert_eq!(r.class_to_expert[c], usize::from(m1 > m0));
        }
    }

    proptest! {
        #[test]
        fn g0_rows_are_stochastic_and_gamma_preserves_order(
            raw in proptest::collection::vec(-5.0f64..5.0, 12..60),
            temp in 0.01f64..10.0,
            gamma in 0.0f64..1.0,
        ) {
            let n = raw.len() / 2;
            let z = Matrix::new(n, 2, raw[..2 * n].to_vec()).unwrap();
            let cs = Centroids::new(z.select_rows(&[0, 1, 2])).unwrap();
            let g = build_g0(&z, &cs, temp).unwrap();
            let s = smooth_gamma(g.weights(), gamma).unwrap();
            for i in 0..n {
                let row = g.weights().row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                for a in 0..3 {
                    for b in 0..3 {
                        if row[a] < row[b] {
                            prop_assert!(s.get(i, a) <= s.get(i, b));
                        }
                    }
                }
            }
        }

        #[test]
        fn lloyd_sse_is_non_increasing(
            raw in proptest::collection::vec(-10.0f64..10.0, 20..80),
            k in 1usize..5,
            seed in 0u64..100,
        ) {
            let n = raw.len() / 2;
            let p = Matrix::new(n, 2, raw[..2 * n].to_vec()).unwrap();
            let init = kmeans_plus_plus(&p, k, seed).unwrap();
            let fit = kmeans_from(&p, init, 30, 0.0).unwrap();
            for w in fit.sse_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
            }
        }
    }
}
