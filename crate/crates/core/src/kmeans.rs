//! k-means++ seeding with Lloyd iterations, and the cluster-assignment type
//! shared by every clustering method.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSet;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Temi,
    Labels,
    Pseudo,
}

/// Hard cluster ids for every sample plus the empirical distribution `q(c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub method: Method,
    #[serde(rename = "C")]
    pub c: usize,
    pub assignments: Vec<u32>,
    pub q: Vec<f64>,
    /// Number of clusters with at least one sample.
    pub utilized: usize,
}

impl ClusterAssignment {
    pub fn new(method: Method, assignments: Vec<u32>, c: usize) -> Result<Self> {
        let q = empirical_distribution(&assignments, c)?;
        let utilized = q.iter().filter(|&&p| p > 0.0).count();
        Ok(Self {
            method,
            c,
            assignments,
            q,
            utilized,
        })
    }

    /// Uses ground-truth labels as the assignment.
    pub fn from_labels(fs: &FeatureSet) -> Result<Self> {
        let labels = fs
            .labels()
            .ok_or_else(|| Error::param("feature set has no labels"))?;
        let c = fs.num_classes().unwrap_or(1).max(1);
        Self::new(Method::Labels, labels.to_vec(), c)
    }

    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("assignment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // Recompute derived fields so a hand-edited file cannot disagree.
        Self::new(a.method, a.assignments, a.c)
    }
}

/// Frequency of each cluster id in `assignments`.
pub fn empirical_distribution(assignments: &[u32], c: usize) -> Result<Vec<f64>> {
    if c == 0 {
        return Err(Error::param("cluster count must be positive"));
    }
    if assignments.is_empty() {
        return Err(Error::param("empty assignment"));
    }
    let mut counts = vec![0usize; c];
    for (i, &a) in assignments.iter().enumerate() {
        let slot = counts
            .get_mut(a as usize)
            .ok_or_else(|| Error::param(format!("sample {i} assigned to {a}, outside [0, {c})")))?;
        *slot += 1;
    }
    let n = assignments.len() as f64;
    Ok(counts.into_iter().map(|k| k as f64 / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub c: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(c: usize, seed: u64) -> Self {
        Self {
            c,
            seed,
            max_iter: 300,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub assignment: ClusterAssignment,
    /// `C x D` row-major.
    pub centroids: Vec<f64>,
    /// Sum of squared distances of samples to their cluster mean.
    pub inertia: f64,
    /// Inertia at every Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

/// Best of `restarts` k-means++/Lloyd runs by inertia. Empty clusters keep
/// their previous centroid and are not re-seeded.
pub fn kmeans_fit(fs: &FeatureSet, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let (n, d, c) = (fs.n(), fs.dim(), cfg.c);
    if c == 0 || c > n {
        return Err(Error::param(format!("need 1 <= C <= N, got C={c}, N={n}")));
    }
    let x = fs.to_f64();
    let mut best: Option<(Vec<u32>, Vec<f64>, f64, Vec<f64>)> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = rng::seeded(rng::derive_seed(cfg.seed, r as u64));
        let init = plus_plus(&x, n, d, c, &mut rng);
        let run = lloyd(&x, n, d, init, cfg.max_iter, cfg.tol);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (assignments, centroids, inertia, history) = best.unwrap();
    Ok(KMeansFit {
        assignment: ClusterAssignment::new(Method::Kmeans, assignments, c)?,
        centroids,
        inertia,
        history,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus<R: Rng>(x: &[f64], n: usize, d: usize, c: usize, rng: &mut R) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(c * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(&x[i * d..(i + 1) * d], &centroids[..d])).collect();
    for _ in 1..c {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let new = x[pick * d..(pick + 1) * d].to_vec();
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(&x[i * d..(i + 1) * d], &new));
        }
        centroids.extend(new);
    }
    centroids
}

/// Nearest centroid per row (ties to the lower id) and the resulting inertia.
fn assign(x: &[f64], n: usize, d: usize, centroids: &[f64], out: &mut [u32]) -> f64 {
    let c = centroids.len() / d;
    let mut inertia = 0.0;
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for k in 0..c {
            let dk = sq_dist(xi, &centroids[k * d..(k + 1) * d]);
            if dk < best_d {
                best = k;
                best_d = dk;
            }
        }
        out[i] = best as u32;
        inertia += best_d;
    }
    inertia
}

/// Cluster means; empty clusters keep `previous`.
fn means(x: &[f64], d: usize, assignments: &[u32], previous: &[f64]) -> Vec<f64> {
    let c = previous.len() / d;
    let mut sums = vec![0.0; c * d];
    let mut counts = vec![0usize; c];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        counts[a] += 1;
        for j in 0..d {
            sums[a * d + j] += x[i * d + j];
        }
    }
    for k in 0..c {
        if counts[k] == 0 {
            sums[k * d..(k + 1) * d].copy_from_slice(&previous[k * d..(k + 1) * d]);
        } else {
            sums[k * d..(k + 1) * d].iter_mut().for_each(|s| *s /= counts[k] as f64);
        }
    }
    sums
}

fn lloyd(
    x: &[f64],
    n: usize,
    d: usize,
    mut centroids: Vec<f64>,
    max_iter: usize,
    tol: f64,
) -> (Vec<u32>, Vec<f64>, f64, Vec<f64>) {
    let mut labels = vec![0u32; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        history.push(assign(x, n, d, &centroids, &mut labels));
        let next = means(x, d, &labels, &centroids);
        let shift = next
            .chunks_exact(d)
            .zip(centroids.chunks_exact(d))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    assign(x, n, d, &centroids, &mut labels);
    centroids = means(x, d, &labels, &centroids);
    let inertia = (0..n)
        .map(|i| sq_dist(&x[i * d..(i + 1) * d], &centroids[labels[i] as usize * d..(labels[i] as usize + 1) * d]))
        .sum();
    (labels, centroids, inertia, history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(rows: &[[f32; 2]]) -> FeatureSet {
        FeatureSet::new(rows.len(), 2, rows.iter().flatten().copied().collect(), None).unwrap()
    }

    #[test]
    fn empirical_distribution_examples() {
        assert_eq!(empirical_distribution(&[0, 0, 1, 2], 3).unwrap(), vec![0.5, 0.25, 0.25]);
        assert_eq!(empirical_distribution(&[0, 0], 2).unwrap(), vec![1.0, 0.0]);
        assert!(empirical_distribution(&[1], 1).is_err());
    }

    #[test]
    fn separated_pairs() {
        let f = fs(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 2.0]]);
        let fit = kmeans_fit(&f, &KMeansConfig::new(2, 1)).unwrap();
        let a = &fit.assignment.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        // 2 * 0.5^2 + 2 * 1^2
        assert!((fit.inertia - 2.5).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_inertia_is_scatter() {
        let f = fs(&[[1.0, 2.0], [3.0, -1.0], [0.0, 0.0], [2.0, 5.0]]);
        let fit = kmeans_fit(&f, &KMeansConfig::new(1, 0)).unwrap();
        assert!(fit.assignment.assignments.iter().all(|&a| a == 0));
        assert_eq!(fit.assignment.q, vec![1.0]);
        let x = f.to_f64();
        let (mx, my) = ((1.0 + 3.0 + 0.0 + 2.0) / 4.0, (2.0 - 1.0 + 0.0 + 5.0) / 4.0);
        let scatter: f64 = x.chunks(2).map(|r| (r[0] - mx).powi(2) + (r[1] - my).powi(2)).sum();
        assert!((fit.inertia - scatter).abs() < 1e-9);
    }

    #[test]
    fn one_cluster_per_point() {
        let f = fs(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let fit = kmeans_fit(&f, &KMeansConfig::new(3, 5)).unwrap();
        assert!(fit.inertia.abs() < 1e-12);
        assert_eq!(fit.assignment.utilized, 3);
        assert!(kmeans_fit(&f, &KMeansConfig::new(4, 5)).is_err());
    }

    #[test]
    fn history_is_non_increasing() {
        let spec = crate::dataset::SyntheticSpec::balanced(5, 2, 40, 1.0, 0.4, 9);
        let f = crate::dataset::make_synthetic(&spec).unwrap();
        let mut cfg = KMeansConfig::new(7, 3);
        cfg.restarts = 1;
        let fit = kmeans_fit(&f, &cfg).unwrap();
        assert!(fit.history.len() > 1);
        for w in fit.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.history);
        }
        assert!(fit.inertia <= *fit.history.last().unwrap() + 1e-9);
    }

    #[test]
    fn json_shape() {
        let a = ClusterAssignment::new(Method::Kmeans, vec![0, 1, 1, 0], 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(v["method"], "kmeans");
        assert_eq!(v["C"], 3);
        assert_eq!(v["utilized"], 2);
        assert_eq!(ClusterAssignment::from_json(&a.to_json()).unwrap(), a);
    }
}
