//! Evaluation metrics: Fréchet distance between Gaussian fits, adjusted
//! mutual information, Hungarian cluster-to-class accuracy, nearest-neighbour
//! AUROC and prototype pseudo-labels.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{argmax, normalized_rows, FeatureSet};
use crate::error::{Error, Result};
use crate::kmeans::{ClusterAssignment, Method};
use crate::nn::softmax;

/// Mean and unbiased covariance of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// `D x D`, row-major, symmetric.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(Error::param("covariance shape does not match the mean"));
        }
        if self.mean.iter().chain(&self.cov).any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite Gaussian statistics"));
        }
        let scale = 1.0 + self.cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (self.cov[i * d + j] - self.cov[j * d + i]).abs() > 1e-9 * scale {
                    return Err(Error::numerical(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// Sample mean and `(N-1)`-normalized covariance of `rows x d` data.
pub fn gaussian_stats(samples: &[f64], rows: usize, d: usize) -> Result<GaussianStats> {
    if rows < 2 {
        return Err(Error::param(format!("need at least 2 samples, got {rows}")));
    }
    if samples.len() != rows * d || d == 0 {
        return Err(Error::param("sample matrix shape mismatch"));
    }
    let mut mean = vec![0.0; d];
    for r in samples.chunks_exact(d) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in samples.chunks_exact(d) {
        centered.iter_mut().zip(r.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / (rows - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mean, cov, n: rows })
}

pub fn feature_stats(fs: &FeatureSet) -> Result<GaussianStats> {
    gaussian_stats(&fs.to_f64(), fs.n(), fs.dim())
}

/// Eigenvalues of a symmetric PSD matrix, clamped at zero. Values below
/// `-1e-8 * trace` are treated as a genuinely indefinite input.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let trace = m.trace().abs();
    let mut eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-8 * trace.max(f64::MIN_POSITIVE) && min < -1e-300 {
        return Err(Error::numerical(format!("{what} has eigenvalue {min:e} (trace {trace:e})")));
    }
    if min < 0.0 {
        log::debug!("clamping eigenvalue {min:e} of {what}");
    }
    eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    Ok(eig)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::param(format!("dimension mismatch: {d} vs {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let eig = psd_eigen(sa.clone(), "first covariance")?;
    let sqrt_a = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
        * eig.eigenvectors.transpose();
    let mut inner = &sqrt_a * &sb * &sqrt_a;
    // Symmetrize against rounding before the second decomposition.
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = psd_eigen(inner, "cross product")?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Cluster-by-class counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub clusters: usize,
    pub classes: usize,
    /// `clusters x classes`, row-major.
    pub counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn new(clusters: usize, classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != clusters * classes {
            return Err(Error::param("contingency counts have the wrong length"));
        }
        Ok(Self {
            clusters,
            classes,
            counts,
        })
    }

    pub fn from_labels(assignments: &[u32], labels: &[u32]) -> Result<Self> {
        if assignments.len() != labels.len() {
            return Err(Error::param(format!(
                "{} assignments vs {} labels",
                assignments.len(),
                labels.len()
            )));
        }
        if assignments.is_empty() {
            return Err(Error::param("empty partition"));
        }
        let clusters = *assignments.iter().max().unwrap() as usize + 1;
        let classes = *labels.iter().max().unwrap() as usize + 1;
        let mut counts = vec![0u64; clusters * classes];
        for (&a, &l) in assignments.iter().zip(labels) {
            counts[a as usize * classes + l as usize] += 1;
        }
        Self::new(clusters, classes, counts)
    }

    pub fn get(&self, cluster: usize, class: usize) -> u64 {
        self.counts[cluster * self.classes + class]
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.clusters)
            .map(|i| (0..self.classes).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.clusters).map(|i| self.get(i, j)).sum())
            .collect()
    }
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information (nats) of a contingency table.
pub fn mutual_information(t: &ContingencyTable) -> f64 {
    let n = t.n() as f64;
    let (a, b) = (t.row_sums(), t.col_sums());
    let mut mi = 0.0;
    for i in 0..t.clusters {
        for j in 0..t.classes {
            let nij = t.get(i, j);
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Expected mutual information under the permutation model with fixed
/// marginals (hypergeometric cell counts).
pub fn expected_mutual_information(t: &ContingencyTable) -> f64 {
    let n = t.n() as usize;
    let lf = log_factorials(n);
    let nf = n as f64;
    let a: Vec<usize> = t.row_sums().into_iter().filter(|&s| s > 0).map(|s| s as usize).collect();
    let b: Vec<usize> = t.col_sums().into_iter().filter(|&s| s > 0).map(|s| s as usize).collect();
    let mut emi = 0.0;
    for &ai in &a {
        for &bj in &b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            let fixed = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj] - lf[n];
            for nij in lo..=hi {
                let log_p = fixed - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[n + nij - ai - bj];
                let term = nij as f64 / nf * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Adjusted mutual information with arithmetic-mean normalization:
/// `(MI - E[MI]) / ((H(U) + H(V)) / 2 - E[MI])`.
pub fn ami_from_table(t: &ContingencyTable) -> f64 {
    let n = t.n() as f64;
    let (a, b) = (t.row_sums(), t.col_sums());
    let used_a = a.iter().filter(|&&s| s > 0).count();
    let used_b = b.iter().filter(|&&s| s > 0).count();
    if used_a == used_b && used_a <= 1 || is_bijection(t) {
        return 1.0;
    }
    let mi = mutual_information(t);
    let emi = expected_mutual_information(t);
    let normalizer = 0.5 * (entropy(&a, n) + entropy(&b, n));
    let mut denom = normalizer - emi;
    if denom < 0.0 {
        denom = denom.min(-f64::EPSILON);
    } else {
        denom = denom.max(f64::EPSILON);
    }
    (mi - emi) / denom
}

/// Every used row and column holds exactly one nonzero cell: the partitions
/// agree up to relabeling. With all-singleton partitions both MI and E[MI]
/// equal the normalizer, so the ratio is 0/0 and the limit value 1 is used.
fn is_bijection(t: &ContingencyTable) -> bool {
    let rows = (0..t.clusters).all(|i| (0..t.classes).filter(|&j| t.get(i, j) > 0).count() <= 1);
    let cols = (0..t.classes).all(|j| (0..t.clusters).filter(|&i| t.get(i, j) > 0).count() <= 1);
    rows && cols
}

/// Adjusted normalized mutual information between a clustering and labels.
pub fn anmi(assignment: &ClusterAssignment, labels: &[u32]) -> Result<f64> {
    Ok(ami_from_table(&ContingencyTable::from_labels(&assignment.assignments, labels)?))
}

/// One-to-one cluster-to-class mapping maximizing matched samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HungarianMapping {
    /// `mapping[cluster]` is the matched class, if any.
    pub mapping: Vec<Option<usize>>,
    pub matched: u64,
    pub accuracy: f64,
}

/// Maximum-weight assignment on the (zero-padded) count matrix using the
/// O(n^3) shortest-augmenting-path Hungarian method.
pub fn hungarian_map(t: &ContingencyTable) -> HungarianMapping {
    let size = t.clusters.max(t.classes);
    let max = t.counts.iter().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| -> i64 {
        if i < t.clusters && j < t.classes {
            max - t.get(i, j) as i64
        } else {
            max
        }
    };
    let col_of_row = min_cost_assignment(size, cost);
    let mut mapping = vec![None; t.clusters];
    let mut matched = 0;
    for (i, &j) in col_of_row.iter().enumerate().take(t.clusters) {
        if j < t.classes {
            mapping[i] = Some(j);
            matched += t.get(i, j);
        }
    }
    let n = t.n();
    HungarianMapping {
        mapping,
        matched,
        accuracy: if n == 0 { 0.0 } else { matched as f64 / n as f64 },
    }
}

/// Square min-cost perfect matching; returns the column assigned to each row.
fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> i64) -> Vec<usize> {
    // 1-based potentials; row 0 / column 0 are sentinels.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Hungarian-mapped accuracy of a clustering against labels.
pub fn cluster_accuracy(assignment: &ClusterAssignment, labels: &[u32]) -> Result<HungarianMapping> {
    Ok(hungarian_map(&ContingencyTable::from_labels(&assignment.assignments, labels)?))
}

/// Area under the ROC curve for `positive` scoring above `negative`, from
/// the Mann-Whitney statistic with midranks for ties.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::param("AUROC needs both classes"));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::numerical("NaN score"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Highest cosine similarity of every query row to any reference row.
pub fn max_cosine_to(queries: &FeatureSet, reference: &FeatureSet) -> Result<Vec<f64>> {
    if queries.dim() != reference.dim() {
        return Err(Error::param("dimension mismatch"));
    }
    let d = queries.dim();
    let q = normalized_rows(queries.features(), d)?;
    let r = normalized_rows(reference.features(), d)?;
    Ok(q.chunks_exact(d)
        .map(|qi| {
            r.chunks_exact(d)
                .map(|rj| qi.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// 1-NN cosine AUROC: test samples (positives) against generated samples
/// (negatives), scored by their top-1 similarity to the training set. Values
/// above 0.5 mean generated samples lie farther from the training data.
pub fn nn_auroc(generated: &FeatureSet, train: &FeatureSet, test: &FeatureSet) -> Result<f64> {
    let neg = max_cosine_to(generated, train)?;
    let pos = max_cosine_to(test, train)?;
    auroc(&pos, &neg)
}

/// Zero-shot style labels: softmax over cosine similarities to `K`
/// prototype rows, then argmax (ties to the lower index).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub assignment: ClusterAssignment,
    /// `N x K` softmax probabilities.
    pub probs: Vec<f64>,
}

pub fn pseudo_label(feats: &FeatureSet, prototypes: &FeatureSet, temperature: f64) -> Result<PseudoLabels> {
    if feats.dim() != prototypes.dim() {
        return Err(Error::param("prototype dimension mismatch"));
    }
    if !(temperature > 0.0) {
        return Err(Error::param("temperature must be positive"));
    }
    let d = feats.dim();
    let k = prototypes.n();
    let protos = normalized_rows(prototypes.features(), d)
        .map_err(|e| Error::param(format!("prototype: {e}")))?;
    let x = normalized_rows(feats.features(), d)?;
    let mut assignments = Vec::with_capacity(feats.n());
    let mut probs = vec![0.0; feats.n() * k];
    let mut sims = vec![0.0; k];
    for (i, xi) in x.chunks_exact(d).enumerate() {
        for (s, p) in sims.iter_mut().zip(protos.chunks_exact(d)) {
            *s = xi.iter().zip(p).map(|(a, b)| a * b).sum();
        }
        assignments.push(argmax(&sims) as u32);
        softmax(&sims, temperature, &mut probs[i * k..(i + 1) * k]);
    }
    Ok(PseudoLabels {
        assignment: ClusterAssignment::new(Method::Pseudo, assignments, k)?,
        probs,
    })
}

/// Pearson goodness-of-fit of observed category `counts` against
/// `probs`. Returns the statistic and its upper-tail p-value; categories with
/// zero probability must be empty (otherwise the p-value is 0).
pub fn chi_square_test(counts: &[u64], probs: &[f64]) -> Result<(f64, f64)> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if counts.len() != probs.len() {
        return Err(Error::param("counts and probabilities differ in length"));
    }
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(Error::param("chi-square test needs observations"));
    }
    let mut stat = 0.0;
    let mut cells = 0;
    for (&o, &p) in counts.iter().zip(probs) {
        if p > 0.0 {
            let e = p * n as f64;
            stat += (o as f64 - e).powi(2) / e;
            cells += 1;
        } else if o > 0 {
            return Ok((f64::INFINITY, 0.0));
        }
    }
    if cells < 2 {
        return Ok((stat, 1.0));
    }
    let dist = ChiSquared::new((cells - 1) as f64).map_err(|e| Error::numerical(e.to_string()))?;
    Ok((stat, dist.sf(stat)))
}

/// JSON report of a single metric evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub config: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
        GaussianStats {
            mean: mean.to_vec(),
            cov: cov.to_vec(),
            n: 10,
        }
    }

    #[test]
    fn two_point_stats() {
        let s = gaussian_stats(&[0.0, 0.0, 2.0, 0.0], 2, 2).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.cov, vec![2.0, 0.0, 0.0, 0.0]);
        let z = gaussian_stats(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 3, 2).unwrap();
        assert!(z.cov.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&[1.0, 2.0], 1, 2).is_err());
    }

    #[test]
    fn frechet_examples() {
        let a = stats(&[0.3, -1.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let b = stats(&[3.0, 4.0], &[2.0, 0.5, 0.5, 1.0]);
        let z = stats(&[0.0, 0.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!((frechet_distance(&b, &z).unwrap() - 25.0).abs() < 1e-6);
        let p = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 4.0]);
        let q = stats(&[0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]);
        // 5 + 5 - 2 * (sqrt(4) + sqrt(4))
        assert!((frechet_distance(&p, &q).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn frechet_rejects_bad_covariances() {
        let ok = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let asym = stats(&[0.0, 0.0], &[1.0, 0.3, 0.0, 1.0]);
        assert!(frechet_distance(&ok, &asym).is_err());
        let nan = stats(&[0.0, f64::NAN], &[1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&ok, &nan).is_err());
        let indefinite = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, -1.0]);
        assert!(frechet_distance(&indefinite, &ok).is_err());
        let three = stats(&[0.0; 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&ok, &three).is_err());
    }

    #[test]
    fn ami_perfect_and_trivial() {
        let a = ClusterAssignment::new(Method::Kmeans, vec![2, 2, 0, 0, 1, 1], 3).unwrap();
        assert!((anmi(&a, &[0, 0, 1, 1, 2, 2]).unwrap() - 1.0).abs() < 1e-9);
        let one = ClusterAssignment::new(Method::Kmeans, vec![0, 0, 0], 1).unwrap();
        assert_eq!(anmi(&one, &[4, 4, 4]).unwrap(), 1.0);
    }

    #[test]
    fn hungarian_examples() {
        let diag = ContingencyTable::new(3, 3, vec![5, 0, 0, 0, 5, 0, 0, 0, 5]).unwrap();
        let m = hungarian_map(&diag);
        assert_eq!(m.mapping, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(m.accuracy, 1.0);
        let swap = ContingencyTable::new(2, 2, vec![0, 10, 10, 0]).unwrap();
        let m = hungarian_map(&swap);
        assert_eq!(m.mapping, vec![Some(1), Some(0)]);
        assert_eq!(m.accuracy, 1.0);
        // More clusters than classes: one cluster stays unmatched.
        let rect = ContingencyTable::new(3, 2, vec![4, 1, 0, 3, 2, 2]).unwrap();
        let m = hungarian_map(&rect);
        assert_eq!(m.matched, 7);
        assert_eq!(m.mapping.iter().filter(|x| x.is_none()).count(), 1);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.7, 0.6]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.7], &[0.8, 0.6]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn nn_auroc_extremes() {
        let train = FeatureSet::new(2, 2, vec![1.0, 0.0, 0.8, 0.2], None).unwrap();
        let test = train.clone();
        assert_eq!(nn_auroc(&test, &train, &test).unwrap(), 0.5);
        let far = FeatureSet::new(2, 2, vec![0.0, 1.0, -0.2, 0.8], None).unwrap();
        assert_eq!(nn_auroc(&far, &train, &test).unwrap(), 1.0);
        let zero = FeatureSet::new(1, 2, vec![0.0, 0.0], None).unwrap();
        assert!(nn_auroc(&zero, &train, &test).is_err());
    }

    #[test]
    fn chi_square_reference_values() {
        let (stat, p) = chi_square_test(&[10, 10, 10, 10], &[0.25; 4]).unwrap();
        assert_eq!(stat, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let (_, p) = chi_square_test(&[0, 3], &[0.5, 0.5]).unwrap();
        assert!(p < 0.1);
        let (stat, p) = chi_square_test(&[30, 10], &[0.5, 0.5]).unwrap();
        assert_eq!(stat, 10.0);
        assert!((p - 0.001_565_402_258).abs() < 1e-9);
        assert_eq!(chi_square_test(&[1, 1], &[1.0, 0.0]).unwrap().1, 0.0);
    }

    #[test]
    fn pseudo_label_examples() {
        let protos = FeatureSet::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], None).unwrap();
        let x = FeatureSet::new(2, 2, vec![1.0, 0.1, 1.0, 1.0], None).unwrap();
        for tau in [0.01, 0.1, 1.0] {
            let p = pseudo_label(&x, &protos, tau).unwrap();
            assert_eq!(p.assignment.assignments, vec![0, 0]);
            assert_eq!(p.assignment.method, Method::Pseudo);
            assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-12);
        }
        let bad = FeatureSet::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], None).unwrap();
        assert!(pseudo_label(&x, &bad, 0.1).is_err());
    }
}
