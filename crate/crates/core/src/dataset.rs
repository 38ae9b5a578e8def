//! Feature datasets: loading, writing, normalization, neighbor mining and
//! synthetic Gaussian-mode generation.
//!
//! Features are stored as `f32` rows; anything numerically sensitive
//! (similarities, losses, statistics) is accumulated in `f64`.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"CCFS";
pub const VERSION: u8 = 1;
const FLAG_LABELS: u8 = 0b1;
const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4;

/// An `N x D` matrix of embeddings with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    n: usize,
    d: usize,
    features: Vec<f32>,
    labels: Option<Vec<u32>>,
    ids: Vec<u64>,
}

impl FeatureSet {
    /// Builds a feature set, rejecting empty shapes, non-finite entries and
    /// label vectors of the wrong length.
    pub fn new(n: usize, d: usize, features: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::param(format!("feature set must be non-empty, got {n}x{d}")));
        }
        if features.len() != n * d {
            return Err(Error::param(format!(
                "expected {} values for a {n}x{d} feature set, got {}",
                n * d,
                features.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::param(format!("{} labels for {n} samples", l.len())));
            }
        }
        Ok(Self {
            n,
            d,
            features,
            labels,
            ids: (0..n as u64).collect(),
        })
    }

    /// Builds a feature set from `f64` rows (cast to `f32`).
    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<u32>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::param("rows have differing lengths"));
        }
        let features = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(rows.len(), d, features, labels)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Number of distinct label values, `max(label) + 1`.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    /// Row-major copy widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| f64::from(v)).collect()
    }

    /// Feature set restricted to the given rows, preserving their ids.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        let labels = self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect());
        let mut out = Self::new(rows.len(), self.d, features, labels)?;
        out.ids = rows.iter().map(|&r| self.ids[r]).collect();
        Ok(out)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Serializes to the `CCFS` binary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let label_bytes = self.labels.as_ref().map_or(0, |l| 4 * l.len());
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.features.len() + label_bytes);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(if self.labels.is_some() { FLAG_LABELS } else { 0 });
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    /// A `CCFS` file declaring zero rows of width `d`. [`FeatureSet`] itself
    /// is never empty, so such files are written but rejected on load.
    pub fn empty_bytes(d: usize, labels: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(if labels { FLAG_LABELS } else { 0 });
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out
    }

    /// Parses the `CCFS` binary format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"CCFS\""));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
        }
        let flags = bytes[5];
        if flags & !FLAG_LABELS != 0 {
            return Err(Error::format(5, format!("unknown flags {flags:#04x}")));
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if n == 0 || d == 0 {
            return Err(Error::format(6, format!("empty shape {n}x{d}")));
        }
        let has_labels = flags & FLAG_LABELS != 0;
        let payload = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(if has_labels { n } else { 0 }))
            .and_then(|w| w.checked_mul(4))
            .ok_or_else(|| Error::format(6, "declared shape overflows"))?;
        let expected = HEADER_LEN + payload;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!("declared {n}x{d} needs {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut features = Vec::with_capacity(n * d);
        let mut off = HEADER_LEN;
        for _ in 0..n * d {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(off, "non-finite feature value"));
            }
            features.push(v);
            off += 4;
        }
        let labels = has_labels.then(|| {
            (0..n)
                .map(|i| {
                    let o = off + 4 * i;
                    u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
                })
                .collect()
        });
        Self::new(n, d, features, labels)
    }

    /// Renders as CSV, with a trailing label column when labels are present.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            if let Some(l) = &self.labels {
                out.push(',');
                out.push_str(&l[i].to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parses CSV text. When `label_col` is set, the last column of every row
    /// is read as a non-negative integer label.
    pub fn from_csv(text: &str, label_col: bool) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut d = None;
        let mut n = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if label_col {
                let raw = cols
                    .pop()
                    .filter(|_| !cols.is_empty())
                    .ok_or_else(|| Error::format(line_no, "row has no feature columns"))?;
                let label: u32 = raw
                    .parse()
                    .map_err(|_| Error::format(line_no, format!("bad label {raw:?}")))?;
                labels.push(label);
            }
            match d {
                None => d = Some(cols.len()),
                Some(d) if d != cols.len() => {
                    return Err(Error::format(
                        line_no,
                        format!("expected {d} feature columns, found {}", cols.len()),
                    ))
                }
                _ => {}
            }
            for c in cols {
                let v: f32 = c
                    .parse()
                    .map_err(|_| Error::format(line_no, format!("bad float {c:?}")))?;
                if !v.is_finite() {
                    return Err(Error::format(line_no, "non-finite feature value"));
                }
                features.push(v);
            }
            n += 1;
        }
        let d = d.ok_or_else(|| Error::format(0, "empty CSV"))?;
        Self::new(n, d, features, label_col.then_some(labels))
    }
}

/// On-disk formats accepted by [`load_features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Binary,
    Csv,
}

impl FileFormat {
    /// Guesses the format from the file extension (`.csv` or binary).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

pub fn load_features(path: &Path, format: FileFormat, label_col: bool) -> Result<FeatureSet> {
    match format {
        FileFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            FeatureSet::from_bytes(&bytes)
        }
        FileFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            FeatureSet::from_csv(&text, label_col)
        }
    }
}

pub fn write_features(fs_: &FeatureSet, path: &Path, format: FileFormat) -> Result<()> {
    let bytes = match format {
        FileFormat::Binary => fs_.to_bytes(),
        FileFormat::Csv => fs_.to_csv().into_bytes(),
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize(fs_: &FeatureSet) -> Result<FeatureSet> {
    let d = fs_.dim();
    let rows = normalized_rows(fs_.features(), d)?;
    let mut out = fs_.clone();
    out.features = rows.iter().map(|&v| v as f32).collect();
    Ok(out)
}

/// Unit-normalized `f64` copy of row-major data; errors on zero-norm rows.
pub(crate) fn normalized_rows(data: &[f32], d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for (i, row) in data.chunks_exact(d).enumerate() {
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::param(format!("row {i} has zero norm")));
        }
        out.extend(row.iter().map(|&v| f64::from(v) / norm));
    }
    Ok(out)
}

/// The `m` most cosine-similar samples of every row, self excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    m: usize,
    neighbors: Vec<u32>,
}

impl NeighborSets {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.neighbors.len() / self.m
    }

    /// Neighbors of sample `i`, most similar first.
    pub fn of(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.m..(i + 1) * self.m]
    }
}

/// Exact brute-force cosine k-NN. Ties are broken by lower sample index.
pub fn mine_knn(fs_: &FeatureSet, m: usize) -> Result<NeighborSets> {
    let n = fs_.n();
    if m == 0 || m >= n {
        return Err(Error::param(format!("need 0 < m < N, got m={m}, N={n}")));
    }
    let d = fs_.dim();
    let unit = normalized_rows(fs_.features(), d)?;
    let mut neighbors = Vec::with_capacity(n * m);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    let by_rank = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    for i in 0..n {
        let qi = &unit[i * d..(i + 1) * d];
        cand.clear();
        for j in (0..n).filter(|&j| j != i) {
            let qj = &unit[j * d..(j + 1) * d];
            let s: f64 = qi.iter().zip(qj).map(|(a, b)| a * b).sum();
            cand.push((s, j as u32));
        }
        if m < cand.len() {
            cand.select_nth_unstable_by(m - 1, by_rank);
            cand.truncate(m);
        }
        cand.sort_unstable_by(by_rank);
        neighbors.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighborSets { m, neighbors })
}

/// Parameters of an isotropic Gaussian-mixture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modes: usize,
    pub dim: usize,
    pub samples_per_mode: Vec<usize>,
    pub mode_separation: f64,
    pub mode_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `modes` equally sized modes.
    pub fn balanced(modes: usize, dim: usize, per_mode: usize, separation: f64, scale: f64, seed: u64) -> Self {
        Self {
            modes,
            dim,
            samples_per_mode: vec![per_mode; modes],
            mode_separation: separation,
            mode_scale: scale,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.samples_per_mode.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.dim == 0 {
            return Err(Error::param("synthetic spec needs modes >= 1 and dim >= 1"));
        }
        if self.samples_per_mode.len() != self.modes {
            return Err(Error::param(format!(
                "samples_per_mode has {} entries for {} modes",
                self.samples_per_mode.len(),
                self.modes
            )));
        }
        if self.samples_per_mode.contains(&0) {
            return Err(Error::param("every mode needs at least one sample"));
        }
        if !(self.mode_separation > 0.0 && self.mode_scale > 0.0) {
            return Err(Error::param("mode separation and scale must be positive"));
        }
        Ok(())
    }

    /// Mode centers, `modes x dim` row-major.
    ///
    /// In two dimensions the centers sit on a ring whose chord between
    /// neighbours equals the separation. In higher dimensions they are scaled
    /// basis vectors (a simplex), so `modes <= dim`. One dimension admits two
    /// centers at `+-separation / 2`.
    pub fn centers(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let (k, d, sep) = (self.modes, self.dim, self.mode_separation);
        let mut c = vec![0.0; k * d];
        if k == 1 {
            c[0] = sep;
            return Ok(c);
        }
        match d {
            1 if k == 2 => {
                c[0] = -sep / 2.0;
                c[1] = sep / 2.0;
            }
            1 => return Err(Error::param(format!("{k} modes cannot be placed in 1 dimension"))),
            2 => {
                let r = sep / (2.0 * (std::f64::consts::PI / k as f64).sin());
                for i in 0..k {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                    c[i * 2] = r * a.cos();
                    c[i * 2 + 1] = r * a.sin();
                }
            }
            _ if k > d => {
                return Err(Error::param(format!(
                    "{k} simplex modes need dim >= {k}, got {d}"
                )))
            }
            _ => {
                let r = sep / std::f64::consts::SQRT_2;
                for i in 0..k {
                    c[i * d + i] = r;
                }
            }
        }
        Ok(c)
    }
}

/// Draws the Gaussian mixture described by `spec`; labels are mode indices.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<FeatureSet> {
    let centers = spec.centers()?;
    let d = spec.dim;
    let mut rng = rng::seeded(spec.seed);
    let mut features = Vec::with_capacity(spec.total() * d);
    let mut labels = Vec::with_capacity(spec.total());
    for (k, &count) in spec.samples_per_mode.iter().enumerate() {
        let center = &centers[k * d..(k + 1) * d];
        for _ in 0..count {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push((c + spec.mode_scale * z) as f32);
            }
            labels.push(k as u32);
        }
    }
    FeatureSet::new(spec.total(), d, features, Some(labels))
}

/// Cosine similarity in `f64`; `None` if either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (na > 0.0 && nb > 0.0).then(|| dot / (na.sqrt() * nb.sqrt()))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if x.partial_cmp(&v[best]) == Some(Ordering::Greater) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(rows: &[&[f32]]) -> FeatureSet {
        let d = rows[0].len();
        FeatureSet::new(rows.len(), d, rows.iter().flat_map(|r| r.iter().copied()).collect(), None).unwrap()
    }

    #[test]
    fn binary_round_trip_without_labels() {
        let a = fs(&[&[1.0, 2.0], &[3.0, 4.0], &[-1.0, 0.5], &[0.0, 1e-3]]);
        let bytes = a.to_bytes();
        assert_eq!(bytes.len(), 14 + 32);
        let b = FeatureSet::from_bytes(&bytes).unwrap();
        assert_eq!((b.n(), b.dim()), (4, 2));
        assert!(b.labels().is_none());
        assert_eq!(a, b);
    }

    #[test]
    fn csv_with_label_column() {
        let f = FeatureSet::from_csv("0.0,1.0,3\n1.0,0.0,2", true).unwrap();
        assert_eq!((f.n(), f.dim()), (2, 2));
        assert_eq!(f.labels(), Some(&[3, 2][..]));
        assert_eq!(f.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = fs(&[&[1.0, 2.0], &[3.0, 4.0]]).to_bytes();
        bytes[6..10].copy_from_slice(&3u32.to_le_bytes());
        match FeatureSet::from_bytes(&bytes) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn csv_errors_name_the_line() {
        match FeatureSet::from_csv("1,2\n3\n", false) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        match FeatureSet::from_csv("1,2\n3,nan\n", false) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&fs(&[&[3.0, 4.0]])).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-6 && (n.row(0)[1] - 0.8).abs() < 1e-6);
        let n = l2_normalize(&fs(&[&[1.0, 0.0], &[0.0, 2.0]])).unwrap();
        assert_eq!(n.features(), &[1.0, 0.0, 0.0, 1.0]);
        let err = l2_normalize(&fs(&[&[1.0, 1.0], &[0.0, 0.0]])).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn knn_small_angles() {
        let deg = |a: f64| [a.to_radians().cos() as f32, a.to_radians().sin() as f32];
        let f = fs(&[&deg(0.0), &deg(10.0), &deg(90.0)]);
        let nn = mine_knn(&f, 1).unwrap();
        assert_eq!([nn.of(0)[0], nn.of(1)[0], nn.of(2)[0]], [1, 0, 1]);
    }

    #[test]
    fn knn_duplicates_point_at_each_other() {
        let f = fs(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, -1.0]]);
        let nn = mine_knn(&f, 1).unwrap();
        assert_eq!(nn.of(0), &[1]);
        assert_eq!(nn.of(1), &[0]);
    }

    #[test]
    fn knn_full_neighbourhood_and_bad_m() {
        let f = fs(&[&[1.0, 0.0], &[0.5, 0.5], &[0.0, 1.0], &[-1.0, 0.2]]);
        let nn = mine_knn(&f, 3).unwrap();
        for i in 0..4 {
            let mut row: Vec<u32> = nn.of(i).to_vec();
            row.sort_unstable();
            let expect: Vec<u32> = (0..4).filter(|&j| j != i as u32).collect();
            assert_eq!(row, expect);
        }
        assert!(matches!(mine_knn(&f, 4), Err(Error::Param(_))));
    }

    #[test]
    fn synthetic_two_modes_are_separable() {
        let spec = SyntheticSpec::balanced(2, 2, 10, 10.0, 0.1, 3);
        let f = make_synthetic(&spec).unwrap();
        let centers = spec.centers().unwrap();
        for i in 0..f.n() {
            let r = f.row(i);
            let dist = |k: usize| {
                (0..2)
                    .map(|j| (f64::from(r[j]) - centers[k * 2 + j]).powi(2))
                    .sum::<f64>()
            };
            let nearest = if dist(0) <= dist(1) { 0 } else { 1 };
            assert_eq!(nearest, f.labels().unwrap()[i]);
        }
        assert_eq!(f, make_synthetic(&spec).unwrap());
    }

    #[test]
    fn synthetic_single_mode_and_infeasible() {
        let f = make_synthetic(&SyntheticSpec::balanced(1, 3, 5, 1.0, 0.1, 0)).unwrap();
        assert!(f.labels().unwrap().iter().all(|&l| l == 0));
        assert!(make_synthetic(&SyntheticSpec::balanced(5, 3, 5, 1.0, 0.1, 0)).is_err());
        assert!(make_synthetic(&SyntheticSpec::balanced(3, 1, 5, 1.0, 0.1, 0)).is_err());
    }

    #[test]
    fn ring_centers_respect_separation() {
        for k in 2..12 {
            let spec = SyntheticSpec::balanced(k, 2, 1, 2.5, 0.1, 0);
            let c = spec.centers().unwrap();
            for i in 0..k {
                for j in 0..i {
                    let dist = ((c[2 * i] - c[2 * j]).powi(2) + (c[2 * i + 1] - c[2 * j + 1]).powi(2)).sqrt();
                    assert!(dist >= 2.5 - 1e-9, "k={k} dist={dist}");
                }
            }
        }
    }
}
