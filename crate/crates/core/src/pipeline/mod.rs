//! Experiment runner: configuration, the command implementations behind the
//! CLI, and the desk-scale protocols that regenerate the figure trends.
//!
//! Every random stream is derived from the global seed with a fixed tag:
//!
//! | stream | seed |
//! |---|---|
//! | TEMI at `C` clusters | `derive(derive(seed, "temi"), C)` |
//! | k-means | `derive(seed, "kmeans")` |
//! | denoiser init and minibatches | `derive(seed, "diffusion")` |
//! | initial noise of sample set `k` | `derive(noise_seed, k)`, `noise_seed = derive(seed, "noise")` unless given |
//! | conditions of sample set `k` | `derive(derive(seed, "conditions"), k)` |
//!
//! so bound probes and clustering runs at the same `C` coincide, and models
//! sampled with the same noise seed start from identical noise.

mod commands;
mod config;
mod trends;

use std::fs;
use std::path::Path;

pub use commands::{
    cmd_bound, cmd_cluster, cmd_eval, cmd_gen_data, cmd_reproduce, cmd_sample, cmd_train, ClusterReport,
    EvalRow, MspExtremes, ReportFormat, Reproduction, SampleMeta, TrainSummary,
};
pub use config::{
    BoundSettings, ClusterMethod, ClusteringConfig, ConditionMode, DataSource, DiffusionSettings, EvalConfig,
    ExperimentConfig, MetricName, ReproduceConfig, SamplingConfig, Stage,
};
pub use trends::{
    bound_sweep, mark_c_v, ood_sweep, sample_efficiency, sampling_distribution, SeedRun, Trend, TrendResult,
    Verdict,
};

use crate::bounds::BoundSearchConfig;
use crate::dataset::{l2_normalize, load_features, make_synthetic, mine_knn, FeatureSet, FileFormat, SyntheticSpec};
use crate::diffusion::{initial_noise, solve_ode, Denoiser, NoiseSchedule, Solver};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_fit, ClusterAssignment, KMeansConfig};
use crate::metrics::pseudo_label;
use crate::rng::{self, derive_seed, derive_seed_str};
use crate::temi::{temi_assign, temi_fit, TemiConfig, TemiModel};

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<FeatureSet> {
    match &cfg.data {
        DataSource::Synthetic(spec) => make_synthetic(spec),
        DataSource::File {
            path,
            format,
            labels_col,
        } => load_features(path, format.unwrap_or_else(|| FileFormat::from_path(path)), *labels_col),
    }
}

/// Fresh draws from the same mixture with a derived seed, about `n` samples
/// split in the training set's mode proportions.
pub fn held_out_draw(spec: &SyntheticSpec, n: usize) -> Result<FeatureSet> {
    let total = spec.total() as f64;
    let held = SyntheticSpec {
        samples_per_mode: spec
            .samples_per_mode
            .iter()
            .map(|&k| ((k as f64 * n as f64 / total).round() as usize).max(1))
            .collect(),
        seed: derive_seed_str(spec.seed, "held-out"),
        ..spec.clone()
    };
    make_synthetic(&held)
}

/// Reference features for Fréchet distances: the configured file, or held-out
/// synthetic draws.
pub fn reference_features(cfg: &ExperimentConfig) -> Result<FeatureSet> {
    if let Some(path) = &cfg.eval.reference {
        return load_features(path, FileFormat::from_path(path), false);
    }
    match &cfg.data {
        DataSource::Synthetic(spec) => held_out_draw(spec, cfg.eval.reference_samples),
        DataSource::File { .. } => Err(Error::Config("file datasets need eval.reference".into())),
    }
}

/// TEMI settings for `c` clusters on `n` samples.
pub fn temi_config(cfg: &ExperimentConfig, c: usize, n: usize) -> TemiConfig {
    TemiConfig {
        c,
        seed: derive_seed(derive_seed_str(cfg.seed, "temi"), c as u64),
        ..cfg.temi.clone()
    }
    .fit_to(n)
}

pub fn bound_config(cfg: &ExperimentConfig, n: usize) -> BoundSearchConfig {
    let b = &cfg.bound;
    BoundSearchConfig {
        alpha: b.alpha,
        c_start: b.c_start,
        max_doublings: b.max_doublings,
        refine_step: b.refine_step,
        temi: TemiConfig {
            epochs: b.probe_epochs,
            ..cfg.temi.clone()
        }
        .fit_to(n),
        seed: derive_seed_str(cfg.seed, "temi"),
    }
}

/// A clustering plus the TEMI model that produced it, if any.
pub struct Clustering {
    pub assignment: ClusterAssignment,
    pub temi: Option<TemiModel>,
}

/// Clusters `fs` into `c` groups with `method`. TEMI runs on L2-normalized
/// features; k-means on the raw rows.
pub fn cluster_features(fs: &FeatureSet, cfg: &ExperimentConfig, method: ClusterMethod, c: usize) -> Result<Clustering> {
    let cl = &cfg.clustering;
    let (assignment, temi) = match method {
        ClusterMethod::Kmeans => {
            let k = KMeansConfig {
                restarts: cl.kmeans_restarts,
                max_iter: cl.kmeans_max_iter,
                ..KMeansConfig::new(c, derive_seed_str(cfg.seed, "kmeans"))
            };
            (kmeans_fit(fs, &k)?.assignment, None)
        }
        ClusterMethod::Temi => {
            let normalized = l2_normalize(fs)?;
            let tc = temi_config(cfg, c, fs.n());
            let neighbors = mine_knn(&normalized, tc.neighbors)?;
            let (model, _) = temi_fit(&normalized, &neighbors, &tc)?;
            (temi_assign(&model, &normalized)?, Some(model))
        }
        ClusterMethod::Labels => (ClusterAssignment::from_labels(fs)?, None),
        ClusterMethod::Pseudo => {
            let path = cl
                .prototypes
                .as_ref()
                .ok_or_else(|| Error::Config("pseudo-labelling needs clustering.prototypes".into()))?;
            let protos = load_features(path, FileFormat::from_path(path), false)?;
            (pseudo_label(fs, &protos, cl.pseudo_temperature)?.assignment, None)
        }
        ClusterMethod::None => return Err(Error::Config("clustering method is none".into())),
    };
    Ok(Clustering { assignment, temi })
}

/// Seed of the initial noise for sample set `set`.
pub fn noise_seed(cfg: &ExperimentConfig, set: usize) -> u64 {
    let base = cfg
        .sampling
        .noise_seed
        .unwrap_or_else(|| derive_seed_str(cfg.seed, "noise"));
    derive_seed(base, set as u64)
}

pub fn condition_seed(cfg: &ExperimentConfig, set: usize) -> u64 {
    derive_seed(derive_seed_str(cfg.seed, "conditions"), set as u64)
}

/// Initial noise of set `set`, `n x d`.
pub fn set_noise(cfg: &ExperimentConfig, set: usize, n: usize, d: usize) -> Vec<f64> {
    initial_noise(n, d, &cfg.diffusion.schedule, &mut rng::seeded(noise_seed(cfg, set)))
}

/// Integrates from the given noise; thin wrapper that fixes the schedule.
pub fn generate(
    den: &impl Denoiser,
    x0: Vec<f64>,
    conditions: &[u32],
    schedule: &NoiseSchedule,
    solver: Solver,
) -> Result<Vec<f64>> {
    solve_ode(den, x0, conditions, schedule, solver)
}

/// `rows x d` samples as a feature set (labels = condition ids).
pub fn samples_to_features(x: &[f64], d: usize, conditions: &[u32]) -> Result<FeatureSet> {
    FeatureSet::new(
        conditions.len(),
        d,
        x.iter().map(|&v| v as f32).collect(),
        Some(conditions.to_vec()),
    )
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Worker threads for seed-parallel protocols, from `CLUSTERDIFF_THREADS`
/// (default 1).
pub fn thread_count() -> usize {
    std::env::var("CLUSTERDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Applies `f` to every run, spreading contiguous chunks over
/// [`thread_count`] threads. Results come back in run order.
pub(crate) fn per_seed<T: Send>(runs: &mut [SeedRun], f: impl Fn(&mut SeedRun) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = thread_count().min(runs.len()).max(1);
    if threads == 1 {
        return runs.iter_mut().map(&f).collect();
    }
    let chunk = runs.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .chunks_mut(chunk)
            .map(|c| s.spawn(move || c.iter_mut().map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(runs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
