//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{FileFormat, SyntheticSpec};
use crate::diffusion::{DenoiserConfig, NoiseSchedule, Solver, TrainRunConfig};
use crate::error::{Error, Result};
use crate::temi::TemiConfig;

/// Where the training features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File {
        path: PathBuf,
        /// Guessed from the extension when absent.
        #[serde(default)]
        format: Option<FileFormat>,
        /// Whether a CSV file has a trailing integer label column.
        #[serde(default)]
        labels_col: bool,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::balanced(8, 2, 512, 1.0, 0.05, 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Kmeans,
    Temi,
    Labels,
    Pseudo,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub method: ClusterMethod,
    #[serde(rename = "C")]
    pub c: usize,
    /// Cluster counts to sweep; empty means just `C`.
    pub sweep: Vec<usize>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    /// `K x D` prototype features for pseudo-labelling.
    pub prototypes: Option<PathBuf>,
    pub pseudo_temperature: f64,
    /// Assignment JSON consumed by `train`, `sample` and `eval`.
    pub assignment: Option<PathBuf>,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Temi,
            c: 8,
            sweep: Vec::new(),
            kmeans_restarts: 10,
            kmeans_max_iter: 300,
            prototypes: None,
            pseudo_temperature: 0.01,
            assignment: None,
        }
    }
}

impl ClusteringConfig {
    pub fn cluster_counts(&self) -> Vec<usize> {
        if self.sweep.is_empty() {
            vec![self.c]
        } else {
            self.sweep.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSettings {
    pub alpha: f64,
    #[serde(rename = "C_start")]
    pub c_start: usize,
    pub max_doublings: usize,
    pub refine_step: Option<usize>,
    /// TEMI epochs per probe.
    pub probe_epochs: usize,
    /// When set, also run the `gamma = 1` lower bound at this many clusters.
    #[serde(rename = "lower_C_big")]
    pub lower_c_big: Option<usize>,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            alpha: 0.96,
            c_start: 2,
            max_doublings: 16,
            refine_step: None,
            probe_epochs: 50,
            lower_c_big: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub denoiser: DenoiserConfig,
    pub train: TrainRunConfig,
    pub schedule: NoiseSchedule,
    /// Trainer checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// Draw conditions from the empirical cluster distribution `q(c)`.
    Empirical,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_samples: usize,
    /// Independent sample sets; Fréchet values are averaged over them.
    pub sets: usize,
    pub conditions: ConditionMode,
    pub solver: Solver,
    /// Seed of the initial noise, shared by every model sampled with it.
    pub noise_seed: Option<u64>,
    /// Also write the initial noise of every set.
    pub dump_noise: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            sets: 3,
            conditions: ConditionMode::Empirical,
            solver: Solver::Heun,
            noise_seed: None,
            dump_noise: false,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Frechet,
    Ufid,
    Auroc,
    Anmi,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<MetricName>,
    /// Generated sample files to evaluate.
    pub samples: Vec<PathBuf>,
    /// Unconditional samples for uFID.
    pub unconditional: Option<PathBuf>,
    /// Reference features; synthetic data falls back to fresh held-out draws.
    pub reference: Option<PathBuf>,
    /// Size of the synthetic held-out reference.
    pub reference_samples: usize,
    /// TEMI checkpoint used to rank generated samples by confidence.
    pub temi_checkpoint: Option<PathBuf>,
    /// Number of lowest and highest confidence samples to export.
    pub msp_extremes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![MetricName::Frechet, MetricName::Ufid, MetricName::Auroc, MetricName::Anmi, MetricName::Accuracy],
            samples: Vec::new(),
            unconditional: None,
            reference: None,
            reference_samples: 10_000,
            temi_checkpoint: None,
            msp_extremes: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    pub seeds: usize,
    /// Cluster counts for the out-of-distribution sweep.
    pub sweep: Vec<usize>,
    /// Size ratio of large to small modes in the imbalanced dataset.
    pub imbalance: usize,
    /// Sample sets per intermediate checkpoint in the efficiency curve.
    pub milestone_sets: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            sweep: vec![2, 4, 8, 16, 32, 64],
            imbalance: 8,
            milestone_sets: 1,
        }
    }
}

/// Everything a command needs. Component seeds inside `temi` and
/// `diffusion.train` are ignored: every run derives them from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub clustering: ClusteringConfig,
    pub temi: TemiConfig,
    pub bound: BoundSettings,
    pub diffusion: DiffusionSettings,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub reproduce: ReproduceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataSource::default(),
            clustering: ClusteringConfig::default(),
            temi: TemiConfig::desk_scale(8, usize::MAX),
            bound: BoundSettings::default(),
            diffusion: DiffusionSettings::default(),
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
            reproduce: ReproduceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks value ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let cl = &self.clustering;
        if cl.c == 0 || cl.sweep.contains(&0) {
            return bad("cluster counts must be positive".into());
        }
        if self.reproduce.sweep.is_empty() || self.reproduce.sweep.contains(&0) {
            return bad("reproduce.sweep must list positive cluster counts".into());
        }
        if self.reproduce.seeds == 0 || self.reproduce.imbalance == 0 || self.reproduce.milestone_sets == 0 {
            return bad("reproduce.seeds, imbalance and milestone_sets must be positive".into());
        }
        if self.sampling.sets == 0 {
            return bad("sampling.sets must be positive".into());
        }
        if !(cl.pseudo_temperature > 0.0) {
            return bad("pseudo_temperature must be positive".into());
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.temi.validate().map_err(wrap)?;
        self.diffusion.train.validate().map_err(wrap)?;
        self.diffusion.schedule.validate().map_err(wrap)?;
        Ok(())
    }

    /// Files `stage` reads, whether configured or not.
    pub fn inputs(&self, stage: Stage) -> Vec<&Path> {
        let mut paths: Vec<&Path> = Vec::new();
        let data = match &self.data {
            DataSource::File { path, .. } => Some(path.as_path()),
            DataSource::Synthetic(_) => None,
        };
        let cl = &self.clustering;
        match stage {
            Stage::GenData | Stage::Reproduce => {}
            Stage::Cluster | Stage::Bound => {
                paths.extend(data);
                if stage == Stage::Cluster && cl.method == ClusterMethod::Pseudo {
                    paths.extend(cl.prototypes.as_deref());
                }
            }
            Stage::Train => {
                paths.extend(data);
                paths.extend(cl.assignment.as_deref());
                paths.extend(self.diffusion.resume.as_deref());
            }
            Stage::Sample => {
                paths.extend(self.sampling.checkpoint.as_deref());
                paths.extend(cl.assignment.as_deref());
            }
            Stage::Eval => {
                paths.extend(data);
                paths.extend(cl.assignment.as_deref());
                paths.extend(self.eval.samples.iter().map(PathBuf::as_path));
                paths.extend(self.eval.unconditional.as_deref());
                paths.extend(self.eval.reference.as_deref());
                paths.extend(self.eval.temi_checkpoint.as_deref());
            }
        }
        paths
    }

    /// [`Self::validate`] plus a check that every input of `stage` exists.
    pub fn validate_for(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        for p in self.inputs(stage) {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Pipeline command, for input validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Cluster,
    Bound,
    Train,
    Sample,
    Eval,
    Reproduce,
}
