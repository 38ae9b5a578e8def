//! Implementations of the CLI subcommands. Every command reads an
//! [`ExperimentConfig`] and writes its artifacts under `cfg.out_dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    bound_config, cluster_features, condition_seed, ensure_dir, generate, load_dataset, noise_seed,
    reference_features, set_noise, write_text, ClusterMethod, ConditionMode, DataSource, ExperimentConfig,
    MetricName, SeedRun, Trend, TrendResult,
};
use crate::bounds::{find_lower_bound, find_upper_bound, BoundReport};
use crate::dataset::{l2_normalize, load_features, mine_knn, write_features, FeatureSet, FileFormat};
use crate::diffusion::{
    curve_csv, sample_conditions, training_conditions, ConditionDist, ConditionSource, CurvePoint, Denoiser,
    DiffusionModel, DiffusionTrainer, TrainRunConfig,
};
use crate::error::{Error, Result};
use crate::kmeans::ClusterAssignment;
use crate::metrics::{anmi, cluster_accuracy, feature_stats, frechet_distance, nn_auroc};
use crate::rng::{self, derive_seed_str};
use crate::temi::{msp_confidence, TemiModel};

/// Layout of tabular reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    #[default]
    Json,
}

impl ReportFormat {
    fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

fn json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_assignment(path: &Path) -> Result<ClusterAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClusterAssignment::from_json(&text)
}

/// Writes the configured synthetic dataset to `out_dir/data.{ccfs,csv}`
/// (CSV carries a trailing label column).
pub fn cmd_gen_data(cfg: &ExperimentConfig, format: FileFormat) -> Result<PathBuf> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(Error::Config("gen-data needs a synthetic data source".into()));
    };
    ensure_dir(&cfg.out_dir)?;
    let fs = crate::dataset::make_synthetic(spec)?;
    let path = cfg.out_dir.join(match format {
        FileFormat::Binary => "data.ccfs",
        FileFormat::Csv => "data.csv",
    });
    write_features(&fs, &path, format)?;
    Ok(path)
}

/// One clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub method: ClusterMethod,
    #[serde(rename = "C")]
    pub c: usize,
    pub utilized: usize,
    pub q: Vec<f64>,
    /// Present when the data carries labels.
    pub anmi: Option<f64>,
    pub accuracy: Option<f64>,
    pub assignment_file: String,
}

/// Clusters the dataset at every configured `C` and writes
/// `assignment_C{C}.json` (plus `temi_C{C}.cctm` for TEMI) and a report.
pub fn cmd_cluster(cfg: &ExperimentConfig, format: ReportFormat) -> Result<Vec<ClusterReport>> {
    let fs = load_dataset(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let method = cfg.clustering.method;
    let counts = match method {
        ClusterMethod::Labels => vec![fs.num_classes().ok_or_else(|| Error::param("dataset has no labels"))?],
        _ => cfg.clustering.cluster_counts(),
    };
    let mut reports = Vec::new();
    for c in counts {
        let clustering = cluster_features(&fs, cfg, method, c)?;
        let a = &clustering.assignment;
        let name = format!("assignment_C{}.json", a.c);
        write_text(&cfg.out_dir.join(&name), &a.to_json())?;
        if let Some(model) = &clustering.temi {
            model.save(&cfg.out_dir.join(format!("temi_C{}.cctm", a.c)))?;
        }
        let (anmi_v, accuracy) = match fs.labels() {
            Some(labels) => (Some(anmi(a, labels)?), Some(cluster_accuracy(a, labels)?.accuracy)),
            None => (None, None),
        };
        log::info!("clustered C={}: {} utilized", a.c, a.utilized);
        reports.push(ClusterReport {
            method,
            c: a.c,
            utilized: a.utilized,
            q: a.q.clone(),
            anmi: anmi_v,
            accuracy,
            assignment_file: name,
        });
    }
    let text = match format {
        ReportFormat::Json => json(&reports),
        ReportFormat::Csv => {
            let mut s = String::from("method,C,utilized,anmi,accuracy,assignment_file\n");
            for r in &reports {
                let m = serde_json::to_value(r.method).unwrap();
                writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    m.as_str().unwrap(),
                    r.c,
                    r.utilized,
                    opt(r.anmi),
                    opt(r.accuracy),
                    r.assignment_file
                )
                .unwrap();
            }
            s
        }
    };
    write_text(&cfg.out_dir.join(format!("cluster_report.{}", format.extension())), &text)?;
    Ok(reports)
}

/// Upper-bound search (and the optional lower bound); writes
/// `bound_report.json`, `bound.csv` and the probe timings to `timings.csv`.
pub fn cmd_bound(cfg: &ExperimentConfig) -> Result<BoundReport> {
    let fs = load_dataset(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let normalized = l2_normalize(&fs)?;
    let bcfg = bound_config(cfg, fs.n());
    let neighbors = mine_knn(&normalized, bcfg.temi.neighbors)?;
    let mut report = find_upper_bound(&normalized, &neighbors, &bcfg)?;
    if let Some(c_big) = cfg.bound.lower_c_big {
        report.c_lower = Some(find_lower_bound(&normalized, &neighbors, c_big, &bcfg)?);
    }
    write_text(&cfg.out_dir.join("bound_report.json"), &report.to_json())?;
    write_text(&cfg.out_dir.join("bound.csv"), &report.to_csv())?;
    write_text(&cfg.out_dir.join("timings.csv"), &report.timings_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub conditions: usize,
    pub samples_seen: u64,
    /// Milestone trainer checkpoints written by this invocation.
    pub checkpoints: Vec<PathBuf>,
    pub model: PathBuf,
}

/// Trains the denoiser, writing a resumable trainer checkpoint
/// `ckpt_{samples_seen}.ccdm` at every milestone, the final trainer state
/// to `model.ccdm` and the per-step loss to `train_loss.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let fs = load_dataset(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let source = cfg.diffusion.train.condition_source;
    let assignment = match source {
        ConditionSource::Cluster => {
            let path = cfg
                .clustering
                .assignment
                .as_ref()
                .ok_or_else(|| Error::Config("cluster conditioning needs clustering.assignment".into()))?;
            Some(read_assignment(path)?)
        }
        _ => None,
    };
    let conditions = match (source, &assignment) {
        (ConditionSource::Cluster, Some(a)) => a.c,
        (ConditionSource::Labels, _) => fs.num_classes().ok_or_else(|| Error::param("dataset has no labels"))?,
        _ => 0,
    };
    let seed = derive_seed_str(cfg.seed, "diffusion");
    let mut trainer = match &cfg.diffusion.resume {
        Some(path) => {
            let t = DiffusionTrainer::load(path)?;
            if t.model.data_dim() != fs.dim() || t.model.conditions() != conditions {
                return Err(Error::param(format!(
                    "{} holds a D={} model with {} conditions, data needs D={} with {conditions}",
                    path.display(),
                    t.model.data_dim(),
                    t.model.conditions(),
                    fs.dim()
                )));
            }
            t
        }
        None => {
            let model = DiffusionModel::new(fs.dim(), conditions, cfg.diffusion.denoiser, seed)?;
            let train = TrainRunConfig {
                seed,
                ..cfg.diffusion.train.clone()
            };
            DiffusionTrainer::new(model, train, cfg.diffusion.schedule)?
        }
    };
    let ids = training_conditions(
        source,
        fs.n(),
        assignment.as_ref(),
        fs.labels(),
        trainer.model.unconditional_id(),
    )?;
    let data = fs.to_f64();

    // Loss rows already logged up to the resume point are kept, so a resumed
    // run ends with the same file as an uninterrupted one.
    let loss_path = cfg.out_dir.join("train_loss.csv");
    let mut curve: Vec<CurvePoint> = Vec::new();
    if cfg.diffusion.resume.is_some() {
        if let Ok(text) = fs::read_to_string(&loss_path) {
            curve = parse_curve(&text)?
                .into_iter()
                .filter(|p| p.samples_seen <= trainer.samples_seen())
                .collect();
        }
    }
    let mut checkpoints = Vec::new();
    let total = trainer.config.total_steps();
    let milestones = trainer.config.milestone_steps();
    let start = trainer.step_count();
    let stops: Vec<u64> = milestones.iter().copied().chain([total]).filter(|&s| s > start).collect();
    for stop in stops {
        curve.extend(trainer.run(&data, &ids, stop, |_| Ok(()))?);
        if milestones.contains(&stop) {
            let path = cfg.out_dir.join(format!("ckpt_{:010}.ccdm", trainer.samples_seen()));
            trainer.save(&path)?;
            checkpoints.push(path);
        }
        write_text(&loss_path, &curve_csv(&curve))?;
    }
    let model = cfg.out_dir.join("model.ccdm");
    trainer.save(&model)?;
    Ok(TrainSummary {
        conditions,
        samples_seen: trainer.samples_seen(),
        checkpoints,
        model,
    })
}

fn parse_curve(text: &str) -> Result<Vec<CurvePoint>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::format(i + 1, format!("bad loss row {l:?}"));
            let (s, v) = l.split_once(',').ok_or_else(bad)?;
            Ok(CurvePoint {
                samples_seen: s.trim().parse().map_err(|_| bad())?,
                loss: v.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Sidecar describing one generated sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub set: usize,
    pub n: usize,
    /// Number of conditions of the generating model (0 = unconditional).
    #[serde(rename = "C")]
    pub c: usize,
    /// Training samples seen by the checkpoint, when it records them.
    pub samples_seen: Option<u64>,
    pub noise_seed: u64,
    pub conditions: ConditionMode,
    pub checkpoint: String,
}

fn load_model(path: &Path) -> Result<(DiffusionModel, Option<u64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.get(5) == Some(&1) {
        let t = DiffusionTrainer::from_bytes(&bytes)?;
        let seen = t.samples_seen();
        Ok((t.model, Some(seen)))
    } else {
        Ok((DiffusionModel::from_checkpoint(&bytes)?, None))
    }
}

/// Generates `sampling.sets` sample files `samples_{k}.ccfs`, each with a
/// condition-id sidecar `samples_{k}_conditions.csv` and `samples_{k}.json`
/// metadata. The initial noise of set `k` depends only on the noise seed,
/// so models sampled with the same seed start from identical noise.
pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<Vec<SampleMeta>> {
    let path = cfg
        .sampling
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("sample needs sampling.checkpoint".into()))?;
    let (model, samples_seen) = load_model(path)?;
    ensure_dir(&cfg.out_dir)?;
    let c = model.conditions();
    let dist = match (c, cfg.sampling.conditions) {
        (0, _) => None,
        (_, ConditionMode::Uniform) => Some(ConditionDist::Uniform(c)),
        (_, ConditionMode::Empirical) => {
            let a = match &cfg.clustering.assignment {
                Some(p) => read_assignment(p)?,
                None => ClusterAssignment::from_labels(&load_dataset(cfg)?)?,
            };
            if a.c != c {
                return Err(Error::param(format!("assignment has C={} but the model has {c} conditions", a.c)));
            }
            Some(ConditionDist::Weights(a.q))
        }
    };
    let (n, d) = (cfg.sampling.n_samples, model.data_dim());
    let mut metas = Vec::new();
    for set in 0..cfg.sampling.sets {
        let conditions = match &dist {
            None => vec![model.unconditional_id(); n],
            Some(dist) => sample_conditions(dist, n, &mut rng::seeded(condition_seed(cfg, set)))?,
        };
        let x0 = set_noise(cfg, set, n, d);
        let stem = format!("samples_{set}");
        if cfg.sampling.dump_noise {
            write_matrix(&cfg.out_dir.join(format!("noise_{set}.ccfs")), &x0, n, d)?;
        }
        let x = generate(&model, x0, &conditions, &cfg.diffusion.schedule, cfg.sampling.solver)?;
        write_matrix(&cfg.out_dir.join(format!("{stem}.ccfs")), &x, n, d)?;
        let mut sidecar = String::from("condition\n");
        conditions.iter().for_each(|k| writeln!(sidecar, "{k}").unwrap());
        write_text(&cfg.out_dir.join(format!("{stem}_conditions.csv")), &sidecar)?;
        let meta = SampleMeta {
            set,
            n,
            c,
            samples_seen,
            noise_seed: noise_seed(cfg, set),
            conditions: cfg.sampling.conditions,
            checkpoint: file_name(path),
        };
        write_text(&cfg.out_dir.join(format!("{stem}.json")), &json(&meta))?;
        metas.push(meta);
    }
    Ok(metas)
}

fn write_matrix(path: &Path, x: &[f64], n: usize, d: usize) -> Result<()> {
    if n == 0 {
        return fs::write(path, FeatureSet::empty_bytes(d, false)).map_err(|e| Error::io(path, e));
    }
    let fs_ = FeatureSet::new(n, d, x.iter().map(|&v| v as f32).collect(), None)?;
    write_features(&fs_, path, FileFormat::Binary)
}

/// One evaluated sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_id: String,
    #[serde(rename = "C")]
    pub c: Option<usize>,
    pub samples_seen: Option<u64>,
    pub frechet: Option<f64>,
    pub ufid: Option<f64>,
    pub auroc: Option<f64>,
    pub anmi: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Sample ids with the lowest and highest TEMI confidence, as
/// `(id, max softmax probability)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MspExtremes {
    pub run_id: String,
    pub lowest: Vec<(usize, f64)>,
    pub highest: Vec<(usize, f64)>,
}

fn load_any(path: &Path) -> Result<FeatureSet> {
    load_features(path, FileFormat::from_path(path), false)
}

fn check_dims(a: &FeatureSet, a_name: &Path, b: &FeatureSet, b_name: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::param(format!(
            "dimension mismatch: {} has D={} but {b_name} has D={}",
            a_name.display(),
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Evaluates every file in `eval.samples` against the reference; writes
/// `eval.{json,csv}` and, with a TEMI checkpoint, `msp_extremes.json`.
pub fn cmd_eval(cfg: &ExperimentConfig, format: ReportFormat) -> Result<Vec<EvalRow>> {
    let want = |m: MetricName| cfg.eval.metrics.contains(&m);
    ensure_dir(&cfg.out_dir)?;
    let reference = reference_features(cfg)?;
    let ref_name = cfg
        .eval
        .reference
        .as_ref()
        .map_or("the held-out reference".into(), |p| p.display().to_string());
    let ref_stats = feature_stats(&reference)?;
    let needs_train = want(MetricName::Auroc) || want(MetricName::Anmi) || want(MetricName::Accuracy);
    let train = if needs_train { Some(load_dataset(cfg)?) } else { None };

    let (mut anmi_v, mut accuracy) = (None, None);
    if let (Some(path), Some(labels)) = (&cfg.clustering.assignment, train.as_ref().and_then(|t| t.labels())) {
        let a = read_assignment(path)?;
        if want(MetricName::Anmi) {
            anmi_v = Some(anmi(&a, labels)?);
        }
        if want(MetricName::Accuracy) {
            accuracy = Some(cluster_accuracy(&a, labels)?.accuracy);
        }
    }
    let uncond = match (&cfg.eval.unconditional, want(MetricName::Ufid)) {
        (Some(p), true) => {
            let u = load_any(p)?;
            check_dims(&u, p, &reference, &ref_name)?;
            Some(feature_stats(&u)?)
        }
        _ => None,
    };
    let temi = cfg.eval.temi_checkpoint.as_deref().map(TemiModel::load).transpose()?;

    let mut rows = Vec::new();
    let mut extremes = Vec::new();
    for path in &cfg.eval.samples {
        let fs = load_any(path)?;
        check_dims(&fs, path, &reference, &ref_name)?;
        let stats = feature_stats(&fs)?;
        let meta: Option<SampleMeta> = fs::read_to_string(path.with_extension("json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let run_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let auroc = match (&train, want(MetricName::Auroc)) {
            (Some(t), true) => {
                check_dims(&fs, path, t, "the training data")?;
                Some(nn_auroc(&fs, t, &reference)?)
            }
            _ => None,
        };
        rows.push(EvalRow {
            run_id: run_id.clone(),
            c: meta.as_ref().map(|m| m.c),
            samples_seen: meta.as_ref().and_then(|m| m.samples_seen),
            frechet: want(MetricName::Frechet)
                .then(|| frechet_distance(&stats, &ref_stats))
                .transpose()?,
            ufid: uncond.as_ref().map(|u| frechet_distance(&stats, u)).transpose()?,
            auroc,
            anmi: anmi_v,
            accuracy,
        });
        if let Some(model) = &temi {
            extremes.push(msp_extremes(model, &fs, run_id, cfg.eval.msp_extremes)?);
        }
    }
    if rows.is_empty() && (anmi_v.is_some() || accuracy.is_some()) {
        rows.push(EvalRow {
            run_id: "clustering".into(),
            c: None,
            samples_seen: None,
            frechet: None,
            ufid: None,
            auroc: None,
            anmi: anmi_v,
            accuracy,
        });
    }
    let text = match format {
        ReportFormat::Json => json(&rows),
        ReportFormat::Csv => {
            let mut s = String::from("run_id,C,samples_seen,frechet,ufid,auroc,anmi,accuracy\n");
            for r in &rows {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.run_id,
                    opt(r.c),
                    opt(r.samples_seen),
                    opt(r.frechet),
                    opt(r.ufid),
                    opt(r.auroc),
                    opt(r.anmi),
                    opt(r.accuracy)
                )
                .unwrap();
            }
            s
        }
    };
    write_text(&cfg.out_dir.join(format!("eval.{}", format.extension())), &text)?;
    if temi.is_some() {
        write_text(&cfg.out_dir.join("msp_extremes.json"), &json(&extremes))?;
    }
    Ok(rows)
}

fn msp_extremes(model: &TemiModel, fs: &FeatureSet, run_id: String, k: usize) -> Result<MspExtremes> {
    if model.input_dim != fs.dim() {
        return Err(Error::param(format!(
            "TEMI checkpoint expects D={} but samples have D={}",
            model.input_dim,
            fs.dim()
        )));
    }
    let msp = msp_confidence(model, &l2_normalize(fs)?)?;
    let mut order: Vec<usize> = (0..msp.len()).collect();
    order.sort_by(|&a, &b| msp[a].total_cmp(&msp[b]).then(a.cmp(&b)));
    let k = k.min(order.len());
    let pick = |ids: &[usize]| ids.iter().map(|&i| (i, msp[i])).collect();
    let mut highest: Vec<(usize, f64)> = pick(&order[order.len() - k..]);
    highest.reverse();
    Ok(MspExtremes {
        run_id,
        lowest: pick(&order[..k]),
        highest,
    })
}

/// Trend protocols over one set of per-seed caches, so later trends reuse
/// the clusterings and models of earlier ones.
pub struct Reproduction {
    cfg: ExperimentConfig,
    runs: Vec<SeedRun>,
}

impl Reproduction {
    /// Writes the effective config to `reproduce_config.toml` and draws the
    /// per-seed datasets.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        ensure_dir(&cfg.out_dir)?;
        write_text(&cfg.out_dir.join("reproduce_config.toml"), &cfg.to_toml())?;
        Ok(Self {
            cfg: cfg.clone(),
            runs: SeedRun::all(cfg)?,
        })
    }

    /// Runs `trend`, writing `{trend}.csv` and `{trend}_verdict.json`.
    pub fn run(&mut self, trend: Trend) -> Result<TrendResult> {
        let result = match trend {
            Trend::SampleEfficiency => super::sample_efficiency(&mut self.runs)?,
            Trend::BoundSweep => super::bound_sweep(&mut self.runs)?,
            Trend::OodSweep => super::ood_sweep(&mut self.runs)?,
            Trend::SamplingDistribution => super::sampling_distribution(&mut self.runs)?,
        };
        let out = &self.cfg.out_dir;
        write_text(&out.join(format!("{}.csv", trend.name())), &result.csv)?;
        write_text(&out.join(format!("{}_verdict.json", trend.name())), &json(&result.verdicts))?;
        Ok(result)
    }
}

/// Runs the named trends in order; each trend's files are written as soon
/// as it finishes.
pub fn cmd_reproduce(cfg: &ExperimentConfig, trends: &[Trend]) -> Result<Vec<TrendResult>> {
    if trends.is_empty() {
        return Err(Error::Config("reproduce needs at least one trend".into()));
    }
    let mut rep = Reproduction::new(cfg)?;
    trends.iter().map(|&t| rep.run(t)).collect()
}
