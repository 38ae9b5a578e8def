//! Desk-scale protocols behind `reproduce`. Each trend runs over several
//! seeds, emits plot-ready CSV and a pass/fail verdict per checked claim.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    bound_config, cluster_features, per_seed, condition_seed, generate, held_out_draw, set_noise, ClusterMethod, DataSource,
    ExperimentConfig,
};
use crate::bounds::{search_upper_bound, temi_probe, BoundReport};
use crate::dataset::{l2_normalize, mine_knn, FeatureSet, SyntheticSpec};
use crate::diffusion::{
    sample_conditions, training_conditions, ConditionDist, ConditionSource, DiffusionModel,
    DiffusionTrainer, TrainRunConfig,
};
use crate::error::{Error, Result};
use crate::kmeans::ClusterAssignment;
use crate::metrics::{chi_square_test, frechet_distance, gaussian_stats, nn_auroc, GaussianStats};
use crate::rng::{self, derive_seed, derive_seed_str};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    SampleEfficiency,
    BoundSweep,
    OodSweep,
    SamplingDistribution,
}

impl Trend {
    pub const ALL: [Trend; 4] = [
        Trend::SampleEfficiency,
        Trend::BoundSweep,
        Trend::OodSweep,
        Trend::SamplingDistribution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Trend::SampleEfficiency => "sample_efficiency",
            Trend::BoundSweep => "bound_sweep",
            Trend::OodSweep => "ood_sweep",
            Trend::SamplingDistribution => "sampling_distribution",
        }
    }
}

impl FromStr for Trend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Trend::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Trend::ALL.iter().map(|t| t.name()).collect();
                Error::Config(format!("unknown trend {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub trend: Trend,
    pub csv: String,
    pub verdicts: Vec<Verdict>,
}

impl TrendResult {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

/// How many of `seeds` runs must agree for a "k of 5" style claim.
fn required(seeds: usize, of_five: usize) -> usize {
    (of_five * seeds).div_ceil(5)
}

/// Which conditioning a diffusion run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum CondKey {
    Unconditional,
    Labels,
    Temi(usize),
}

impl CondKey {
    fn mode(self) -> String {
        match self {
            CondKey::Unconditional => "unconditional".into(),
            CondKey::Labels => "labels".into(),
            CondKey::Temi(c) => format!("temi_C{c}"),
        }
    }
}

struct TrainedRun {
    model: DiffusionModel,
    /// Snapshots at every milestone before the last, by samples seen.
    milestones: Vec<(u64, DiffusionModel)>,
    /// Distribution conditions are sampled from (empty when unconditional).
    q: Vec<f64>,
}

/// One seed's data and every expensive intermediate, cached so that trends
/// sharing a seed reuse clusterings and trained models.
pub struct SeedRun {
    pub index: usize,
    /// Copy of the experiment config with this run's seed.
    pub cfg: ExperimentConfig,
    pub spec: SyntheticSpec,
    pub data: FeatureSet,
    pub reference: FeatureSet,
    reference_stats: GaussianStats,
    normalized: Option<FeatureSet>,
    clusters: BTreeMap<usize, ClusterAssignment>,
    runs: BTreeMap<CondKey, TrainedRun>,
    noise: BTreeMap<usize, Vec<f64>>,
    bound: Option<BoundReport>,
}

impl SeedRun {
    /// Seed `index` of the protocol: the synthetic data and every stream are
    /// re-derived from `derive(cfg.seed, index)`.
    pub fn new(cfg: &ExperimentConfig, index: usize) -> Result<Self> {
        let DataSource::Synthetic(base) = &cfg.data else {
            return Err(Error::Config("reproduce needs a synthetic data source".into()));
        };
        let seed = derive_seed(cfg.seed, index as u64);
        let spec = SyntheticSpec {
            seed: derive_seed_str(seed, "data"),
            ..base.clone()
        };
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        run_cfg.data = DataSource::Synthetic(spec.clone());
        Self::with_spec(run_cfg, spec, index)
    }

    fn with_spec(cfg: ExperimentConfig, spec: SyntheticSpec, index: usize) -> Result<Self> {
        let data = crate::dataset::make_synthetic(&spec)?;
        let reference = held_out_draw(&spec, cfg.eval.reference_samples)?;
        let reference_stats = gaussian_stats(&reference.to_f64(), reference.n(), reference.dim())?;
        Ok(Self {
            index,
            cfg,
            spec,
            data,
            reference,
            reference_stats,
            normalized: None,
            clusters: BTreeMap::new(),
            runs: BTreeMap::new(),
            noise: BTreeMap::new(),
            bound: None,
        })
    }

    /// One run per seed index `0..cfg.reproduce.seeds`.
    pub fn all(cfg: &ExperimentConfig) -> Result<Vec<Self>> {
        (0..cfg.reproduce.seeds).map(|i| Self::new(cfg, i)).collect()
    }

    fn normalized(&mut self) -> Result<&FeatureSet> {
        if self.normalized.is_none() {
            self.normalized = Some(l2_normalize(&self.data)?);
        }
        Ok(self.normalized.as_ref().unwrap())
    }

    /// TEMI clustering at `c` clusters (cached).
    pub fn temi_assignment(&mut self, c: usize) -> Result<&ClusterAssignment> {
        if !self.clusters.contains_key(&c) {
            let a = cluster_features(&self.data, &self.cfg, ClusterMethod::Temi, c)?.assignment;
            self.clusters.insert(c, a);
        }
        Ok(&self.clusters[&c])
    }

    /// Upper-bound search (cached). When probes train exactly like the
    /// clustering runs, their assignments populate the clustering cache.
    pub fn bound(&mut self) -> Result<&BoundReport> {
        if self.bound.is_none() {
            let bcfg = bound_config(&self.cfg, self.data.n());
            let shared = self.cfg.bound.probe_epochs == self.cfg.temi.epochs;
            let normalized = self.normalized()?.clone();
            let neighbors = mine_knn(&normalized, bcfg.temi.neighbors)?;
            let mut found = Vec::new();
            let clusters = &self.clusters;
            let report = search_upper_bound(&bcfg, |c| {
                if shared {
                    if let Some(a) = clusters.get(&c) {
                        return Ok(a.clone());
                    }
                }
                let a = temi_probe(&normalized, &neighbors, &bcfg.probe_config(c))?;
                found.push(a.clone());
                Ok(a)
            })?;
            if shared {
                for a in found {
                    self.clusters.entry(a.c).or_insert(a);
                }
            }
            self.bound = Some(report);
        }
        Ok(self.bound.as_ref().unwrap())
    }

    fn train(&mut self, key: CondKey) -> Result<&TrainedRun> {
        if !self.runs.contains_key(&key) {
            let (conditions, source, assignment, q) = match key {
                CondKey::Unconditional => (0, ConditionSource::None, None, Vec::new()),
                CondKey::Labels => {
                    let a = ClusterAssignment::from_labels(&self.data)?;
                    (a.c, ConditionSource::Labels, None, a.q)
                }
                CondKey::Temi(c) => {
                    let a = self.temi_assignment(c)?.clone();
                    (c, ConditionSource::Cluster, Some(a.clone()), a.q)
                }
            };
            let run = train_run(&self.cfg, &self.data, conditions, source, assignment.as_ref(), q)?;
            self.runs.insert(key, run);
        }
        Ok(&self.runs[&key])
    }

    fn noise(&mut self, set: usize) -> &[f64] {
        let (n, d) = (self.cfg.sampling.n_samples, self.data.dim());
        let cfg = &self.cfg;
        self.noise.entry(set).or_insert_with(|| set_noise(cfg, set, n, d))
    }

    /// Samples set `set` from `model`, drawing conditions from `dist`.
    fn sample(&mut self, model: &DiffusionModel, dist: Option<&ConditionDist>, set: usize) -> Result<(Vec<f64>, Vec<u32>)> {
        let n = self.cfg.sampling.n_samples;
        let conditions = match dist {
            None => vec![model.unconditional_id(); n],
            Some(d) => sample_conditions(d, n, &mut rng::seeded(condition_seed(&self.cfg, set)))?,
        };
        let x0 = self.noise(set).to_vec();
        let x = generate(model, x0, &conditions, &self.cfg.diffusion.schedule, self.cfg.sampling.solver)?;
        Ok((x, conditions))
    }

    fn frechet_to_reference(&self, x: &[f64]) -> Result<f64> {
        let d = self.data.dim();
        frechet_distance(&gaussian_stats(x, x.len() / d, d)?, &self.reference_stats)
    }

    /// Mean Fréchet distance to the reference over `sets` sample sets.
    fn model_frechet(&mut self, key: CondKey, milestone: Option<usize>, sets: usize) -> Result<f64> {
        let run = self.train(key)?;
        let model = match milestone {
            Some(i) => run.milestones[i].1.clone(),
            None => run.model.clone(),
        };
        let dist = (!run.q.is_empty()).then(|| ConditionDist::Weights(run.q.clone()));
        let mut total = 0.0;
        for set in 0..sets {
            let (x, _) = self.sample(&model, dist.as_ref(), set)?;
            total += self.frechet_to_reference(&x)?;
        }
        Ok(total / sets as f64)
    }
}

/// Trains one diffusion model on `data`, keeping milestone snapshots.
fn train_run(
    cfg: &ExperimentConfig,
    data: &FeatureSet,
    conditions: usize,
    source: ConditionSource,
    assignment: Option<&ClusterAssignment>,
    q: Vec<f64>,
) -> Result<TrainedRun> {
    let seed = derive_seed_str(cfg.seed, "diffusion");
    let model = DiffusionModel::new(data.dim(), conditions, cfg.diffusion.denoiser, seed)?;
    let ids = training_conditions(source, data.n(), assignment, data.labels(), model.unconditional_id())?;
    let train = TrainRunConfig {
        seed,
        condition_source: source,
        ..cfg.diffusion.train.clone()
    };
    let total = train.total_steps();
    let mut trainer = DiffusionTrainer::new(model, train, cfg.diffusion.schedule)?;
    let mut milestones = Vec::new();
    trainer.run(&data.to_f64(), &ids, total, |t| {
        if t.step_count() < total {
            milestones.push((t.samples_seen(), t.model.clone()));
        }
        Ok(())
    })?;
    Ok(TrainedRun {
        model: trainer.model,
        milestones,
        q,
    })
}

fn conditional_key(cfg: &ExperimentConfig) -> Result<CondKey> {
    match cfg.clustering.method {
        ClusterMethod::Temi => Ok(CondKey::Temi(cfg.clustering.c)),
        ClusterMethod::Labels => Ok(CondKey::Labels),
        m => Err(Error::Config(format!("trend protocols condition on temi or labels, not {m:?}"))),
    }
}

/// `C` with the lowest Fréchet distance (ties to the smaller `C`).
pub fn mark_c_v(points: &[(usize, f64)]) -> Option<usize> {
    points
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(c, _)| c)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

/// Conditional vs unconditional training: Fréchet distance along the
/// milestone checkpoints and at the end of training.
pub fn sample_efficiency(runs: &mut [SeedRun]) -> Result<TrendResult> {
    struct Seed {
        rows: String,
        cond: f64,
        uncond: f64,
        reached: Option<u64>,
        m_img: u64,
    }
    let seeds = per_seed(runs, |run| {
        let key = conditional_key(&run.cfg)?;
        let (sets, curve_sets) = (run.cfg.sampling.sets, run.cfg.reproduce.milestone_sets);
        let train = &run.cfg.diffusion.train;
        let (m_img, total) = (train.m_img, train.total_steps() * train.batch_size as u64);
        let mut rows = String::new();
        let mut finals = Vec::new();
        let mut cond_curve = Vec::new();
        for k in [key, CondKey::Unconditional] {
            let seen: Vec<u64> = run.train(k)?.milestones.iter().map(|m| m.0).collect();
            let mut curve = Vec::new();
            for (i, &s) in seen.iter().enumerate() {
                curve.push((s, run.model_frechet(k, Some(i), curve_sets)?));
            }
            let fd = run.model_frechet(k, None, sets)?;
            curve.push((total, fd));
            for (s, fd) in &curve {
                writeln!(rows, "{},{s},{fd:.6e},{}", run.index, k.mode()).unwrap();
            }
            if k == key {
                cond_curve = curve;
            }
            finals.push(fd);
        }
        let uncond = finals[1];
        Ok(Seed {
            rows,
            cond: finals[0],
            uncond,
            reached: cond_curve.iter().find(|(_, fd)| *fd <= uncond).map(|(s, _)| *s),
            m_img,
        })
    })?;
    let mut csv = String::from("seed,samples_seen,frechet,condition_mode\n");
    let mut details = Vec::new();
    for (i, s) in seeds.iter().enumerate() {
        csv.push_str(&s.rows);
        details.push(format!(
            "seed {i}: cond {:.3e} vs uncond {:.3e}, reaches uncond at {}",
            s.cond,
            s.uncond,
            s.reached.map_or("never".into(), |r| r.to_string())
        ));
    }
    let n = seeds.len();
    let wins = seeds.iter().filter(|s| s.cond < s.uncond).count();
    let early = seeds.iter().filter(|s| s.reached.is_some_and(|r| 2 * r <= s.m_img)).count();
    Ok(TrendResult {
        trend: Trend::SampleEfficiency,
        csv,
        verdicts: vec![
            Verdict {
                claim: "conditioning lowers the final Fréchet distance".into(),
                passed: wins >= required(n, 4),
                detail: format!("{wins}/{n} seeds; {}", details.join("; ")),
            },
            Verdict {
                claim: "conditional run reaches the unconditional final Fréchet distance by half the samples".into(),
                passed: early >= required(n, 3),
                detail: format!("{early}/{n} seeds"),
            },
        ],
    })
}

/// Upper-bound search per seed, with the Fréchet distance of a conditional
/// model at every doubling probe.
pub fn bound_sweep(runs: &mut [SeedRun]) -> Result<TrendResult> {
    struct Seed {
        rows: String,
        good: bool,
        count_ok: bool,
        detail: String,
    }
    let seeds = per_seed(runs, |run| {
        let report = run.bound()?.clone();
        let k = run.spec.modes;
        let curve_sets = run.cfg.reproduce.milestone_sets;
        let mut fds = Vec::new();
        for p in report.probes.iter().filter(|p| p.doubling) {
            fds.push((p.c, run.model_frechet(CondKey::Temi(p.c), None, curve_sets)?));
        }
        let c_v = mark_c_v(&fds);
        let mut rows = String::new();
        for p in &report.probes {
            let fd = fds.iter().find(|f| f.0 == p.c).map(|f| f.1);
            writeln!(
                rows,
                "{},{},{},{},{},{},{}",
                run.index,
                p.c,
                p.r_c,
                p.passed,
                p.doubling,
                opt(fd),
                c_v == Some(p.c)
            )
            .unwrap();
        }
        let r_k = match report.probe(k) {
            Some(p) => p.r_c,
            None => {
                let a = run.temi_assignment(k)?;
                a.utilized as f64 / a.c as f64
            }
        };
        let last = report.probes.iter().filter(|p| p.doubling).map(|p| p.c).max().unwrap_or(2);
        let c_start = run.cfg.bound.c_start;
        let limit = ((last as f64 / c_start as f64).log2().ceil() as usize) + 1;
        Ok(Seed {
            rows,
            good: report.c_max >= k && r_k == 1.0,
            count_ok: report.doubling_probes() <= limit,
            detail: format!(
                "seed {}: C_max {} r_C(C={k}) {r_k:.3} C_V {}",
                run.index,
                report.c_max,
                c_v.map_or("-".into(), |c| c.to_string())
            ),
        })
    })?;
    let mut csv = String::from("seed,C,r_C,passed,doubling,frechet,is_C_V\n");
    seeds.iter().for_each(|s| csv.push_str(&s.rows));
    let n = seeds.len();
    let good = seeds.iter().filter(|s| s.good).count();
    let details: Vec<&str> = seeds.iter().map(|s| s.detail.as_str()).collect();
    Ok(TrendResult {
        trend: Trend::BoundSweep,
        csv,
        verdicts: vec![
            Verdict {
                claim: "C_max covers the true mode count with full utilization there".into(),
                passed: good >= required(n, 4),
                detail: format!("{good}/{n} seeds; {}", details.join("; ")),
            },
            Verdict {
                claim: "doubling probe count within ceil(log2(C_final / C_start)) + 1".into(),
                passed: seeds.iter().all(|s| s.count_ok),
                detail: String::new(),
            },
        ],
    })
}

/// Out-of-distribution sweep: uFID (conditional vs unconditional samples
/// from shared noise), 1-NN AUROC and Fréchet distance per `C`.
pub fn ood_sweep(runs: &mut [SeedRun]) -> Result<TrendResult> {
    struct Seed {
        rows: String,
        grows: bool,
        detail: String,
    }
    let seeds = per_seed(runs, |run| {
        let sweep = run.cfg.reproduce.sweep.clone();
        let sets = run.cfg.reproduce.milestone_sets;
        let d = run.data.dim();
        let uncond = run.train(CondKey::Unconditional)?.model.clone();
        let mut uncond_stats = Vec::new();
        for set in 0..sets {
            let (x, _) = run.sample(&uncond, None, set)?;
            uncond_stats.push(gaussian_stats(&x, x.len() / d, d)?);
        }
        let mut points = Vec::new();
        for &c in &sweep {
            let trained = run.train(CondKey::Temi(c))?;
            let model = trained.model.clone();
            let dist = ConditionDist::Weights(trained.q.clone());
            let (mut ufid, mut auroc, mut fd) = (0.0, 0.0, 0.0);
            for (set, us) in uncond_stats.iter().enumerate() {
                let (x, conds) = run.sample(&model, Some(&dist), set)?;
                let stats = gaussian_stats(&x, x.len() / d, d)?;
                ufid += frechet_distance(&stats, us)?;
                fd += frechet_distance(&stats, &run.reference_stats)?;
                let generated = super::samples_to_features(&x, d, &conds)?;
                auroc += nn_auroc(&generated, &run.data, &run.reference)?;
            }
            let s = sets as f64;
            points.push((c, ufid / s, auroc / s, fd / s));
        }
        let c_v = mark_c_v(&points.iter().map(|r| (r.0, r.3)).collect::<Vec<_>>());
        let mut rows = String::new();
        for (c, u, a, f) in &points {
            writeln!(rows, "{},{c},{u:.6e},{a:.6},{f:.6e},{}", run.index, c_v == Some(*c)).unwrap();
        }
        let (first, last) = (points.first().unwrap(), points.last().unwrap());
        Ok(Seed {
            rows,
            grows: last.1 > first.1,
            detail: format!(
                "seed {}: uFID C={} {:.3e}, C={} {:.3e}",
                run.index, first.0, first.1, last.0, last.1
            ),
        })
    })?;
    let mut csv = String::from("seed,C,ufid,auroc,frechet,is_C_V\n");
    seeds.iter().for_each(|s| csv.push_str(&s.rows));
    let n = seeds.len();
    let grows = seeds.iter().filter(|s| s.grows).count();
    let details: Vec<&str> = seeds.iter().map(|s| s.detail.as_str()).collect();
    Ok(TrendResult {
        trend: Trend::OodSweep,
        csv,
        verdicts: vec![Verdict {
            claim: "uFID grows from the smallest to the largest C".into(),
            passed: grows >= required(n, 4),
            detail: format!("{grows}/{n} seeds; {}", details.join("; ")),
        }],
    })
}

/// Imbalanced mixture (the second half of the modes `imbalance` times smaller),
/// k-means conditioning, sampling conditions from `q(c)` versus uniformly.
pub fn sampling_distribution(runs: &mut [SeedRun]) -> Result<TrendResult> {
    struct Seed {
        rows: String,
        fds: [f64; 2],
        min_p: f64,
    }
    let seeds = per_seed(runs, |run| {
        let ratio = run.cfg.reproduce.imbalance;
        let base = &run.spec;
        let half = base.modes.div_ceil(2);
        let spec = SyntheticSpec {
            samples_per_mode: base
                .samples_per_mode
                .iter()
                .enumerate()
                .map(|(i, &k)| if i < half { k } else { (k / ratio).max(1) })
                .collect(),
            seed: derive_seed_str(base.seed, "imbalanced"),
            ..base.clone()
        };
        let mut imb = SeedRun::with_spec(run.cfg.clone(), spec, run.index)?;
        let c = imb.spec.modes;
        let a = cluster_features(&imb.data, &imb.cfg, ClusterMethod::Kmeans, c)?.assignment;
        let trained = train_run(&imb.cfg, &imb.data, c, ConditionSource::Cluster, Some(&a), a.q.clone())?;
        let sets = imb.cfg.sampling.sets;
        let mut rows = String::new();
        let mut fds = [0.0; 2];
        let mut min_p = f64::INFINITY;
        let uniform = vec![1.0 / c as f64; c];
        for (j, (name, probs)) in [("empirical", a.q.clone()), ("uniform", uniform)].into_iter().enumerate() {
            let dist = ConditionDist::Weights(probs.clone());
            let mut counts = vec![0u64; c];
            let mut fd = 0.0;
            for set in 0..sets {
                let (x, conds) = imb.sample(&trained.model, Some(&dist), set)?;
                fd += imb.frechet_to_reference(&x)?;
                conds.iter().for_each(|&k| counts[k as usize] += 1);
            }
            fd /= sets as f64;
            let (chi2, p) = chi_square_test(&counts, &probs)?;
            min_p = min_p.min(p);
            writeln!(rows, "{},{name},{fd:.6e},{chi2:.4},{p:.6}", run.index).unwrap();
            fds[j] = fd;
        }
        Ok(Seed { rows, fds, min_p })
    })?;
    let mut csv = String::from("seed,distribution,frechet,chi2,p_value\n");
    seeds.iter().for_each(|s| csv.push_str(&s.rows));
    let n = seeds.len();
    let wins = seeds.iter().filter(|s| s.fds[0] < s.fds[1]).count();
    let min_p = seeds.iter().map(|s| s.min_p).fold(f64::INFINITY, f64::min);
    let details: Vec<String> = seeds
        .iter()
        .enumerate()
        .map(|(i, s)| format!("seed {i}: q(c) {:.3e} vs uniform {:.3e}", s.fds[0], s.fds[1]))
        .collect();
    Ok(TrendResult {
        trend: Trend::SamplingDistribution,
        csv,
        verdicts: vec![
            Verdict {
                claim: "sampling conditions from q(c) beats uniform sampling".into(),
                passed: wins >= required(n, 4),
                detail: format!("{wins}/{n} seeds; {}", details.join("; ")),
            },
            Verdict {
                claim: "sampled condition frequencies match the intended distribution (p > 0.001)".into(),
                passed: min_p > 0.001,
                detail: format!("smallest p-value {min_p:.4}"),
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_names_round_trip() {
        for t in Trend::ALL {
            assert_eq!(t.name().parse::<Trend>().unwrap(), t);
        }
        assert!(matches!("fid".parse::<Trend>(), Err(Error::Config(_))));
    }

    #[test]
    fn c_v_is_argmin() {
        assert_eq!(mark_c_v(&[(2, 0.3), (4, 0.1), (8, 0.1), (16, 0.2)]), Some(4));
        assert_eq!(mark_c_v(&[]), None);
    }

    #[test]
    fn majority_thresholds() {
        assert_eq!(required(5, 4), 4);
        assert_eq!(required(5, 3), 3);
        assert_eq!(required(1, 4), 1);
        assert_eq!(required(2, 3), 2);
    }

    #[test]
    fn seed_runs_need_synthetic_data() {
        let mut cfg = ExperimentConfig::default();
        cfg.data = DataSource::File {
            path: "missing.csv".into(),
            format: None,
            labels_col: false,
        };
        assert!(matches!(SeedRun::new(&cfg, 0), Err(Error::Config(_))));
    }
}
