//! Condition-aware denoising diffusion for low-dimensional data.
//!
//! The denoiser uses the usual preconditioning around a raw network `F`:
//!
//! ```text
//! D(x, sigma, c) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, c_noise(sigma), e_c)
//! c_skip = sd^2 / (sigma^2 + sd^2)     c_out   = sigma sd / sqrt(sigma^2 + sd^2)
//! c_in   = 1 / sqrt(sigma^2 + sd^2)    c_noise = ln(sigma) / 4
//! ```
//!
//! `F` is an MLP; the condition embedding `e_c` is a learned row added to the
//! first hidden pre-activation. Row `C` of the table is the reserved
//! "unconditional" id. Training minimizes
//! `w(sigma) |D(y + sigma n, sigma, c) - y|^2` with
//! `w = (sigma^2 + sd^2) / (sigma sd)^2` and log-normal `sigma`. Sampling
//! integrates the probability-flow ODE `dx/dsigma = (x - D(x, sigma)) / sigma`
//! with Heun's method on a `rho`-warped grid.

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::Cursor;
use crate::error::{Error, Result};
use crate::kmeans::ClusterAssignment;
use crate::nn::{Activation, AdamW, Layer, Mlp};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Mean of `ln sigma` during training.
    pub p_mean: f64,
    /// Standard deviation of `ln sigma` during training.
    pub p_std: f64,
    /// Number of nonzero noise levels on the sampling grid.
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
            num_steps: 18,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::param(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) || !(self.p_std >= 0.0) || !self.p_mean.is_finite() {
            return Err(Error::param("rho must be positive and p_std non-negative"));
        }
        if self.num_steps < 2 {
            return Err(Error::param(format!("need at least 2 sampling steps, got {}", self.num_steps)));
        }
        Ok(())
    }

    /// `num_steps` decreasing noise levels from `sigma_max` to `sigma_min`,
    /// followed by a final 0.
    pub fn sampling_sigmas(&self) -> Vec<f64> {
        let n = self.num_steps;
        let (hi, lo) = (self.sigma_max.powf(1.0 / self.rho), self.sigma_min.powf(1.0 / self.rho));
        let mut out: Vec<f64> = (0..n)
            .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(self.rho))
            .collect();
        out.push(0.0);
        out
    }
}

/// Log-normal training noise level `exp(p_mean + p_std * n)`.
pub fn sample_training_sigma<R: Rng>(schedule: &NoiseSchedule, rng: &mut R) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    (schedule.p_mean + schedule.p_std * n).exp()
}

/// Preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: 0.25 * sigma.ln(),
        }
    }
}

/// Per-sample weight of the denoising loss.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// `(x_hat - x) / sigma^2`.
pub fn score_from_denoiser(x: &[f64], sigma: f64, x_hat: &[f64]) -> Vec<f64> {
    x.iter().zip(x_hat).map(|(a, b)| (b - a) / (sigma * sigma)).collect()
}

/// Frequencies of the sinusoidal noise-level features.
const NOISE_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const NOISE_FEATURES: usize = 1 + 2 * NOISE_FREQS.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            depth: 3,
            sigma_data: 0.5,
        }
    }
}

/// Anything that can play `D(x, sigma, c)` for the sampler.
pub trait Denoiser {
    fn data_dim(&self) -> usize;

    /// Denoises `rows x data_dim` inputs that share one noise level.
    fn denoise_batch(&self, x: &[f64], sigma: f64, conditions: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    data_dim: usize,
    conditions: usize,
    config: DenoiserConfig,
    pub net: Mlp,
    /// `(C + 1) x hidden_dim` condition embeddings; the last row is the
    /// unconditional id.
    pub table: Vec<f64>,
}

impl DiffusionModel {
    fn layers(data_dim: usize, config: &DenoiserConfig) -> Vec<Layer> {
        let mut layers = vec![Layer::new(data_dim + NOISE_FEATURES, config.hidden_dim, Activation::Silu)];
        for _ in 1..config.depth {
            layers.push(Layer::new(config.hidden_dim, config.hidden_dim, Activation::Silu));
        }
        layers.push(Layer::new(config.hidden_dim, data_dim, Activation::Identity));
        layers
    }

    fn check_shape(data_dim: usize, config: &DenoiserConfig) -> Result<()> {
        if data_dim == 0 || config.hidden_dim == 0 || config.depth == 0 {
            return Err(Error::param("denoiser dimensions must be positive"));
        }
        if !(config.sigma_data > 0.0) {
            return Err(Error::param("sigma_data must be positive"));
        }
        Ok(())
    }

    /// Network and embeddings all zero, so `F == 0`.
    pub fn zeros(data_dim: usize, conditions: usize, config: DenoiserConfig) -> Result<Self> {
        Self::check_shape(data_dim, &config)?;
        Ok(Self {
            data_dim,
            conditions,
            config,
            net: Mlp::zeros(Self::layers(data_dim, &config)),
            table: vec![0.0; (conditions + 1) * config.hidden_dim],
        })
    }

    /// Random hidden layers; the output layer and the embedding table start
    /// at zero so the untrained model is the `c_skip` shrinkage.
    pub fn new(data_dim: usize, conditions: usize, config: DenoiserConfig, seed: u64) -> Result<Self> {
        Self::check_shape(data_dim, &config)?;
        let mut r = rng::seeded(rng::derive_seed_str(seed, "denoiser-init"));
        let mut net = Mlp::init(Self::layers(data_dim, &config), &mut r);
        let last = config.hidden_dim * data_dim + data_dim;
        let total = net.num_params();
        net.params[total - last..].iter_mut().for_each(|p| *p = 0.0);
        Ok(Self {
            data_dim,
            conditions,
            config,
            net,
            table: vec![0.0; (conditions + 1) * config.hidden_dim],
        })
    }

    /// Number of real conditions `C`; valid ids are `0..=C`.
    pub fn conditions(&self) -> usize {
        self.conditions
    }

    /// The id reserved for unconditional generation.
    pub fn unconditional_id(&self) -> u32 {
        self.conditions as u32
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn sigma_data(&self) -> f64 {
        self.config.sigma_data
    }

    fn check_conditions(&self, conditions: &[u32]) -> Result<()> {
        match conditions.iter().find(|&&c| c as usize > self.conditions) {
            Some(c) => Err(Error::param(format!("condition id {c} outside [0, {}]", self.conditions))),
            None => Ok(()),
        }
    }

    /// Network input rows `[c_in x, c_noise, sin(f c_noise), cos(f c_noise)]`
    /// and the matching embedding offsets.
    fn inputs(&self, x: &[f64], sigmas: &[f64], conditions: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let d = self.data_dim;
        let h = self.config.hidden_dim;
        let width = d + NOISE_FEATURES;
        let mut input = Vec::with_capacity(sigmas.len() * width);
        let mut offset = Vec::with_capacity(sigmas.len() * h);
        for ((row, &sigma), &c) in x.chunks_exact(d).zip(sigmas).zip(conditions) {
            let p = Precond::new(sigma, self.config.sigma_data);
            input.extend(row.iter().map(|v| v * p.c_in));
            input.push(p.c_noise);
            for f in NOISE_FREQS {
                input.push((f * p.c_noise).sin());
                input.push((f * p.c_noise).cos());
            }
            offset.extend_from_slice(&self.table[c as usize * h..(c as usize + 1) * h]);
        }
        (input, offset)
    }

    /// `D(x, sigma_i, c_i)` for every row, each with its own noise level.
    pub fn denoise_rows(&self, x: &[f64], sigmas: &[f64], conditions: &[u32]) -> Result<Vec<f64>> {
        let rows = self.check_rows(x, sigmas, conditions)?;
        let (input, offset) = self.inputs(x, sigmas, conditions);
        let f = self.net.infer(&input, rows, Some(&offset));
        Ok(self.combine(x, sigmas, &f))
    }

    fn check_rows(&self, x: &[f64], sigmas: &[f64], conditions: &[u32]) -> Result<usize> {
        let rows = sigmas.len();
        if x.len() != rows * self.data_dim || conditions.len() != rows {
            return Err(Error::param("denoiser input shapes disagree"));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::param(format!("noise level must be positive and finite, got {s}")));
        }
        self.check_conditions(conditions)?;
        Ok(rows)
    }

    fn combine(&self, x: &[f64], sigmas: &[f64], f: &[f64]) -> Vec<f64> {
        let d = self.data_dim;
        let mut out = Vec::with_capacity(x.len());
        for ((xr, fr), &sigma) in x.chunks_exact(d).zip(f.chunks_exact(d)).zip(sigmas) {
            let p = Precond::new(sigma, self.config.sigma_data);
            out.extend(xr.iter().zip(fr).map(|(a, b)| p.c_skip * a + p.c_out * b));
        }
        out
    }

    /// Single-sample `D(x, sigma, c)`.
    pub fn denoise(&self, x: &[f64], sigma: f64, condition: u32) -> Result<Vec<f64>> {
        self.denoise_rows(x, &[sigma], &[condition])
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.table.len()
    }

    /// Header, then net parameters and table as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_into(&mut out);
        out
    }

    fn write_into(&self, out: &mut Vec<u8>) {
        let header = serde_json::to_vec(&ModelHeader {
            data_dim: self.data_dim,
            conditions: self.conditions,
            config: self.config,
        })
        .expect("model header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        put_f64s(out, &self.net.params);
        put_f64s(out, &self.table);
    }

    fn read_from(cur: &mut Cursor) -> Result<Self> {
        let len = cur.u32()? as usize;
        let at = cur.pos;
        let header: ModelHeader = serde_json::from_slice(cur.take(len)?)
            .map_err(|e| Error::format(at, format!("bad model header: {e}")))?;
        let mut model = Self::zeros(header.data_dim, header.conditions, header.config)
            .map_err(|e| Error::format(at, e.to_string()))?;
        model.net.params = cur.f64s(model.net.num_params())?;
        model.table = cur.f64s(model.table.len())?;
        Ok(model)
    }
}

impl Denoiser for DiffusionModel {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn denoise_batch(&self, x: &[f64], sigma: f64, conditions: &[u32]) -> Result<Vec<f64>> {
        self.denoise_rows(x, &vec![sigma; conditions.len()], conditions)
    }
}

/// Exact denoiser for isotropic Gaussian data `N(mean, std^2 I)`:
/// `mean + (x - mean) std^2 / (std^2 + sigma^2)`. Conditions are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDenoiser {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl Denoiser for GaussianDenoiser {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn denoise_batch(&self, x: &[f64], sigma: f64, _conditions: &[u32]) -> Result<Vec<f64>> {
        let k = self.std * self.std / (self.std * self.std + sigma * sigma);
        Ok(x.chunks_exact(self.mean.len())
            .flat_map(|r| r.iter().zip(&self.mean).map(move |(v, m)| m + (v - m) * k))
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    data_dim: usize,
    conditions: usize,
    config: DenoiserConfig,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Gradient of the denoising loss, split like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionGrad {
    pub net: Vec<f64>,
    pub table: Vec<f64>,
}

/// Batch-mean weighted denoising loss at fixed noise: sample `i` is noised
/// as `y_i + sigma_i * unit_noise_i`. Returns the loss and, if requested,
/// its gradient.
pub fn diffusion_loss_at(
    model: &DiffusionModel,
    y: &[f64],
    conditions: &[u32],
    sigmas: &[f64],
    unit_noise: &[f64],
    want_grad: bool,
) -> Result<(f64, Option<DiffusionGrad>)> {
    let d = model.data_dim;
    let rows = sigmas.len();
    if rows == 0 {
        return Err(Error::param("empty training batch"));
    }
    if unit_noise.len() != y.len() {
        return Err(Error::param("noise shape does not match the batch"));
    }
    let noisy: Vec<f64> = y
        .chunks_exact(d)
        .zip(unit_noise.chunks_exact(d))
        .zip(sigmas)
        .flat_map(|((yr, nr), &s)| yr.iter().zip(nr).map(move |(a, b)| a + s * b))
        .collect();
    model.check_rows(&noisy, sigmas, conditions)?;
    let (input, offset) = model.inputs(&noisy, sigmas, conditions);
    let trace = model.net.forward(&input, rows, Some(&offset));
    let out = model.combine(&noisy, sigmas, &trace.output);
    let sd = model.config.sigma_data;
    let mut loss = 0.0;
    let mut grad_f = vec![0.0; rows * d];
    for i in 0..rows {
        let w = loss_weight(sigmas[i], sd);
        let c_out = Precond::new(sigmas[i], sd).c_out;
        for k in 0..d {
            let r = out[i * d + k] - y[i * d + k];
            loss += w * r * r;
            grad_f[i * d + k] = 2.0 * w * c_out * r / rows as f64;
        }
    }
    loss /= rows as f64;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut g_net = vec![0.0; model.net.num_params()];
    let g_first = model.net.backward(&trace, &grad_f, &mut g_net);
    let h = model.config.hidden_dim;
    let mut g_table = vec![0.0; model.table.len()];
    for (row, &c) in g_first.chunks_exact(h).zip(conditions) {
        g_table[c as usize * h..(c as usize + 1) * h]
            .iter_mut()
            .zip(row)
            .for_each(|(a, b)| *a += b);
    }
    Ok((
        loss,
        Some(DiffusionGrad {
            net: g_net,
            table: g_table,
        }),
    ))
}

/// Denoising loss with freshly drawn noise levels and noise.
pub fn diffusion_loss<R: Rng>(
    model: &DiffusionModel,
    y: &[f64],
    conditions: &[u32],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, DiffusionGrad)> {
    let rows = conditions.len();
    let sigmas: Vec<f64> = (0..rows).map(|_| sample_training_sigma(schedule, rng)).collect();
    let noise: Vec<f64> = (0..y.len()).map(|_| rng.sample(StandardNormal)).collect();
    let (loss, grad) = diffusion_loss_at(model, y, conditions, &sigmas, &noise, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Where per-sample training conditions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionSource {
    Cluster,
    Labels,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    /// Total training samples seen.
    pub m_img: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub condition_source: ConditionSource,
    /// Number of evenly spaced checkpoints over the run.
    pub milestones: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            m_img: 200_000,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            condition_source: ConditionSource::Cluster,
            milestones: 10,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.m_img < self.batch_size as u64 {
            return Err(Error::param(format!(
                "need 0 < batch_size <= m_img, got {} and {}",
                self.batch_size, self.m_img
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning rate must be positive"));
        }
        Ok(())
    }

    /// Optimizer steps in the run: `floor(m_img / batch_size)`.
    pub fn total_steps(&self) -> u64 {
        self.m_img / self.batch_size as u64
    }

    /// Steps after which checkpoint `k` of `milestones` is taken: the first
    /// step at which `k/milestones` of `m_img` samples have been seen.
    pub fn milestone_steps(&self) -> Vec<u64> {
        let b = self.batch_size as u64;
        let mut out: Vec<u64> = (1..=self.milestones as u64)
            .map(|k| {
                let target = k * self.m_img / self.milestones as u64;
                target.div_ceil(b).min(self.total_steps())
            })
            .filter(|&s| s > 0)
            .collect();
        out.dedup();
        out
    }
}

/// Per-sample condition ids for a training run.
pub fn training_conditions(
    source: ConditionSource,
    n: usize,
    assignment: Option<&ClusterAssignment>,
    labels: Option<&[u32]>,
    unconditional_id: u32,
) -> Result<Vec<u32>> {
    let ids = match source {
        ConditionSource::None => return Ok(vec![unconditional_id; n]),
        ConditionSource::Cluster => {
            &assignment
                .ok_or_else(|| Error::param("cluster conditioning needs an assignment"))?
                .assignments
        }
        ConditionSource::Labels => labels.ok_or_else(|| Error::param("label conditioning needs labels"))?,
    };
    if ids.len() != n {
        return Err(Error::param(format!("{} condition ids for {n} samples", ids.len())));
    }
    if let Some(c) = ids.iter().find(|&&c| c >= unconditional_id) {
        return Err(Error::param(format!("condition id {c} exceeds the model's {unconditional_id} conditions")));
    }
    Ok(ids.to_vec())
}

/// Loss after a training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub samples_seen: u64,
    pub loss: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("samples_seen,loss\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.samples_seen, p.loss));
    }
    out
}

/// Resumable training state: model, optimizer moments and step count. The
/// minibatch, noise levels and noise of step `t` depend only on
/// `(cfg.seed, t)`, so a restored trainer continues bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainer {
    pub model: DiffusionModel,
    pub config: TrainRunConfig,
    pub schedule: NoiseSchedule,
    opt_net: AdamW,
    opt_table: AdamW,
    step: u64,
}

impl DiffusionTrainer {
    pub fn new(model: DiffusionModel, config: TrainRunConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let opt_net = AdamW::new(model.net.num_params(), config.learning_rate, 0.0);
        let opt_table = AdamW::new(model.table.len(), config.learning_rate, 0.0);
        Ok(Self {
            model,
            config,
            schedule,
            opt_net,
            opt_table,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn samples_seen(&self) -> u64 {
        self.step * self.config.batch_size as u64
    }

    /// One optimizer step on a minibatch drawn with replacement from `data`
    /// (`n x D`) with per-row `conditions`. Returns the batch loss.
    pub fn step(&mut self, data: &[f64], conditions: &[u32]) -> Result<f64> {
        let d = self.model.data_dim;
        let n = conditions.len();
        if n == 0 || data.len() != n * d {
            return Err(Error::param("training data and conditions disagree"));
        }
        let mut r = rng::seeded(rng::derive_seed(
            rng::derive_seed_str(self.config.seed, "diffusion-batches"),
            self.step,
        ));
        let b = self.config.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
        let y: Vec<f64> = idx.iter().flat_map(|&i| data[i * d..(i + 1) * d].iter().copied()).collect();
        let conds: Vec<u32> = idx.iter().map(|&i| conditions[i]).collect();
        let sigmas: Vec<f64> = (0..b).map(|_| sample_training_sigma(&self.schedule, &mut r)).collect();
        let noise: Vec<f64> = (0..b * d).map(|_| r.sample(StandardNormal)).collect();
        let (loss, grad) = diffusion_loss_at(&self.model, &y, &conds, &sigmas, &noise, true)?;
        let grad = grad.expect("gradient requested");
        let finite = grad.net.iter().chain(&grad.table).all(|g| g.is_finite());
        if !loss.is_finite() || loss > 1e6 || !finite {
            let lo = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sigmas.iter().copied().fold(0.0, f64::max);
            return Err(Error::numerical(format!(
                "diffusion training diverged at step {} (loss {loss:e}, sigma in [{lo:.4}, {hi:.4}])",
                self.step
            )));
        }
        self.opt_net.step(&mut self.model.net.params, &grad.net);
        self.opt_table.step(&mut self.model.table, &grad.table);
        self.step += 1;
        Ok(loss)
    }

    /// Steps until `until_step` (capped at the run length), calling
    /// `on_milestone` after every milestone step.
    pub fn run(
        &mut self,
        data: &[f64],
        conditions: &[u32],
        until_step: u64,
        mut on_milestone: impl FnMut(&Self) -> Result<()>,
    ) -> Result<Vec<CurvePoint>> {
        let milestones = self.config.milestone_steps();
        let end = until_step.min(self.config.total_steps());
        let mut curve = Vec::new();
        while self.step < end {
            let loss = self.step(data, conditions)?;
            curve.push(CurvePoint {
                samples_seen: self.samples_seen(),
                loss,
            });
            if milestones.contains(&self.step) {
                on_milestone(self)?;
            }
        }
        Ok(curve)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(1);
        self.model.write_into(&mut out);
        let cfg = serde_json::to_vec(&(&self.config, &self.schedule)).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        for opt in [&self.opt_net, &self.opt_table] {
            out.extend_from_slice(&opt.t.to_le_bytes());
            put_f64s(&mut out, &opt.m);
            put_f64s(&mut out, &opt.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if read_preamble(&mut cur)? != 1 {
            return Err(Error::format(5, "checkpoint has no trainer state"));
        }
        let model = DiffusionModel::read_from(&mut cur)?;
        let len = cur.u32()? as usize;
        let at = cur.pos;
        let (config, schedule): (TrainRunConfig, NoiseSchedule) = serde_json::from_slice(cur.take(len)?)
            .map_err(|e| Error::format(at, format!("bad training config: {e}")))?;
        let mut trainer = Self::new(model, config, schedule).map_err(|e| Error::format(at, e.to_string()))?;
        trainer.step = cur.u64()?;
        for opt in [&mut trainer.opt_net, &mut trainer.opt_table] {
            opt.t = cur.u64()?;
            let n = opt.m.len();
            opt.m = cur.f64s(n)?;
            opt.v = cur.f64s(n)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(cur.pos, "trailing bytes after checkpoint"));
        }
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCDM";
const CHECKPOINT_VERSION: u8 = 1;

/// Reads magic and version; returns the "has trainer state" flag.
fn read_preamble(cur: &mut Cursor) -> Result<u8> {
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a diffusion checkpoint (bad magic)"));
    }
    let version = cur.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    Ok(cur.take(1)?[0])
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

impl DiffusionModel {
    /// Model-only checkpoint (no optimizer state).
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(0);
        self.write_into(&mut out);
        out
    }

    /// Loads the model from either kind of checkpoint.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let has_trainer = read_preamble(&mut cur)?;
        if has_trainer == 1 {
            return Ok(DiffusionTrainer::from_bytes(bytes)?.model);
        }
        let model = Self::read_from(&mut cur)?;
        if cur.pos != bytes.len() {
            return Err(Error::format(cur.pos, "trailing bytes after checkpoint"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Trains `model` on `data` (`n x D`) for the whole run.
pub fn train_diffusion(
    model: DiffusionModel,
    data: &[f64],
    conditions: &[u32],
    config: &TrainRunConfig,
    schedule: &NoiseSchedule,
    on_milestone: impl FnMut(&DiffusionTrainer) -> Result<()>,
) -> Result<(DiffusionModel, Vec<CurvePoint>)> {
    let mut trainer = DiffusionTrainer::new(model, config.clone(), *schedule)?;
    let curve = trainer.run(data, conditions, config.total_steps(), on_milestone)?;
    Ok((trainer.model, curve))
}

/// Distribution to draw generation conditions from.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionDist {
    /// Explicit probabilities, e.g. the empirical cluster distribution.
    Weights(Vec<f64>),
    /// Uniform over `C` ids.
    Uniform(usize),
}

/// `n` i.i.d. condition ids.
pub fn sample_conditions<R: Rng>(dist: &ConditionDist, n: usize, rng: &mut R) -> Result<Vec<u32>> {
    match dist {
        ConditionDist::Uniform(0) => Err(Error::param("uniform conditions need C >= 1")),
        ConditionDist::Uniform(c) => Ok((0..n).map(|_| rng.random_range(0..*c as u32)).collect()),
        ConditionDist::Weights(q) => {
            let sum: f64 = q.iter().sum();
            if q.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::param(format!("condition distribution must be non-negative and sum to 1 (sum {sum})")));
            }
            let w = WeightedIndex::new(q).map_err(|e| Error::param(e.to_string()))?;
            Ok((0..n).map(|_| w.sample(rng) as u32).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Heun,
    Euler,
}

/// `n x D` draws from `N(0, sigma_max^2 I)`.
pub fn initial_noise<R: Rng>(n: usize, d: usize, schedule: &NoiseSchedule, rng: &mut R) -> Vec<f64> {
    (0..n * d)
        .map(|_| schedule.sigma_max * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Integrates the probability-flow ODE from `x` at `sigma_max` down to 0.
/// Every step but the last (into `sigma = 0`) gets the Heun correction when
/// `solver` is Heun.
pub fn solve_ode(
    den: &impl Denoiser,
    mut x: Vec<f64>,
    conditions: &[u32],
    schedule: &NoiseSchedule,
    solver: Solver,
) -> Result<Vec<f64>> {
    schedule.validate()?;
    if x.len() != conditions.len() * den.data_dim() {
        return Err(Error::param("initial state and conditions disagree"));
    }
    if conditions.is_empty() {
        return Ok(x);
    }
    let sigmas = schedule.sampling_sigmas();
    for w in sigmas.windows(2) {
        let (s, next) = (w[0], w[1]);
        let drift: Vec<f64> = den
            .denoise_batch(&x, s, conditions)?
            .iter()
            .zip(&x)
            .map(|(dx, xv)| (xv - dx) / s)
            .collect();
        let euler: Vec<f64> = x.iter().zip(&drift).map(|(xv, d)| xv + (next - s) * d).collect();
        x = if solver == Solver::Heun && next > 0.0 {
            let den2 = den.denoise_batch(&euler, next, conditions)?;
            x.iter()
                .zip(&drift)
                .zip(euler.iter().zip(&den2))
                .map(|((xv, d1), (ev, dv))| xv + (next - s) * 0.5 * (d1 + (ev - dv) / next))
                .collect()
        } else {
            euler
        };
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("sampler produced non-finite values"));
    }
    Ok(x)
}

/// Draws `conditions.len()` samples with Heun's method.
pub fn heun_sample<R: Rng>(
    den: &impl Denoiser,
    conditions: &[u32],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    schedule.validate()?;
    let x = initial_noise(conditions.len(), den.data_dim(), schedule, rng);
    solve_ode(den, x, conditions, schedule, Solver::Heun)
}
