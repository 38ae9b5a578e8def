//! TEMI self-distillation clustering over fixed embeddings.
//!
//! Each of the `H` heads is a student/teacher pair of MLPs mapping an
//! embedding to `C` cluster logits. Training pairs an anchor with one of its
//! mined nearest neighbours and maximizes a pointwise-mutual-information
//! objective. For head `i` and pair `(x, x')`:
//!
//! ```text
//! L_i(x, x') = -w(x, x') * log sum_c (q_s_i(c|x) * q_t_i(c|x'))^gamma / qt_i(c)
//! w(x, x')   = 1/H * sum_j sum_c q_t_j(c|x) * q_t_j(c|x')
//! ```
//!
//! where `q_s`, `q_t` are student and teacher softmax outputs and `qt_i` is
//! an EMA estimate of the teacher's marginal cluster distribution. The
//! weight `w` and all teacher terms are constants for differentiation. The
//! training objective is `(L_i(x, x') + L_i(x', x)) / 2`, averaged over pairs
//! and heads.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Cursor;
use crate::dataset::{argmax, FeatureSet, NeighborSets};
use crate::error::{Error, Result};
use crate::kmeans::{ClusterAssignment, Method};
use crate::nn::{softmax, Activation, AdamW, Layer, Mlp};
use crate::rng;

/// Floor applied to probabilities and to `qt` before division.
pub const PROB_FLOOR: f64 = 1e-12;

/// `Default` gives the full-scale settings; keys missing from a serialized
/// config take the desk-scale values of [`TemiConfig::desk_scale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default = "TemiConfig::desk_defaults")]
pub struct TemiConfig {
    #[serde(rename = "C")]
    pub c: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub gamma: f64,
    /// EMA momentum for both the teacher weights and `qt`.
    pub momentum: f64,
    pub temperature: f64,
    /// Nearest neighbours mined per sample.
    pub neighbors: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TemiConfig {
    fn default() -> Self {
        Self {
            c: 10,
            heads: 50,
            hidden_dim: 512,
            bottleneck_dim: 256,
            gamma: 0.6,
            momentum: 0.996,
            temperature: 0.1,
            neighbors: 50,
            epochs: 200,
            batch_size: 512,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TemiConfig {
    /// Settings for small synthetic datasets on a single core: two narrow
    /// heads, a shorter schedule, a larger step size and a faster EMA (the
    /// run is ~800 steps rather than tens of thousands). The neighbourhood
    /// and batch sizes shrink with `n`.
    pub fn desk_scale(c: usize, n: usize) -> Self {
        Self {
            c,
            heads: 2,
            hidden_dim: 32,
            bottleneck_dim: 32,
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            momentum: 0.95,
            ..Self::default()
        }
        .fit_to(n)
    }

    fn desk_defaults() -> Self {
        Self::desk_scale(Self::default().c, usize::MAX)
    }

    /// Clamps `neighbors` to `N/4` and `batch_size` to `N`.
    pub fn fit_to(mut self, n: usize) -> Self {
        self.neighbors = self.neighbors.min(n / 4).max(1);
        self.batch_size = self.batch_size.min(n).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.heads == 0 {
            return Err(Error::param("TEMI needs C >= 1 and at least one head"));
        }
        if self.hidden_dim == 0 || self.bottleneck_dim == 0 {
            return Err(Error::param("TEMI layer widths must be positive"));
        }
        if !(self.gamma > 0.5 && self.gamma <= 1.0) {
            return Err(Error::param(format!("gamma must lie in (0.5, 1], got {}", self.gamma)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::param(format!("momentum must lie in (0, 1), got {}", self.momentum)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature must be positive"));
        }
        if self.neighbors == 0 || self.batch_size == 0 {
            return Err(Error::param("neighbors and batch_size must be positive"));
        }
        Ok(())
    }

    fn head_layers(&self, input_dim: usize) -> Vec<Layer> {
        vec![
            Layer::new(input_dim, self.hidden_dim, Activation::Gelu),
            Layer::new(self.hidden_dim, self.hidden_dim, Activation::Gelu),
            Layer::new(self.hidden_dim, self.bottleneck_dim, Activation::Identity),
            Layer::new(self.bottleneck_dim, self.c, Activation::Identity).without_bias(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemiModel {
    pub config: TemiConfig,
    pub input_dim: usize,
    pub student: Vec<Mlp>,
    pub teacher: Vec<Mlp>,
    /// `H x C` EMA estimates of each teacher head's cluster marginal.
    pub qt_tilde: Vec<f64>,
    /// Mean symmetrized loss of each head over the last completed epoch.
    pub per_head_loss: Vec<f64>,
    pub step: u64,
}

/// Student weights from the seed; teacher is a copy; `qt` is uniform.
pub fn temi_init(config: &TemiConfig, input_dim: usize) -> Result<TemiModel> {
    config.validate()?;
    if input_dim == 0 {
        return Err(Error::param("input dimension must be positive"));
    }
    let mut r = rng::seeded(rng::derive_seed_str(config.seed, "temi-init"));
    let student: Vec<Mlp> = (0..config.heads)
        .map(|_| Mlp::init(config.head_layers(input_dim), &mut r))
        .collect();
    Ok(TemiModel {
        config: config.clone(),
        input_dim,
        teacher: student.clone(),
        student,
        qt_tilde: vec![1.0 / config.c as f64; config.heads * config.c],
        per_head_loss: vec![0.0; config.heads],
        step: 0,
    })
}

/// `softmax(logits / temperature)`, computed with max-subtraction.
pub fn head_probs(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::numerical("non-finite head logits"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax(logits, temperature, &mut out);
    Ok(out)
}

/// Probabilities for `rows` stacked logit vectors, floored at [`PROB_FLOOR`].
fn probs_rows(logits: &[f64], c: usize, temperature: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::numerical("non-finite head logits"));
    }
    let mut out = vec![0.0; logits.len()];
    for (o, l) in out.chunks_exact_mut(c).zip(logits.chunks_exact(c)) {
        softmax(l, temperature, o);
    }
    out.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
    Ok(out)
}

/// The pair-agreement weight `1/H sum_j <q_t_j(.|x), q_t_j(.|x')>` from
/// per-head teacher probabilities of both samples.
pub fn pair_weight(teacher_x: &[&[f64]], teacher_xp: &[&[f64]]) -> f64 {
    let h = teacher_x.len() as f64;
    teacher_x
        .iter()
        .zip(teacher_xp)
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| p * q).sum::<f64>())
        .sum::<f64>()
        / h
}

/// `-weight * log sum_c (s_c t_c)^gamma / qt_c` for one head. Inputs are
/// floored at [`PROB_FLOOR`] before use.
pub fn pmi_loss(student_x: &[f64], teacher_xp: &[f64], qt_tilde: &[f64], gamma: f64, weight: f64) -> f64 {
    let inner: f64 = student_x
        .iter()
        .zip(teacher_xp)
        .zip(qt_tilde)
        .map(|((&s, &t), &q)| (s.max(PROB_FLOOR) * t.max(PROB_FLOOR)).powf(gamma) / q.max(PROB_FLOOR))
        .sum();
    -weight * inner.ln()
}

/// Gradient of [`pmi_loss`] with respect to the student *logits*, given the
/// unfloored student probabilities `s = softmax(u / tau)`. Added into `out`
/// after multiplying by `scale`.
fn pmi_logit_grad(
    s: &[f64],
    teacher_xp: &[f64],
    qt_tilde: &[f64],
    gamma: f64,
    weight: f64,
    temperature: f64,
    scale: f64,
    out: &mut [f64],
) {
    let c = s.len();
    let mut a = [0.0f64; 64];
    let mut a_heap;
    let a: &mut [f64] = if c <= 64 {
        &mut a[..c]
    } else {
        a_heap = vec![0.0; c];
        &mut a_heap
    };
    let mut sum = 0.0;
    for k in 0..c {
        a[k] = (s[k].max(PROB_FLOOR) * teacher_xp[k].max(PROB_FLOOR)).powf(gamma) / qt_tilde[k].max(PROB_FLOOR);
        sum += a[k];
    }
    // dL/ds_k = -w * gamma * a_k / (s_k * S) where s_k is above the floor.
    // Then dL/du_k = s_k / tau * (g_k - sum_c s_c g_c); s_k * g_k is finite
    // even when s_k underflows.
    let mut sg_total = 0.0;
    for k in 0..c {
        let sg = if s[k] > PROB_FLOOR { -weight * gamma * a[k] / sum } else { 0.0 };
        a[k] = sg;
        sg_total += sg;
    }
    for k in 0..c {
        out[k] += scale / temperature * (a[k] - s[k] * sg_total);
    }
}

/// Anchor/neighbour index pairs forming one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub anchors: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl PairBatch {
    /// Validates lengths and, when `sets` is given, that every neighbour is
    /// in its anchor's mined set.
    pub fn new(anchors: Vec<usize>, neighbors: Vec<usize>, sets: Option<&NeighborSets>) -> Result<Self> {
        if anchors.len() != neighbors.len() {
            return Err(Error::param("anchor and neighbour lists differ in length"));
        }
        if let Some(sets) = sets {
            for (&a, &b) in anchors.iter().zip(&neighbors) {
                if !sets.of(a).contains(&(b as u32)) {
                    return Err(Error::param(format!("{b} is not a mined neighbour of {a}")));
                }
            }
        }
        Ok(Self { anchors, neighbors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// The same pairs with the roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            anchors: self.neighbors.clone(),
            neighbors: self.anchors.clone(),
        }
    }
}

/// Symmetrized loss of each head and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TemiLoss {
    pub per_head: Vec<f64>,
    pub mean: f64,
}

struct BatchEval {
    loss: TemiLoss,
    /// Per-head gradient of the mean objective w.r.t. student parameters.
    grads: Option<Vec<Vec<f64>>>,
    /// Per-head teacher probabilities, `2B x C` (anchors then neighbours).
    teacher_probs: Vec<Vec<f64>>,
}

impl TemiModel {
    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn c(&self) -> usize {
        self.config.c
    }

    pub fn qt_row(&self, head: usize) -> &[f64] {
        let c = self.c();
        &self.qt_tilde[head * c..(head + 1) * c]
    }

    fn check_input(&self, fs: &FeatureSet) -> Result<()> {
        if fs.dim() != self.input_dim {
            return Err(Error::param(format!(
                "model expects {}-dimensional features, got {}",
                self.input_dim,
                fs.dim()
            )));
        }
        Ok(())
    }

    /// Teacher probabilities of head `head` for `rows` stacked inputs.
    pub fn teacher_probs(&self, head: usize, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        probs_rows(&self.teacher[head].predict(x, rows), self.c(), self.config.temperature)
    }

    pub fn student_probs(&self, head: usize, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        probs_rows(&self.student[head].predict(x, rows), self.c(), self.config.temperature)
    }

    /// Evaluates the symmetrized objective on rows `x = [anchors; neighbours]`.
    fn evaluate(&self, x: &[f64], pairs: usize, want_grad: bool) -> Result<BatchEval> {
        if pairs == 0 {
            return Err(Error::param("empty batch"));
        }
        let (h, c) = (self.heads(), self.c());
        let rows = 2 * pairs;
        let tau = self.config.temperature;
        let gamma = self.config.gamma;
        let teacher_probs = (0..h)
            .map(|i| self.teacher_probs(i, x, rows))
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = (0..pairs)
            .map(|p| {
                let tx: Vec<&[f64]> = teacher_probs.iter().map(|t| &t[p * c..(p + 1) * c]).collect();
                let txp: Vec<&[f64]> = teacher_probs
                    .iter()
                    .map(|t| &t[(pairs + p) * c..(pairs + p + 1) * c])
                    .collect();
                pair_weight(&tx, &txp)
            })
            .collect();
        let mut per_head = Vec::with_capacity(h);
        let mut grads = want_grad.then(Vec::new);
        // d(mean objective)/d(head loss) = 1/H; head loss is a mean over
        // pairs of half the two orderings.
        let scale = 0.5 / (pairs as f64 * h as f64);
        for i in 0..h {
            let trace = self.student[i].forward(x, rows, None);
            if trace.output.iter().any(|l| !l.is_finite()) {
                return Err(Error::numerical(format!("non-finite student logits in head {i}")));
            }
            let mut s_raw = vec![0.0; rows * c];
            for (o, l) in s_raw.chunks_exact_mut(c).zip(trace.output.chunks_exact(c)) {
                softmax(l, tau, o);
            }
            let t = &teacher_probs[i];
            let qt = self.qt_row(i);
            let mut total = 0.0;
            let mut glogits = want_grad.then(|| vec![0.0; rows * c]);
            for p in 0..pairs {
                let w = weights[p];
                for (row, other) in [(p, pairs + p), (pairs + p, p)] {
                    let s = &s_raw[row * c..(row + 1) * c];
                    let tp = &t[other * c..(other + 1) * c];
                    total += 0.5 * pmi_loss(s, tp, qt, gamma, w);
                    if let Some(g) = glogits.as_mut() {
                        pmi_logit_grad(s, tp, qt, gamma, w, tau, scale, &mut g[row * c..(row + 1) * c]);
                    }
                }
            }
            per_head.push(total / pairs as f64);
            if let (Some(gs), Some(gl)) = (grads.as_mut(), glogits) {
                let mut g = vec![0.0; self.student[i].num_params()];
                self.student[i].backward(&trace, &gl, &mut g);
                gs.push(g);
            }
        }
        let mean = per_head.iter().sum::<f64>() / h as f64;
        Ok(BatchEval {
            loss: TemiLoss { per_head, mean },
            grads,
            teacher_probs,
        })
    }

    /// Gradient of the mean symmetrized objective for every head's student.
    pub fn loss_and_grad(&self, fs: &FeatureSet, batch: &PairBatch) -> Result<(TemiLoss, Vec<Vec<f64>>)> {
        let x = self.batch_rows(fs, batch)?;
        let ev = self.evaluate(&x, batch.len(), true)?;
        Ok((ev.loss, ev.grads.unwrap()))
    }

    fn batch_rows(&self, fs: &FeatureSet, batch: &PairBatch) -> Result<Vec<f64>> {
        self.check_input(fs)?;
        if batch.is_empty() {
            return Err(Error::param("empty batch"));
        }
        let mut x = Vec::with_capacity(2 * batch.len() * fs.dim());
        for &i in batch.anchors.iter().chain(&batch.neighbors) {
            if i >= fs.n() {
                return Err(Error::param(format!("sample index {i} out of range")));
            }
            x.extend(fs.row(i).iter().map(|&v| f64::from(v)));
        }
        Ok(x)
    }
}

/// Unsymmetrized loss of head `head` for the pair `(x, x')`.
pub fn temi_pair_loss(model: &TemiModel, x: &[f32], xp: &[f32], head: usize) -> Result<f64> {
    if x.len() != model.input_dim || xp.len() != model.input_dim {
        return Err(Error::param("pair dimension does not match the model"));
    }
    if head >= model.heads() {
        return Err(Error::param(format!("head {head} out of range")));
    }
    let xv: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let xpv: Vec<f64> = xp.iter().map(|&v| f64::from(v)).collect();
    let tx: Vec<Vec<f64>> = (0..model.heads())
        .map(|j| model.teacher_probs(j, &xv, 1))
        .collect::<Result<_>>()?;
    let txp: Vec<Vec<f64>> = (0..model.heads())
        .map(|j| model.teacher_probs(j, &xpv, 1))
        .collect::<Result<_>>()?;
    let w = pair_weight(
        &tx.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &txp.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    );
    let s = model.student_probs(head, &xv, 1)?;
    Ok(pmi_loss(&s, &txp[head], model.qt_row(head), model.config.gamma, w))
}

/// Per-head symmetrized loss averaged over the batch, and the grand mean.
pub fn temi_loss(model: &TemiModel, fs: &FeatureSet, batch: &PairBatch) -> Result<TemiLoss> {
    let x = model.batch_rows(fs, batch)?;
    Ok(model.evaluate(&x, batch.len(), false)?.loss)
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn teacher_ema_update(model: &mut TemiModel) {
    let m = model.config.momentum;
    for (t, s) in model.teacher.iter_mut().zip(&model.student) {
        for (tp, sp) in t.params.iter_mut().zip(&s.params) {
            *tp = m * *tp + (1.0 - m) * sp;
        }
    }
}

/// `qt_i <- m * qt_i + (1 - m) * mean of the batch teacher probabilities`.
/// `batch_probs[i]` holds head `i`'s `rows x C` probabilities.
pub fn cluster_dist_ema_update(model: &mut TemiModel, batch_probs: &[Vec<f64>]) {
    let m = model.config.momentum;
    let c = model.c();
    for (i, probs) in batch_probs.iter().enumerate() {
        let rows = probs.len() / c;
        let mut mean = vec![0.0; c];
        for row in probs.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let qt = &mut model.qt_tilde[i * c..(i + 1) * c];
        for (q, s) in qt.iter_mut().zip(mean) {
            *q = m * *q + (1.0 - m) * s / rows as f64;
        }
    }
}

/// Owns a model together with its per-head optimizer state.
#[derive(Debug, Clone)]
pub struct TemiTrainer {
    pub model: TemiModel,
    pub optimizers: Vec<AdamW>,
}

impl TemiTrainer {
    pub fn new(model: TemiModel) -> Self {
        let optimizers = model
            .student
            .iter()
            .map(|s| AdamW::new(s.num_params(), model.config.learning_rate, model.config.weight_decay))
            .collect();
        Self { model, optimizers }
    }

    /// One optimization step on `batch`: student update, then the teacher
    /// and `qt` EMAs (using the teacher outputs seen by the loss). Returns
    /// the pre-update loss.
    pub fn train_step(&mut self, fs: &FeatureSet, batch: &PairBatch) -> Result<TemiLoss> {
        let x = self.model.batch_rows(fs, batch)?;
        let ev = self.model.evaluate(&x, batch.len(), true)?;
        let grads = ev.grads.unwrap();
        for (i, g) in grads.iter().enumerate() {
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient in head {i}, parameter {k}, step {}",
                    self.model.step
                )));
            }
        }
        for ((s, opt), g) in self.model.student.iter_mut().zip(&mut self.optimizers).zip(&grads) {
            opt.step(&mut s.params, g);
        }
        teacher_ema_update(&mut self.model);
        cluster_dist_ema_update(&mut self.model, &ev.teacher_probs);
        self.model.step += 1;
        Ok(ev.loss)
    }
}

/// Samples one epoch of batches: shuffled anchors, each paired with a
/// uniformly drawn mined neighbour.
pub fn epoch_batches<R: Rng>(neighbors: &NeighborSets, batch_size: usize, rng: &mut R) -> Vec<PairBatch> {
    let mut order: Vec<usize> = (0..neighbors.n()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let nb = chunk
                .iter()
                .map(|&a| {
                    let set = neighbors.of(a);
                    set[rng.random_range(0..set.len())] as usize
                })
                .collect();
            PairBatch {
                anchors: chunk.to_vec(),
                neighbors: nb,
            }
        })
        .collect()
}

/// One row of the training loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub mean_loss: f64,
    pub per_head_min: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,mean_loss,per_head_min\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.mean_loss, p.per_head_min));
    }
    out
}

/// Trains a fresh model for `config.epochs` epochs. `per_head_loss` ends up
/// as each head's mean loss over the final epoch.
pub fn temi_fit(fs: &FeatureSet, neighbors: &NeighborSets, config: &TemiConfig) -> Result<(TemiModel, Vec<LossPoint>)> {
    if neighbors.n() != fs.n() {
        return Err(Error::param("neighbour sets do not match the feature set"));
    }
    let model = temi_init(config, fs.dim())?;
    let mut trainer = TemiTrainer::new(model);
    let mut r = rng::seeded(rng::derive_seed_str(config.seed, "temi-batches"));
    let h = config.heads;
    let mut curve = Vec::new();
    for _ in 0..config.epochs {
        let mut sums = vec![0.0; h];
        let mut weight = 0.0;
        for batch in epoch_batches(neighbors, config.batch_size, &mut r) {
            let loss = trainer.train_step(fs, &batch)?;
            let b = batch.len() as f64;
            sums.iter_mut().zip(&loss.per_head).for_each(|(s, l)| *s += b * l);
            weight += b;
            curve.push(LossPoint {
                step: trainer.model.step,
                mean_loss: loss.mean,
                per_head_min: loss.per_head.iter().copied().fold(f64::INFINITY, f64::min),
            });
        }
        trainer.model.per_head_loss = sums.into_iter().map(|s| s / weight).collect();
    }
    Ok((trainer.model, curve))
}

/// Index of the head with the lowest recorded loss (ties to the lower index).
pub fn best_head(model: &TemiModel) -> usize {
    let mut best = 0;
    for (i, &l) in model.per_head_loss.iter().enumerate() {
        if l < model.per_head_loss[best] {
            best = i;
        }
    }
    best
}

/// Teacher probabilities of the best head for every sample, `N x C`.
pub fn best_head_probs(model: &TemiModel, fs: &FeatureSet) -> Result<Vec<f64>> {
    model.check_input(fs)?;
    model.teacher_probs(best_head(model), &fs.to_f64(), fs.n())
}

/// Hard assignments `argmax_c q_t(c|x)` from the lowest-loss head.
pub fn temi_assign(model: &TemiModel, fs: &FeatureSet) -> Result<ClusterAssignment> {
    let c = model.c();
    let probs = best_head_probs(model, fs)?;
    let assignments = probs.chunks_exact(c).map(|p| argmax(p) as u32).collect();
    ClusterAssignment::new(Method::Temi, assignments, c)
}

/// Maximum softmax probability of the best head's teacher, per sample.
pub fn msp_confidence(model: &TemiModel, fs: &FeatureSet) -> Result<Vec<f64>> {
    let c = model.c();
    let probs = best_head_probs(model, fs)?;
    Ok(probs
        .chunks_exact(c)
        .map(|p| p.iter().copied().fold(0.0, f64::max))
        .collect())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCTM";
const CHECKPOINT_VERSION: u8 = 1;

impl TemiModel {
    /// `CCTM` checkpoint: magic, version, `u32` length + JSON config block,
    /// `u32` input dimension, `u64` step, then per head the student and
    /// teacher parameters, then `qt` and the per-head losses. All tensors are
    /// little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let mut put = |v: &[f64]| {
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        };
        for (s, t) in self.student.iter().zip(&self.teacher) {
            put(&s.params);
            put(&t.params);
        }
        put(&self.qt_tilde);
        put(&self.per_head_loss);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"CCTM\""));
        }
        let version = cur.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let len = cur.u32()? as usize;
        let at = cur.pos;
        let config: TemiConfig =
            serde_json::from_slice(cur.take(len)?).map_err(|e| Error::format(at, e.to_string()))?;
        let input_dim = cur.u32()? as usize;
        let step = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let mut model = temi_init(&config, input_dim).map_err(|e| Error::format(at, e.to_string()))?;
        model.step = step;
        for i in 0..config.heads {
            let n = model.student[i].num_params();
            model.student[i].params = cur.f32s(n)?;
            model.teacher[i].params = cur.f32s(n)?;
        }
        model.qt_tilde = cur.f32s(config.heads * config.c)?;
        model.per_head_loss = cur.f32s(config.heads)?;
        if cur.pos != bytes.len() {
            return Err(Error::format(cur.pos, "trailing bytes after checkpoint"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_synthetic, mine_knn, SyntheticSpec};

    fn tiny_config(c: usize, heads: usize) -> TemiConfig {
        TemiConfig {
            c,
            heads,
            hidden_dim: 8,
            bottleneck_dim: 4,
            neighbors: 3,
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 17,
            ..TemiConfig::default()
        }
    }

    fn tiny_data(n_per: usize, seed: u64) -> FeatureSet {
        make_synthetic(&SyntheticSpec::balanced(3, 4, n_per, 2.0, 0.3, seed)).unwrap()
    }

    fn zero_model(c: usize, heads: usize, d: usize) -> TemiModel {
        let mut m = temi_init(&tiny_config(c, heads), d).unwrap();
        for mlp in m.student.iter_mut().chain(m.teacher.iter_mut()) {
            mlp.params.iter_mut().for_each(|p| *p = 0.0);
        }
        m
    }

    /// Makes every output of `mlp` favour `cluster` by a wide margin.
    fn constant_head(mlp: &mut Mlp, cluster: usize, bottleneck: usize, c: usize) {
        mlp.params.iter_mut().for_each(|p| *p = 0.0);
        let last = mlp.num_params() - c * bottleneck;
        let bias = last - bottleneck;
        mlp.params[bias..last].iter_mut().for_each(|p| *p = 1.0);
        mlp.params[last + cluster * bottleneck..last + (cluster + 1) * bottleneck]
            .iter_mut()
            .for_each(|p| *p = 5.0);
    }

    #[test]
    fn init_is_uniform_and_deterministic() {
        let cfg = TemiConfig { c: 10, ..tiny_config(10, 3) };
        let a = temi_init(&cfg, 5).unwrap();
        assert!(a.qt_tilde.iter().all(|&q| q == 0.1));
        assert_eq!(a.student, a.teacher);
        assert_eq!(a, temi_init(&cfg, 5).unwrap());
        let one = temi_init(&tiny_config(4, 1), 5).unwrap();
        assert_eq!((one.student.len(), one.teacher.len()), (1, 1));
    }

    #[test]
    fn config_validation() {
        for bad in [
            TemiConfig { gamma: 0.5, ..TemiConfig::default() },
            TemiConfig { gamma: 1.1, ..TemiConfig::default() },
            TemiConfig { momentum: 1.0, ..TemiConfig::default() },
            TemiConfig { temperature: 0.0, ..TemiConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(TemiConfig::default().validate().is_ok());
    }

    #[test]
    fn head_probs_examples() {
        assert_eq!(head_probs(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = head_probs(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = head_probs(&[1000.0, 0.0], 0.1).unwrap();
        assert!(p[0] > 1.0 - 1e-12 && p.iter().all(|v| v.is_finite()));
        assert!(head_probs(&[f64::NAN, 0.0], 1.0).is_err());
    }

    #[test]
    fn pair_loss_uniform_heads_matches_scalar_formula() {
        let model = zero_model(2, 2, 3);
        let loss = temi_pair_loss(&model, &[1.0, 0.0, 2.0], &[0.5, -1.0, 0.0], 1).unwrap();
        // w = sum_c 0.5 * 0.5 = 0.5; inner = 2 * (0.25)^0.6 / 0.5.
        let expected = -0.5 * (2.0 * 0.25f64.powf(0.6) / 0.5).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn pmi_loss_one_hot_cases() {
        let agree = pmi_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.5, 0.5], 1.0, 1.0);
        assert!((agree + 2f64.ln()).abs() < 1e-10);
        let disagree = pmi_loss(&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5], 1.0, 1.0);
        assert!(disagree > 20.0, "{disagree}");
        // Tiny qt entries are floored instead of dividing by zero.
        assert!(pmi_loss(&[0.5, 0.5], &[0.5, 0.5], &[1.0, 0.0], 0.6, 1.0).is_finite());
    }

    #[test]
    fn symmetrized_loss_properties() {
        let fs = tiny_data(4, 1);
        let model = temi_init(&tiny_config(3, 2), 4).unwrap();
        let one = PairBatch::new(vec![0], vec![5], None).unwrap();
        let l = temi_loss(&model, &fs, &one).unwrap();
        let direct = 0.5
            * (temi_pair_loss(&model, fs.row(0), fs.row(5), 1).unwrap()
                + temi_pair_loss(&model, fs.row(5), fs.row(0), 1).unwrap());
        assert!((l.per_head[1] - direct).abs() < 1e-12);

        let batch = PairBatch::new(vec![0, 3, 7], vec![1, 9, 2], None).unwrap();
        let a = temi_loss(&model, &fs, &batch).unwrap();
        let b = temi_loss(&model, &fs, &batch.swapped()).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
        let doubled = PairBatch::new(vec![0, 3, 7, 0, 3, 7], vec![1, 9, 2, 1, 9, 2], None).unwrap();
        let c = temi_loss(&model, &fs, &doubled).unwrap();
        assert!((a.mean - c.mean).abs() < 1e-12);
        assert!(temi_loss(&model, &fs, &PairBatch::new(vec![], vec![], None).unwrap()).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let fs = tiny_data(3, 2);
        for seed in 0..3 {
            let mut cfg = tiny_config(3, 2);
            cfg.seed = seed;
            cfg.gamma = [0.6, 0.8, 1.0][seed as usize];
            let mut model = temi_init(&cfg, 4).unwrap();
            // Teacher and qt away from their initial values.
            let mut r = rng::seeded(seed + 100);
            for t in &mut model.teacher {
                t.params.iter_mut().for_each(|p| *p += r.random_range(-0.1..0.1));
            }
            model.qt_tilde = vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3];
            let batch = PairBatch::new(vec![0, 4, 8, 2], vec![1, 5, 6, 3], None).unwrap();
            let (_, grads) = model.loss_and_grad(&fs, &batch).unwrap();
            let h = 1e-4;
            for head in 0..2 {
                for p in 0..model.student[head].num_params() {
                    let mut plus = model.clone();
                    plus.student[head].params[p] += h;
                    let mut minus = model.clone();
                    minus.student[head].params[p] -= h;
                    let fd = (temi_loss(&plus, &fs, &batch).unwrap().mean
                        - temi_loss(&minus, &fs, &batch).unwrap().mean)
                        / (2.0 * h);
                    let an = grads[head][p];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-4, "seed {seed} head {head} param {p}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_still_updates_ema_state() {
        let fs = tiny_data(4, 3);
        let mut cfg = tiny_config(3, 2);
        cfg.learning_rate = 0.0;
        let mut trainer = TemiTrainer::new(temi_init(&cfg, 4).unwrap());
        let before = trainer.model.clone();
        let batch = PairBatch::new(vec![0, 1, 2], vec![3, 4, 5], None).unwrap();
        trainer.train_step(&fs, &batch).unwrap();
        for (a, b) in trainer.model.student.iter().zip(&before.student) {
            assert_eq!(a.params, b.params);
        }
        assert_ne!(trainer.model.qt_tilde, before.qt_tilde);
        assert_eq!(trainer.model.step, 1);
    }

    #[test]
    fn teacher_ema_extremes() {
        let mut m = temi_init(&tiny_config(3, 1), 2).unwrap();
        m.student[0].params.iter_mut().for_each(|p| *p = 2.0);
        m.teacher[0].params.iter_mut().for_each(|p| *p = 0.0);
        m.config.momentum = 1.0;
        teacher_ema_update(&mut m);
        assert!(m.teacher[0].params.iter().all(|&p| p == 0.0));
        m.config.momentum = 0.5;
        teacher_ema_update(&mut m);
        assert!(m.teacher[0].params.iter().all(|&p| p == 1.0));
        m.config.momentum = 0.0;
        teacher_ema_update(&mut m);
        assert_eq!(m.teacher[0].params, m.student[0].params);
    }

    #[test]
    fn cluster_distribution_ema() {
        let mut m = temi_init(&tiny_config(4, 2), 2).unwrap();
        let uniform = vec![vec![0.25; 8], vec![0.25; 8]];
        cluster_dist_ema_update(&mut m, &uniform);
        assert!(m.qt_tilde.iter().all(|&q| (q - 0.25).abs() < 1e-15));

        let p = [0.7, 0.1, 0.15, 0.05];
        let batch: Vec<Vec<f64>> = vec![p.repeat(3), p.repeat(3)];
        m.config.momentum = 0.9;
        let q0 = m.qt_tilde.clone();
        for k in 1..=50 {
            cluster_dist_ema_update(&mut m, &batch);
            for (j, (&q, &q_init)) in m.qt_tilde.iter().zip(&q0).enumerate() {
                // qt_k = p + 0.9^k (qt_0 - p)
                let pj = p[j % 4];
                let closed = pj + 0.9f64.powi(k) * (q_init - pj);
                assert!((q - closed).abs() < 1e-12);
            }
            for h in 0..2 {
                assert!((m.qt_row(h).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        m.config.momentum = 0.0;
        cluster_dist_ema_update(&mut m, &batch);
        assert!(m.qt_row(0).iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let fs = tiny_data(12, 4);
        let nn = mine_knn(&fs, 3).unwrap();
        let mut cfg = tiny_config(3, 2);
        cfg.learning_rate = 3e-3;
        cfg.batch_size = 36;
        cfg.epochs = 100;
        cfg.momentum = 0.9;
        let (model, curve) = temi_fit(&fs, &nn, &cfg).unwrap();
        assert_eq!(curve.len(), 100);
        let head: f64 = curve[..10].iter().map(|p| p.mean_loss).sum::<f64>() / 10.0;
        let tail: f64 = curve[90..].iter().map(|p| p.mean_loss).sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
        let (again, _) = temi_fit(&fs, &nn, &cfg).unwrap();
        assert_eq!(model, again);
        for h in 0..2 {
            assert!((model.qt_row(h).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn assign_uses_lowest_loss_head() {
        let fs = tiny_data(4, 5);
        let mut m = temi_init(&tiny_config(5, 2), 4).unwrap();
        constant_head(&mut m.teacher[0], 3, 4, 5);
        constant_head(&mut m.teacher[1], 1, 4, 5);
        m.per_head_loss = vec![0.1, 0.2];
        let a = temi_assign(&m, &fs).unwrap();
        assert!(a.assignments.iter().all(|&c| c == 3));
        assert_eq!(a.utilized, 1);
        m.per_head_loss = vec![0.3, 0.2];
        assert!(temi_assign(&m, &fs).unwrap().assignments.iter().all(|&c| c == 1));
        let conf = msp_confidence(&m, &fs).unwrap();
        assert!(conf.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn untrained_assignment_is_valid() {
        let fs = make_synthetic(&SyntheticSpec::balanced(2, 4, 8, 1.0, 0.5, 0)).unwrap();
        let m = temi_init(&tiny_config(4, 3), 4).unwrap();
        let a = temi_assign(&m, &fs).unwrap();
        assert_eq!(a.n(), 16);
        assert!((a.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let uniform = zero_model(4, 1, 4);
        let conf = msp_confidence(&uniform, &fs).unwrap();
        assert!(conf.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = temi_init(&tiny_config(3, 2), 4).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"CCTM");
        let back = TemiModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in back.student.iter().zip(&m.student) {
            for (x, y) in a.params.iter().zip(&b.params) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        assert!(TemiModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
