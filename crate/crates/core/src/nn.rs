//! Dense multilayer perceptrons with hand-written backpropagation.
//!
//! Parameters live in one flat `Vec<f64>` so that optimizers, EMA updates,
//! checkpoints and finite-difference checks can treat a network as a plain
//! vector. Batched products go through `matrixmultiply`.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// tanh approximation of GELU.
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` via one `exp`; several times faster than `f64::tanh`, with relative
/// error below 1e-11.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        return x - x * x * x / 3.0;
    }
    let e = (2.0 * x.min(40.0).max(-40.0)).exp();
    (e - 1.0) / (e + 1.0)
}

impl Activation {
    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))),
            Activation::Silu => x * (1.0 / (1.0 + (-x).exp())),
        }
    }

    /// Value and derivative at `x`, sharing the transcendental evaluation.
    #[inline]
    fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Identity => (x, 1.0),
            Activation::Gelu => {
                let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
                let value = 0.5 * x * (1.0 + t);
                let slope =
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                (value, slope)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                (x * s, s * (1.0 + x * (1.0 - s)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            bias: true,
            activation,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn num_params(&self) -> usize {
        self.inputs * self.outputs + if self.bias { self.outputs } else { 0 }
    }
}

/// A feed-forward network `x -> act(W_L ... act(W_1 x + b_1) ... + b_L)`.
///
/// The weight matrix of each layer is stored row-major as `outputs x inputs`
/// followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    rows: usize,
    /// Input of each layer, `rows x inputs`.
    inputs: Vec<Vec<f64>>,
    /// Activation derivative at each layer's pre-activation, `rows x
    /// outputs`; empty for identity layers.
    slope: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Trace {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(layers: Vec<Layer>) -> Self {
        for w in layers.windows(2) {
            assert_eq!(w[0].outputs, w[1].inputs, "layer widths do not chain");
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.num_params();
        }
        Self {
            layers,
            offsets,
            params: vec![0.0; total],
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization for weights and biases.
    pub fn init<R: Rng>(layers: Vec<Layer>, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(layers);
        for (l, &off) in mlp.layers.iter().zip(&mlp.offsets) {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for p in &mut mlp.params[off..off + l.num_params()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        mlp
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Width of the first hidden layer, i.e. the length of a row of the
    /// optional additive offset accepted by [`Mlp::forward`].
    pub fn first_width(&self) -> usize {
        self.layers[0].outputs
    }

    /// Runs `rows` inputs through the network. `first_offset`, when given, is
    /// a `rows x first_width` matrix added to the first pre-activation (used
    /// for conditioning embeddings).
    pub fn forward(&self, x: &[f64], rows: usize, first_offset: Option<&[f64]>) -> Trace {
        debug_assert_eq!(x.len(), rows * self.input_dim());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut slope = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (li, (l, &off)) in self.layers.iter().zip(&self.offsets).enumerate() {
            let w = &self.params[off..off + l.inputs * l.outputs];
            let mut z = vec![0.0; rows * l.outputs];
            if l.bias {
                let b = &self.params[off + l.inputs * l.outputs..off + l.num_params()];
                for row in z.chunks_exact_mut(l.outputs) {
                    row.copy_from_slice(b);
                }
            }
            if li == 0 {
                if let Some(extra) = first_offset {
                    debug_assert_eq!(extra.len(), z.len());
                    z.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
            }
            // z += cur (rows x in) * W^T (in x out)
            gemm(
                rows,
                l.inputs,
                l.outputs,
                (&cur, l.inputs as isize, 1),
                (w, 1, l.inputs as isize),
                &mut z,
                1.0,
            );
            let mut ds = Vec::new();
            if l.activation != Activation::Identity {
                ds.resize(z.len(), 0.0);
                for (v, d) in z.iter_mut().zip(ds.iter_mut()) {
                    (*v, *d) = l.activation.eval(*v);
                }
            }
            inputs.push(std::mem::replace(&mut cur, z));
            slope.push(ds);
        }
        Trace {
            rows,
            inputs,
            slope,
            output: cur,
        }
    }

    /// Forward pass without the trace needed for backpropagation.
    pub fn infer(&self, x: &[f64], rows: usize, first_offset: Option<&[f64]>) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.input_dim());
        let mut cur = x.to_vec();
        for (li, (l, &off)) in self.layers.iter().zip(&self.offsets).enumerate() {
            let w = &self.params[off..off + l.inputs * l.outputs];
            let mut z = match (li, first_offset) {
                (0, Some(extra)) => extra.to_vec(),
                _ => vec![0.0; rows * l.outputs],
            };
            if l.bias {
                let b = &self.params[off + l.inputs * l.outputs..off + l.num_params()];
                for row in z.chunks_exact_mut(l.outputs) {
                    row.iter_mut().zip(b).for_each(|(a, b)| *a += b);
                }
            }
            gemm(
                rows,
                l.inputs,
                l.outputs,
                (&cur, l.inputs as isize, 1),
                (w, 1, l.inputs as isize),
                &mut z,
                1.0,
            );
            if l.activation != Activation::Identity {
                z.iter_mut().for_each(|v| *v = l.activation.value(*v));
            }
            cur = z;
        }
        cur
    }

    /// Convenience forward pass returning only the output.
    pub fn predict(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.infer(x, rows, None)
    }

    /// Accumulates parameter gradients of a scalar loss into `grad` given
    /// `grad_output = dLoss/dOutput` (`rows x output_dim`). Returns the
    /// gradient with respect to the first layer's pre-activation, which is
    /// also the gradient with respect to any first-layer offset.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let rows = trace.rows;
        let mut g = grad_output.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let off = self.offsets[li];
            if l.activation != Activation::Identity {
                g.iter_mut().zip(&trace.slope[li]).for_each(|(gv, d)| *gv *= d);
            }
            let nw = l.inputs * l.outputs;
            // dW (out x in) += g^T (out x rows) * input (rows x in)
            gemm(
                l.outputs,
                rows,
                l.inputs,
                (&g, 1, l.outputs as isize),
                (&trace.inputs[li], l.inputs as isize, 1),
                &mut grad[off..off + nw],
                1.0,
            );
            if l.bias {
                let gb = &mut grad[off + nw..off + nw + l.outputs];
                for row in g.chunks_exact(l.outputs) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            if li == 0 {
                return g;
            }
            // dInput (rows x in) = g (rows x out) * W (out x in)
            let mut gin = vec![0.0; rows * l.inputs];
            gemm(
                rows,
                l.outputs,
                l.inputs,
                (&g, l.outputs as isize, 1),
                (&self.params[off..off + nw], l.inputs as isize, 1),
                &mut gin,
                0.0,
            );
            g = gin;
        }
        unreachable!("network has at least one layer")
    }
}

/// `c = beta * c + a * b` for row-major `c` (`m x n`) with explicitly strided
/// operands `(data, row_stride, col_stride)`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.0.len() >= (m - 1) * a.1.unsigned_abs() + (k - 1) * a.2.unsigned_abs() + 1);
    assert!(k == 0 || b.0.len() >= (k - 1) * b.1.unsigned_abs() + (n - 1) * b.2.unsigned_abs() + 1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(num_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] = params[i] * decay - self.learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn loss(mlp: &Mlp, x: &[f64], rows: usize, offset: Option<&[f64]>) -> f64 {
        // Weighted sum keeps every output coordinate in play.
        mlp.forward(x, rows, offset)
            .output
            .iter()
            .enumerate()
            .map(|(i, v)| (1.0 + 0.1 * i as f64) * v * v)
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::seeded(11);
        let mlp = Mlp::init(
            vec![
                Layer::new(3, 5, Activation::Gelu),
                Layer::new(5, 4, Activation::Silu),
                Layer::new(4, 2, Activation::Identity).without_bias(),
            ],
            &mut r,
        );
        let rows = 3;
        let x: Vec<f64> = (0..rows * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let off: Vec<f64> = (0..rows * 5).map(|i| (i as f64 * 0.11).cos() * 0.3).collect();
        let trace = mlp.forward(&x, rows, Some(&off));
        let gout: Vec<f64> = trace
            .output
            .iter()
            .enumerate()
            .map(|(i, v)| 2.0 * (1.0 + 0.1 * i as f64) * v)
            .collect();
        let mut grad = vec![0.0; mlp.num_params()];
        let goff = mlp.backward(&trace, &gout, &mut grad);
        let h = 1e-5;
        for p in 0..mlp.num_params() {
            let mut plus = mlp.clone();
            plus.params[p] += h;
            let mut minus = mlp.clone();
            minus.params[p] -= h;
            let fd = (loss(&plus, &x, rows, Some(&off)) - loss(&minus, &x, rows, Some(&off))) / (2.0 * h);
            assert!((fd - grad[p]).abs() < 1e-6 * (1.0 + fd.abs()), "param {p}: {fd} vs {}", grad[p]);
        }
        for k in 0..off.len() {
            let mut o2 = off.clone();
            o2[k] += h;
            let mut o3 = off.clone();
            o3[k] -= h;
            let fd = (loss(&mlp, &x, rows, Some(&o2)) - loss(&mlp, &x, rows, Some(&o3))) / (2.0 * h);
            assert!((fd - goff[k]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn infer_matches_forward_bitwise() {
        let mut r = rng::seeded(5);
        let mlp = Mlp::init(
            vec![
                Layer::new(4, 6, Activation::Silu),
                Layer::new(6, 6, Activation::Gelu),
                Layer::new(6, 3, Activation::Identity),
            ],
            &mut r,
        );
        let rows = 7;
        let x: Vec<f64> = (0..rows * 4).map(|i| (i as f64 * 0.91).sin() * 3.0).collect();
        let off: Vec<f64> = (0..rows * 6).map(|i| (i as f64 * 0.23).cos()).collect();
        assert_eq!(mlp.infer(&x, rows, Some(&off)), mlp.forward(&x, rows, Some(&off)).output);
        assert_eq!(mlp.predict(&x, rows), mlp.forward(&x, rows, None).output);
    }

    #[test]
    fn fast_tanh_accuracy() {
        for i in -2000..=2000 {
            let x = i as f64 * 1e-3 + 1e-7 * i as f64;
            let t = x.tanh();
            assert!((fast_tanh(x) - t).abs() <= 1e-11 * t.abs().max(1e-300), "x={x}");
        }
        for x in [1e-9, -3e-5, 9.9e-5, 1.01e-4, 30.0, -50.0] {
            let t: f64 = f64::tanh(x);
            assert!((fast_tanh(x) - t).abs() <= 1e-11 * t.abs(), "x={x}");
        }
    }

    #[test]
    fn adamw_zero_learning_rate_is_a_no_op() {
        let mut p = vec![1.0, -2.0, 3.0];
        let before = p.clone();
        let mut opt = AdamW::new(3, 0.0, 0.1);
        opt.step(&mut p, &[0.5, 0.5, -1.0]);
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut p = vec![0.0, 0.0];
        let mut opt = AdamW::new(2, 0.01, 0.0);
        opt.step(&mut p, &[3.0, -0.2]);
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_stable() {
        let mut out = [0.0; 2];
        softmax(&[1000.0, 0.0], 0.1, &mut out);
        assert!(out[0] > 1.0 - 1e-12 && out[1] >= 0.0);
        softmax(&[2f64.ln(), 0.0], 1.0, &mut out);
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-15);
    }
}
