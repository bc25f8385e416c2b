//! A small fully-connected network engine.
//!
//! Layers are stored input-first. Dense weights are `in × out` so a batch
//! propagates as `Y = φ(X·W + B)` with samples in rows.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equiv::{metric_eval, Metric};
use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::linalg::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Abs,
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    pub fn is_elementwise(self) -> bool {
        self != Activation::Softmax
    }

    fn apply_elementwise(self, v: f64) -> f64 {
        match self {
            Activation::Abs => v.abs(),
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
            Activation::Softmax => unreachable!("softmax is row-wise"),
        }
    }

    /// Derivative with respect to the pre-activation. Kinks (0 for Abs and
    /// ReLU) take subgradient 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Abs => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Softmax => unreachable!("softmax is row-wise"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    BatchNorm,
    Flatten,
    Dense { width: usize, activation: Activation },
}

/// Input dimension plus an input-to-output layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Architecture { input_dim, layers };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Layer("input dimension must be at least 1".into()));
        }
        let last_dense = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }));
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerSpec::Dense { width, activation } = l {
                if *width == 0 {
                    return Err(Error::Layer(format!("dense layer {i} has zero width")));
                }
                if *activation == Activation::Softmax && Some(i) != last_dense {
                    return Err(Error::Layer(format!(
                        "softmax is only allowed on the final dense layer (found at layer {i})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Indices of Dense layers followed by at least one more Dense layer.
    pub fn hidden_dense_layers(&self) -> Vec<usize> {
        hidden_dense(self.layers.iter().map(|l| matches!(l, LayerSpec::Dense { .. })))
    }

    pub fn output_dim(&self) -> usize {
        let mut dim = self.input_dim;
        for l in &self.layers {
            if let LayerSpec::Dense { width, .. } = l {
                dim = *width;
            }
        }
        dim
    }

    pub fn width_of(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer) {
            Some(LayerSpec::Dense { width, .. }) => Some(*width),
            _ => None,
        }
    }

    /// Copy with the listed Dense layers resized.
    pub fn with_widths(&self, widths: &[(usize, usize)]) -> Result<Architecture> {
        let mut out = self.clone();
        for &(layer, new_width) in widths {
            match out.layers.get_mut(layer) {
                Some(LayerSpec::Dense { width, .. }) => *width = new_width,
                _ => return Err(Error::Layer(format!("layer {layer} is not a dense layer"))),
            }
        }
        out.validate()?;
        Ok(out)
    }
}

fn hidden_dense(is_dense: impl Iterator<Item = bool>) -> Vec<usize> {
    let dense: Vec<usize> = is_dense
        .enumerate()
        .filter_map(|(i, d)| d.then_some(i))
        .collect();
    dense.split_last().map(|(_, h)| h.to_vec()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    BatchNorm(BatchNorm),
    Flatten,
    Dense(Dense),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::BatchNorm(_) => LayerSpec::BatchNorm,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense {
                width: d.weights.cols(),
                activation: d.activation,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// BatchNorm normalizes with batch statistics.
    Train,
    /// BatchNorm uses frozen running statistics.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Fresh network with seeded Glorot-uniform weights and zero biases.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dim = arch.input_dim;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            layers.push(match *spec {
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(dim)),
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { width, activation } => {
                    let limit = (6.0 / (dim + width) as f64).sqrt();
                    let weights = Matrix::from_fn(dim, width, |_, _| rng.gen_range(-limit..limit));
                    dim = width;
                    Layer::Dense(Dense {
                        weights,
                        bias: vec![0.0; width],
                        activation,
                    })
                }
            });
        }
        Ok(Network {
            input_dim: arch.input_dim,
            seed,
            layers,
        })
    }

    /// Assemble from explicit layers, checking that dimensions chain.
    pub fn from_layers(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = Network {
            input_dim,
            seed: 0,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        let mut dim = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::BatchNorm(bn) => {
                    let lens = [
                        bn.gamma.len(),
                        bn.beta.len(),
                        bn.running_mean.len(),
                        bn.running_var.len(),
                    ];
                    if lens.iter().any(|&l| l != dim) {
                        return Err(Error::Layer(format!(
                            "batch norm layer {i} expects {dim} features"
                        )));
                    }
                    if bn.running_var.iter().any(|&v| v < 0.0) {
                        return Err(Error::Layer(format!(
                            "batch norm layer {i} has negative running variance"
                        )));
                    }
                }
                Layer::Flatten => {}
                Layer::Dense(d) => {
                    if d.weights.rows() != dim {
                        return Err(Error::Layer(format!(
                            "dense layer {i} takes {} inputs but receives {dim}",
                            d.weights.rows()
                        )));
                    }
                    if d.bias.len() != d.weights.cols() {
                        return Err(Error::Layer(format!("dense layer {i} bias length mismatch")));
                    }
                    dim = d.weights.cols();
                }
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.architecture().output_dim()
    }

    pub fn hidden_dense_layers(&self) -> Vec<usize> {
        hidden_dense(self.layers.iter().map(|l| matches!(l, Layer::Dense(_))))
    }

    /// Number of neurons of a Dense layer.
    pub fn width_of(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer) {
            Some(Layer::Dense(d)) => Some(d.weights.cols()),
            _ => None,
        }
    }

    pub fn dense(&self, layer: usize) -> Option<&Dense> {
        match self.layers.get(layer) {
            Some(Layer::Dense(d)) => Some(d),
            _ => None,
        }
    }

    pub(crate) fn check_hidden_dense(&self, layer: usize) -> Result<()> {
        if self.hidden_dense_layers().contains(&layer) {
            Ok(())
        } else {
            Err(Error::Layer(format!(
                "layer {layer} is not a hidden dense layer (hidden dense layers: {:?})",
                self.hidden_dense_layers()
            )))
        }
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(x)?;
        self.run_layers(x.clone(), 0, self.layers.len(), mode)
    }

    /// Post-activation outputs of a hidden Dense layer, inference mode.
    pub fn forward_capture(&self, x: &Matrix, layer_index: usize) -> Result<Matrix> {
        self.check_hidden_dense(layer_index)?;
        self.check_input(x)?;
        self.run_layers(x.clone(), 0, layer_index + 1, Mode::Inference)
    }

    /// Inference-mode continuation from the output of layer `after`.
    pub fn forward_after(&self, y: Matrix, after: usize) -> Result<Matrix> {
        if after >= self.layers.len() {
            return Err(Error::Layer(format!("layer {after} out of range")));
        }
        self.run_layers(y, after + 1, self.layers.len(), Mode::Inference)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} input features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        Ok(())
    }

    fn run_layers(&self, mut h: Matrix, start: usize, end: usize, mode: Mode) -> Result<Matrix> {
        for layer in &self.layers[start..end] {
            h = match layer {
                Layer::Flatten => h,
                Layer::BatchNorm(bn) => batch_norm_forward(bn, h, mode).0,
                Layer::Dense(d) => dense_forward(d, &h)?.1,
            };
        }
        if !h.is_finite() {
            return Err(Error::Numeric("forward pass produced non-finite values".into()));
        }
        Ok(h)
    }

    /// Visit every trainable parameter slice in a fixed order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut k = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    f(k, d.weights.as_mut_slice());
                    f(k + 1, &mut d.bias);
                    k += 2;
                }
                Layer::BatchNorm(bn) => {
                    f(k, &mut bn.gamma);
                    f(k + 1, &mut bn.beta);
                    k += 2;
                }
                Layer::Flatten => {}
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.clone().for_each_param_mut(|_, p| n += p.len());
        n
    }

    /// FNV-1a over the bit patterns of every stored value (parameters and
    /// running statistics).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |vals: &[f64]| {
            for v in vals {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    eat(d.weights.as_slice());
                    eat(&d.bias);
                }
                Layer::BatchNorm(bn) => {
                    eat(&bn.gamma);
                    eat(&bn.beta);
                    eat(&bn.running_mean);
                    eat(&bn.running_var);
                }
                Layer::Flatten => eat(&[f64::MAX]),
            }
        }
        h
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = NetworkFile {
            format: NETWORK_FORMAT.into(),
            version: NETWORK_FORMAT_VERSION,
            network: self.clone(),
        };
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NetworkFile = serde_json::from_str(&text)?;
        if file.format != NETWORK_FORMAT || file.version != NETWORK_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{} is not a {NETWORK_FORMAT} v{NETWORK_FORMAT_VERSION} file",
                path.display()
            )));
        }
        file.network.validate()?;
        Ok(file.network)
    }
}

pub const NETWORK_FORMAT: &str = "minwidth-network";
pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: String,
    version: u32,
    network: Network,
}

/// Returns (pre-activation, output).
fn dense_forward(d: &Dense, x: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.cols() != d.weights.rows() {
        return Err(Error::Shape(format!(
            "dense layer takes {} inputs, got {}",
            d.weights.rows(),
            x.cols()
        )));
    }
    let mut z = Matrix::zeros(x.rows(), d.weights.cols());
    for i in 0..z.rows() {
        z.row_mut(i).copy_from_slice(&d.bias);
    }
    gemm(1.0, x, false, &d.weights, false, 1.0, &mut z);
    let out = activate(d.activation, &z);
    Ok((z, out))
}

fn activate(act: Activation, z: &Matrix) -> Matrix {
    let mut out = z.clone();
    match act {
        Activation::Linear => {}
        Activation::Softmax => {
            for i in 0..out.rows() {
                softmax_in_place(out.row_mut(i));
            }
        }
        _ => out.as_mut_slice().iter_mut().for_each(|v| *v = act.apply_elementwise(*v)),
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn batch_norm_forward(bn: &BatchNorm, mut x: Matrix, mode: Mode) -> (Matrix, Option<BnCache>) {
    let (n, k) = x.shape();
    let (mean, var) = match mode {
        Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
        Mode::Train => column_moments(&x),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    for i in 0..n {
        let row = x.row_mut(i);
        for j in 0..k {
            row[j] = (row[j] - mean[j]) * inv_std[j];
        }
    }
    if mode == Mode::Inference {
        scale_shift(&mut x, &bn.gamma, &bn.beta);
        return (x, None);
    }
    let xhat = x.clone();
    scale_shift(&mut x, &bn.gamma, &bn.beta);
    (
        x,
        Some(BnCache {
            xhat,
            inv_std,
            mean,
            var,
        }),
    )
}

fn scale_shift(x: &mut Matrix, gamma: &[f64], beta: &[f64]) {
    for i in 0..x.rows() {
        for ((v, g), b) in x.row_mut(i).iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
}

/// Column means and biased variances.
fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = x.shape();
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; k];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

pub const CE_CLAMP_MIN: f64 = 1e-12;

impl Loss {
    pub fn value(self, y: &Matrix, t: &Matrix) -> f64 {
        let n = y.rows() as f64;
        match self {
            Loss::Mse => {
                let count = (y.rows() * y.cols()) as f64;
                y.as_slice()
                    .iter()
                    .zip(t.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / count
            }
            Loss::CrossEntropy => {
                -y.as_slice()
                    .iter()
                    .zip(t.as_slice())
                    .filter(|(_, &tv)| tv != 0.0)
                    .map(|(&p, &tv)| tv * p.clamp(CE_CLAMP_MIN, 1.0).ln())
                    .sum::<f64>()
                    / n
            }
        }
    }

    /// Gradient with respect to the network output.
    fn gradient(self, y: &Matrix, t: &Matrix) -> Matrix {
        let n = y.rows() as f64;
        let mut g = Matrix::zeros(y.rows(), y.cols());
        match self {
            Loss::Mse => {
                let count = (y.rows() * y.cols()) as f64;
                for ((gv, a), b) in g.as_mut_slice().iter_mut().zip(y.as_slice()).zip(t.as_slice()) {
                    *gv = 2.0 * (a - b) / count;
                }
            }
            Loss::CrossEntropy => {
                for ((gv, &p), &tv) in g.as_mut_slice().iter_mut().zip(y.as_slice()).zip(t.as_slice()) {
                    // Clamped region is flat.
                    *gv = if tv != 0.0 && (CE_CLAMP_MIN..=1.0).contains(&p) {
                        -tv / (n * p)
                    } else {
                        0.0
                    };
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Dense { weights: Matrix, bias: Vec<f64> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Gradient slices in the same order as [`Network::for_each_param_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Dense { weights, bias } => {
                    out.push(weights.as_slice());
                    out.push(bias.as_slice());
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

enum Cache {
    None,
    Dense { input: Matrix, z: Matrix, out: Matrix },
    BatchNorm(BnCache),
}

/// Batch statistics observed by each BatchNorm layer during a train-mode pass.
type BnStats = Vec<Option<(Vec<f64>, Vec<f64>)>>;

/// Train-mode loss and backprop gradients on one batch.
pub fn loss_and_grads(net: &Network, x: &Matrix, t: &Matrix, loss: Loss) -> Result<(f64, Gradients)> {
    let (l, g, _) = forward_backward(net, x, t, loss)?;
    Ok((l, g))
}

fn forward_backward(net: &Network, x: &Matrix, t: &Matrix, loss: Loss) -> Result<(f64, Gradients, BnStats)> {
    if x.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    net.check_input(x)?;
    if t.shape() != (x.rows(), net.output_dim()) {
        return Err(Error::Shape(format!(
            "targets are {:?}, expected {:?}",
            t.shape(),
            (x.rows(), net.output_dim())
        )));
    }

    let mut caches = Vec::with_capacity(net.layers.len());
    let mut h = x.clone();
    for layer in &net.layers {
        match layer {
            Layer::Flatten => caches.push(Cache::None),
            Layer::BatchNorm(bn) => {
                let (out, cache) = batch_norm_forward(bn, h, Mode::Train);
                caches.push(Cache::BatchNorm(cache.expect("train mode caches")));
                h = out;
            }
            Layer::Dense(d) => {
                let (z, out) = dense_forward(d, &h)?;
                caches.push(Cache::Dense {
                    input: h,
                    z,
                    out: out.clone(),
                });
                h = out;
            }
        }
    }
    if !h.is_finite() {
        return Err(Error::Numeric("non-finite activations".into()));
    }
    let value = loss.value(&h, t);
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }

    let mut grad = loss.gradient(&h, t);
    let mut layer_grads = vec![LayerGrad::None; net.layers.len()];
    let mut stats: BnStats = vec![None; net.layers.len()];
    for (idx, (layer, cache)) in net.layers.iter().zip(caches).enumerate().rev() {
        match (layer, cache) {
            (Layer::Flatten, _) => {}
            (Layer::Dense(d), Cache::Dense { input, z, out }) => {
                let dz = activation_backward(d.activation, &z, &out, grad);
                let mut dw = Matrix::zeros(d.weights.rows(), d.weights.cols());
                gemm(1.0, &input, true, &dz, false, 0.0, &mut dw);
                let mut db = vec![0.0; dz.cols()];
                for i in 0..dz.rows() {
                    for (b, v) in db.iter_mut().zip(dz.row(i)) {
                        *b += v;
                    }
                }
                let mut dx = Matrix::zeros(input.rows(), input.cols());
                gemm(1.0, &dz, false, &d.weights, true, 0.0, &mut dx);
                layer_grads[idx] = LayerGrad::Dense {
                    weights: dw,
                    bias: db,
                };
                grad = dx;
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => {
                let (dx, dgamma, dbeta) = batch_norm_backward(bn, &c, &grad);
                layer_grads[idx] = LayerGrad::BatchNorm {
                    gamma: dgamma,
                    beta: dbeta,
                };
                stats[idx] = Some((c.mean, c.var));
                grad = dx;
            }
            _ => unreachable!("cache kind follows layer kind"),
        }
    }
    Ok((value, Gradients { layers: layer_grads }, stats))
}

fn activation_backward(act: Activation, z: &Matrix, out: &Matrix, mut grad: Matrix) -> Matrix {
    match act {
        Activation::Linear => grad,
        Activation::Softmax => {
            for i in 0..grad.rows() {
                let p = out.row(i);
                let g = grad.row_mut(i);
                let s: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                for (gv, pv) in g.iter_mut().zip(p) {
                    *gv = pv * (*gv - s);
                }
            }
            grad
        }
        _ => {
            for (gv, zv) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *gv *= act.derivative(*zv);
            }
            grad
        }
    }
}

fn batch_norm_backward(bn: &BatchNorm, c: &BnCache, grad: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, k) = grad.shape();
    let mut dgamma = vec![0.0; k];
    let mut dbeta = vec![0.0; k];
    for i in 0..n {
        let g = grad.row(i);
        let xh = c.xhat.row(i);
        for j in 0..k {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
        }
    }
    let nf = n as f64;
    let mut dx = Matrix::zeros(n, k);
    for i in 0..n {
        let g = grad.row(i);
        let xh = c.xhat.row(i);
        let out = dx.row_mut(i);
        for j in 0..k {
            out[j] = bn.gamma[j] * c.inv_std[j] / nf * (nf * g[j] - dbeta[j] - xh[j] * dgamma[j]);
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub optimizer: Adam,
    /// One early-stopping phase per rate, in order.
    pub learning_rates: Vec<f64>,
    pub patience: usize,
    /// Cap on epochs within a single phase.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
}

impl TrainSchedule {
    /// Constant rate 1e-3, patience 3.
    pub fn constant(loss: Loss) -> Self {
        TrainSchedule {
            optimizer: Adam::default(),
            learning_rates: vec![1e-3],
            patience: 3,
            max_epochs: 200,
            batch_size: 32,
            loss,
        }
    }

    /// Rates 1e-3, 1e-4, 1e-5, 1e-6 with patience 10.
    pub fn decreasing(loss: Loss) -> Self {
        TrainSchedule {
            learning_rates: vec![1e-3, 1e-4, 1e-5, 1e-6],
            patience: 10,
            ..TrainSchedule::constant(loss)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() {
            return Err(Error::Schedule("learning rate list is empty".into()));
        }
        if self.learning_rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Schedule("learning rates must be positive".into()));
        }
        if self.learning_rates.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Schedule("learning rates must be non-increasing".into()));
        }
        if self.patience == 0 {
            return Err(Error::Schedule("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Schedule("batch size and max epochs must be positive".into()));
        }
        let Adam { beta1, beta2, eps } = self.optimizer;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
            return Err(Error::Schedule("invalid Adam parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Validation loss of the weights kept at the end of the phase.
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub val_loss: f64,
    /// Accuracy for cross-entropy training, MSE otherwise; against ground truth.
    pub val_metric: f64,
    pub epochs: usize,
    pub phases: Vec<PhaseSummary>,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl AdamState {
    fn new(net: &mut Network) -> Self {
        let mut m = Vec::new();
        net.for_each_param_mut(|_, p| m.push(vec![0.0; p.len()]));
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    fn apply(&mut self, net: &mut Network, grads: &Gradients, lr: f64, cfg: Adam) {
        self.step += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.step);
        let b2t = 1.0 - cfg.beta2.powi(self.step);
        let lr_t = lr * b2t.sqrt() / b1t;
        let g = grads.slices();
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.for_each_param_mut(|k, p| {
            for (((w, gi), mi), vi) in p.iter_mut().zip(g[k]).zip(ms[k].iter_mut()).zip(vs[k].iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *w -= lr_t * *mi / (vi.sqrt() + cfg.eps);
            }
        });
    }
}

fn update_running_stats(net: &mut Network, stats: BnStats) {
    for (layer, s) in net.layers.iter_mut().zip(stats) {
        if let (Layer::BatchNorm(bn), Some((mean, var))) = (layer, s) {
            let mom = bn.momentum;
            for (r, m) in bn.running_mean.iter_mut().zip(&mean) {
                *r = mom * *r + (1.0 - mom) * m;
            }
            for (r, v) in bn.running_var.iter_mut().zip(&var) {
                *r = mom * *r + (1.0 - mom) * v;
            }
        }
    }
}

/// Mini-batch Adam with one early-stopping phase per learning rate. Each
/// phase restores the best-validation-loss weights before the next begins.
pub fn train(
    mut net: Network,
    train_x: &Matrix,
    train_t: &Matrix,
    val_x: &Matrix,
    val_t: &Matrix,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(Network, TrainOutcome)> {
    schedule.validate()?;
    if train_x.rows() == 0 || val_x.rows() == 0 {
        return Err(Error::Data("training and validation splits need at least one sample".into()));
    }
    if train_x.rows() != train_t.rows() || val_x.rows() != val_t.rows() {
        return Err(Error::Shape("inputs and targets have different row counts".into()));
    }
    if schedule.loss == Loss::CrossEntropy
        && net.dense(net.layers.len().saturating_sub(1)).map(|d| d.activation) != Some(Activation::Softmax)
    {
        return Err(Error::Config("cross-entropy training needs a softmax output layer".into()));
    }

    let val_loss_of = |net: &Network, epoch: usize| -> Result<f64> {
        let out = net.forward(val_x, Mode::Inference).map_err(|e| Error::Training {
            epoch,
            fold: None,
            reason: e.to_string(),
        })?;
        let l = schedule.loss.value(&out, val_t);
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::Training {
                epoch,
                fold: None,
                reason: "non-finite validation loss".into(),
            })
        }
    };

    let mut adam = AdamState::new(&mut net);
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    let mut epoch = 0;
    let mut phases = Vec::with_capacity(schedule.learning_rates.len());
    let mut best_loss = val_loss_of(&net, 0)?;

    for &lr in &schedule.learning_rates {
        let mut best_net = net.clone();
        let mut wait = 0;
        let mut phase_epochs = 0;
        while phase_epochs < schedule.max_epochs {
            epoch += 1;
            phase_epochs += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
            order.shuffle(&mut rng);
            for batch in order.chunks(schedule.batch_size) {
                let bx = train_x.select_rows(batch);
                let bt = train_t.select_rows(batch);
                let (_, grads, stats) = forward_backward(&net, &bx, &bt, schedule.loss).map_err(|e| {
                    Error::Training {
                        epoch,
                        fold: None,
                        reason: e.to_string(),
                    }
                })?;
                adam.apply(&mut net, &grads, lr, schedule.optimizer);
                update_running_stats(&mut net, stats);
            }
            let vl = val_loss_of(&net, epoch)?;
            log::debug!("epoch {epoch} lr {lr:e} val_loss {vl:.6}");
            if vl < best_loss {
                best_loss = vl;
                best_net = net.clone();
                wait = 0;
            } else {
                wait += 1;
                if wait >= schedule.patience {
                    break;
                }
            }
        }
        net = best_net;
        phases.push(PhaseSummary {
            learning_rate: lr,
            epochs: phase_epochs,
            best_val_loss: best_loss,
        });
    }

    let out = net.forward(val_x, Mode::Inference)?;
    let metric = Metric::for_loss(schedule.loss);
    let val_metric = metric_eval(metric, val_t, &out)?;
    Ok((
        net,
        TrainOutcome {
            val_loss: best_loss,
            val_metric,
            epochs: epoch,
            phases,
        },
    ))
}
