//! Dense feed-forward networks with exact gradients and minibatch SGD.
//!
//! A [`Network`] is the numerical substrate for every learned piece of the
//! mixture: the base model, expert tails, the linear gate and the stacking
//! ensemblers. Hidden layers use ReLU; the final layer is always linear and
//! produces logits.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::WeightedSampler;
use crate::error::{Error, Result};
use crate::json::ser_f64_rows;
use crate::matrix::Matrix;
use crate::rng::{rng_from, Rng};

pub const FORMAT_VERSION: u32 = 1;

/// Probabilities below this floor are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    /// `weight` is `[out × in]`.
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape {
                context: "layer bias",
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer bias"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Multiply-accumulates of one dense evaluation.
    pub fn macs(&self) -> u64 {
        (self.in_dim() * self.out_dim()) as u64
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.weight.matvec_into(x, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
            if self.activation == Activation::Relu && *o < 0.0 {
                *o = 0.0;
            }
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.apply_into(x, &mut out);
        out
    }
}

/// Outputs of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Post-activation output of the tap layer.
    pub tap: Vec<f64>,
    /// Input to the final layer.
    pub prelogits: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkBlock", into = "NetworkBlock")]
pub struct Network {
    layers: Vec<Layer>,
    tap_index: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, tap_index: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape {
                    context: "layer chain",
                    expected: w[0].out_dim(),
                    got: w[1].in_dim(),
                });
            }
        }
        if layers.last().map(Layer::activation) != Some(Activation::Identity) {
            return Err(Error::invalid("final layer must be linear"));
        }
        if tap_index >= layers.len() {
            return Err(Error::invalid(format!(
                "tap_index {tap_index} out of range for {} layers",
                layers.len()
            )));
        }
        Ok(Self { layers, tap_index })
    }

    /// Glorot-uniform initialization over `dims = [in, h1, .., out]`; hidden
    /// layers are ReLU, the last is linear, biases start at zero.
    pub fn random(dims: &[usize], tap_index: usize, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let act = if i + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer::new(
                Matrix::new(fan_out, fan_in, data)?,
                vec![0.0; fan_out],
                act,
            )?);
        }
        Network::new(layers, tap_index)
    }

    /// Single linear layer with zero weights and bias.
    pub fn zeros_linear(in_dim: usize, out_dim: usize) -> Self {
        let layer = Layer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation: Activation::Identity,
        };
        Self {
            layers: vec![layer],
            tap_index: 0,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tap_index(&self) -> usize {
        self.tap_index
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn tap_dim(&self) -> usize {
        self.layers[self.tap_index].out_dim()
    }

    pub fn prelogit_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].in_dim()
    }

    /// `[in, h1, .., out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(Layer::macs).sum()
    }

    /// MACs of layers `0..=tap_index`.
    pub fn prefix_macs(&self) -> u64 {
        self.layers[..=self.tap_index].iter().map(Layer::macs).sum()
    }

    /// Copy of layers `start..` as a standalone network.
    pub fn tail(&self, start: usize) -> Result<Network> {
        if start >= self.layers.len() {
            return Err(Error::invalid(format!(
                "tail start {start} leaves no layers (network has {})",
                self.layers.len()
            )));
        }
        Network::new(self.layers[start..].to_vec(), 0)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut tap = Vec::new();
        let last = self.layers.len() - 1;
        let mut prelogits = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if i == last {
                prelogits = cur.clone();
            }
            cur = layer.apply(&cur);
            if i == self.tap_index {
                tap = cur.clone();
            }
        }
        let probs = softmax(&cur);
        Ok(Forward {
            tap,
            prelogits,
            logits: cur,
            probs,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.apply(&cur);
        }
        Ok(cur)
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Inputs to each layer followed by the final logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.apply(acts.last().expect("nonempty"));
            acts.push(next);
        }
        acts
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Network> {
        let text = fs::read_to_string(path)?;
        check_format_version(&text)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads the top-level `format_version` of a JSON document and rejects
/// anything other than the supported version.
pub fn check_format_version(text: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Probe {
        format_version: Option<u32>,
    }
    let probe: Probe = serde_json::from_str(text)?;
    match probe.format_version {
        Some(FORMAT_VERSION) => Ok(()),
        Some(found) => Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        }),
        None => Err(Error::Checkpoint("missing format_version".into())),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkBlock {
    format_version: u32,
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    tap_index: usize,
    #[serde(serialize_with = "ser_f64_rows")]
    weights: Vec<Vec<f64>>,
    #[serde(serialize_with = "ser_f64_rows")]
    biases: Vec<Vec<f64>>,
}

impl From<Network> for NetworkBlock {
    fn from(net: Network) -> Self {
        NetworkBlock {
            format_version: FORMAT_VERSION,
            layer_dims: net.dims(),
            activations: net.layers.iter().map(Layer::activation).collect(),
            tap_index: net.tap_index,
            weights: net
                .layers
                .iter()
                .map(|l| l.weight.as_slice().to_vec())
                .collect(),
            biases: net.layers.iter().map(|l| l.bias.clone()).collect(),
        }
    }
}

impl TryFrom<NetworkBlock> for Network {
    type Error = Error;

    fn try_from(b: NetworkBlock) -> Result<Self> {
        if b.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: b.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let n = b.activations.len();
        if b.layer_dims.len() != n + 1 || b.weights.len() != n || b.biases.len() != n {
            return Err(Error::Checkpoint(
                "layer_dims/activations/weights/biases lengths disagree".into(),
            ));
        }
        let mut layers = Vec::with_capacity(n);
        for (i, ((w, bias), act)) in b
            .weights
            .into_iter()
            .zip(b.biases)
            .zip(b.activations)
            .enumerate()
        {
            let weight = Matrix::new(b.layer_dims[i + 1], b.layer_dims[i], w)?;
            layers.push(Layer::new(weight, bias, act)?);
        }
        Network::new(layers, b.tap_index)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `−weight · ln probs[label]`, with the log clamped at `ln 1e-12`.
pub fn weighted_nll(probs: &[f64], label: usize, weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    -weight * clamped_ln(probs[label])
}

/// `KL(target ‖ probs)` with the same log clamp as [`weighted_nll`].
pub fn kl_divergence(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t.ln() - clamped_ln(p)))
        .sum()
}

/// Training target of one example.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    /// Soft distribution; the loss is `KL(target ‖ model)`.
    Soft(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub target: Target<'a>,
    pub weight: f64,
}

impl<'a> Example<'a> {
    pub fn labeled(x: &'a [f64], label: usize, weight: f64) -> Self {
        Self {
            x,
            target: Target::Class(label),
            weight,
        }
    }
}

fn example_loss(probs: &[f64], target: Target<'_>) -> f64 {
    match target {
        Target::Class(y) => -clamped_ln(probs[y]),
        Target::Soft(t) => kl_divergence(t, probs),
    }
}

/// d loss / d logits, accounting for the clamp (clamped terms contribute no
/// gradient).
fn logit_grad(probs: &[f64], target: Target<'_>, out: &mut [f64]) {
    match target {
        Target::Class(y) => {
            if probs[y] > PROB_FLOOR {
                out.copy_from_slice(probs);
                out[y] -= 1.0;
            } else {
                out.fill(0.0);
            }
        }
        Target::Soft(t) => {
            let active: f64 = t
                .iter()
                .zip(probs)
                .filter(|(_, &p)| p > PROB_FLOOR)
                .map(|(&t, _)| t)
                .sum();
            for (i, o) in out.iter_mut().enumerate() {
                *o = probs[i] * active;
                if probs[i] > PROB_FLOOR {
                    *o -= t[i];
                }
            }
        }
    }
}

/// Mean weighted loss of `batch`.
pub fn batch_loss(net: &Network, batch: &[Example<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in batch {
        if ex.weight == 0.0 {
            continue;
        }
        total += ex.weight * example_loss(&net.probs(ex.x)?, ex.target);
    }
    Ok(total / batch.len() as f64)
}

/// Gradients of the mean weighted loss, laid out like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    fn reset(&mut self) {
        for w in &mut self.weights {
            w.as_mut_slice().fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().flatten().all(|&v| v == 0.0)
    }
}

/// Exact gradients of the mean weighted loss over `batch`.
pub fn backward(net: &Network, batch: &[Example<'_>]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ex in batch {
        net.check_input(ex.x)?;
    }
    let mut grads = Gradients::zeros_like(net);
    accumulate(net, batch, &mut grads, 0);
    Ok(grads)
}

/// Accumulates gradients for layers `stop..`; layers below `stop` are left
/// untouched.
fn accumulate(net: &Network, batch: &[Example<'_>], grads: &mut Gradients, stop: usize) {
    let scale = 1.0 / batch.len() as f64;
    let n = net.layers.len();
    for ex in batch {
        if ex.weight == 0.0 {
            continue;
        }
        let acts = net.activations(ex.x);
        let probs = softmax(&acts[n]);
        let mut delta = vec![0.0; probs.len()];
        logit_grad(&probs, ex.target, &mut delta);
        let w = ex.weight * scale;
        for d in &mut delta {
            *d *= w;
        }
        for l in (stop..n).rev() {
            let input = &acts[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &a) in gw.row_mut(o).iter_mut().zip(input) {
                    *g += d * a;
                }
                grads.biases[l][o] += d;
            }
            if l == stop {
                break;
            }
            let layer = &net.layers[l];
            let mut prev = vec![0.0; layer.in_dim()];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wv) in prev.iter_mut().zip(layer.weight.row(o)) {
                    *p += wv * d;
                }
            }
            if net.layers[l - 1].activation == Activation::Relu {
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 5.0,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::invalid("lr_decay_factor must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate / self.lr_decay_factor.powi(decays as i32)
    }

    pub fn with_seed(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    /// Row-stochastic soft targets, one row per sample.
    Soft(&'a Matrix),
}

/// How per-sample weights enter training.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    Uniform,
    /// Weights multiply each sample's loss.
    Loss(&'a [f64]),
    /// Weights are sampling probabilities (unnormalized); loss weight is 1.
    Sample(&'a [f64]),
}

/// A weighted dataset ready for SGD.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub inputs: &'a Matrix,
    pub targets: Targets<'a>,
    pub weighting: Weighting<'a>,
}

impl<'a> TrainSet<'a> {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    fn example(&self, i: usize, loss_weight: f64) -> Example<'a> {
        let target = match self.targets {
            Targets::Labels(l) => Target::Class(l[i]),
            Targets::Soft(m) => Target::Soft(m.row(i)),
        };
        Example {
            x: self.inputs.row(i),
            target,
            weight: loss_weight,
        }
    }

    fn loss_weight(&self, i: usize) -> f64 {
        match self.weighting {
            Weighting::Loss(w) => w[i],
            Weighting::Uniform | Weighting::Sample(_) => 1.0,
        }
    }

    fn validate(&self, net: &Network) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.inputs.cols() != net.input_dim() {
            return Err(Error::Shape {
                context: "training inputs",
                expected: net.input_dim(),
                got: self.inputs.cols(),
            });
        }
        match self.targets {
            Targets::Labels(l) => {
                if l.len() != n {
                    return Err(Error::Shape {
                        context: "training labels",
                        expected: n,
                        got: l.len(),
                    });
                }
                if let Some(&bad) = l.iter().find(|&&y| y >= net.output_dim()) {
                    return Err(Error::invalid(format!(
                        "label {bad} out of range for {} outputs",
                        net.output_dim()
                    )));
                }
            }
            Targets::Soft(m) => {
                if m.rows() != n || m.cols() != net.output_dim() {
                    return Err(Error::Shape {
                        context: "soft targets",
                        expected: n * net.output_dim(),
                        got: m.rows() * m.cols(),
                    });
                }
            }
        }
        if let Weighting::Loss(w) | Weighting::Sample(w) = self.weighting {
            if w.len() != n {
                return Err(Error::Shape {
                    context: "sample weights",
                    expected: n,
                    got: w.len(),
                });
            }
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid("sample weights must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Mean loss over the whole set (sampling weights are ignored).
    pub fn mean_loss(&self, net: &Network) -> Result<f64> {
        let batch: Vec<Example<'_>> = (0..self.len())
            .map(|i| self.example(i, self.loss_weight(i)))
            .collect();
        batch_loss(net, &batch)
    }
}

/// Minibatch SGD with momentum. Layers `0..frozen_prefix` are never updated.
pub fn sgd_train(
    net: &Network,
    data: &TrainSet<'_>,
    cfg: &SgdConfig,
    frozen_prefix: usize,
) -> Result<Network> {
    sgd_train_inner(net, data, cfg, frozen_prefix, 0..cfg.epochs, false).map(|(n, _)| n)
}

/// Runs only the epochs in `epochs` of `cfg`'s schedule (learning-rate decay
/// is evaluated at the absolute epoch index). Momentum starts from zero.
pub fn sgd_train_epochs(
    net: &Network,
    data: &TrainSet<'_>,
    cfg: &SgdConfig,
    frozen_prefix: usize,
    epochs: Range<usize>,
) -> Result<Network> {
    sgd_train_inner(net, data, cfg, frozen_prefix, epochs, false).map(|(n, _)| n)
}

/// Like [`sgd_train`], also returning the full-data mean loss after each
/// epoch.
pub fn sgd_train_logged(
    net: &Network,
    data: &TrainSet<'_>,
    cfg: &SgdConfig,
    frozen_prefix: usize,
) -> Result<(Network, Vec<f64>)> {
    sgd_train_inner(net, data, cfg, frozen_prefix, 0..cfg.epochs, true)
}

fn sgd_train_inner(
    net: &Network,
    data: &TrainSet<'_>,
    cfg: &SgdConfig,
    frozen_prefix: usize,
    epochs: Range<usize>,
    log: bool,
) -> Result<(Network, Vec<f64>)> {
    cfg.validate()?;
    data.validate(net)?;
    if frozen_prefix > net.num_layers() {
        return Err(Error::invalid(format!(
            "frozen_prefix {frozen_prefix} exceeds {} layers",
            net.num_layers()
        )));
    }
    let mut net = net.clone();
    let mut history = Vec::new();
    if epochs.is_empty() || frozen_prefix == net.num_layers() {
        return Ok((net, history));
    }

    let n = data.len();
    let mut rng = rng_from(cfg.seed);
    let mut sampler = match data.weighting {
        Weighting::Sample(w) => Some(WeightedSampler::new(w)?),
        _ => None,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = Gradients::zeros_like(&net);
    let mut velocity = Gradients::zeros_like(&net);
    let mut batch: Vec<Example<'_>> = Vec::with_capacity(cfg.batch_size);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);

    for epoch in epochs {
        let lr = cfg.learning_rate_at(epoch);
        if sampler.is_none() {
            order.shuffle(&mut rng);
        }
        for b in 0..batches_per_epoch {
            batch.clear();
            match sampler.as_mut() {
                Some(s) => {
                    for _ in 0..cfg.batch_size {
                        batch.push(data.example(s.draw(&mut rng), 1.0));
                    }
                }
                None => {
                    let lo = b * cfg.batch_size;
                    let hi = (lo + cfg.batch_size).min(n);
                    for &i in &order[lo..hi] {
                        batch.push(data.example(i, data.loss_weight(i)));
                    }
                }
            }
            grads.reset();
            accumulate(&net, &batch, &mut grads, frozen_prefix);
            for l in frozen_prefix..net.num_layers() {
                let layer = &mut net.layers[l];
                let vw = velocity.weights[l].as_mut_slice();
                for ((w, v), g) in layer
                    .weight
                    .as_mut_slice()
                    .iter_mut()
                    .zip(vw.iter_mut())
                    .zip(grads.weights[l].as_slice())
                {
                    *v = cfg.momentum * *v + g;
                    *w -= lr * *v;
                }
                for ((b, v), g) in layer
                    .bias
                    .iter_mut()
                    .zip(velocity.biases[l].iter_mut())
                    .zip(&grads.biases[l])
                {
                    *v = cfg.momentum * *v + g;
                    *b -= lr * *v;
                }
            }
        }
        if net
            .layers
            .iter()
            .any(|l| l.weight.as_slice().iter().chain(&l.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("parameters after SGD step (learning rate too high?)"));
        }
        if log {
            history.push(data.mean_loss(&net)?);
        }
    }
    Ok((net, history))
}
