//! Siamese embedding network trained with a contrastive loss.
//!
//! The network is a plain multilayer perceptron with hand-written forward
//! and backward passes. Both branches of the Siamese pair share the same
//! parameters, so per-branch gradients are summed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Keyframe;
use crate::rng::RngStream;
use crate::supervision::{BatchSampler, LabeledPair, PairSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.uniform(-limit, limit))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![96, 64],
            embedding_dim: 32,
            activation: Activation::Relu,
            margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    layers: Vec<Dense>,
    activation: Activation,
    margin: f64,
}

/// Parameter-shaped gradient buffer, one `(weights, bias)` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl EmbeddingModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(input_dim: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.embedding_dim);
        Self::check_dims(&dims, cfg.margin)?;
        let mut rng = RngStream::new(seed).fork(0x4d4f_4445_4c);
        let layers = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            layers,
            activation: cfg.activation,
            margin: cfg.margin,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation, margin: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let mut dims = vec![layers[0].inputs];
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::invalid(format!("layer {k} has inconsistent shapes")));
            }
            if l.inputs != *dims.last().unwrap() {
                return Err(Error::invalid(format!("layer {k} input does not chain")));
            }
            dims.push(l.outputs);
        }
        Self::check_dims(&dims, margin)?;
        let model = Self {
            layers,
            activation,
            margin,
        };
        if !model.is_finite() {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(model)
    }

    /// Single linear layer with unit diagonal: `forward(x) == x`.
    pub fn identity(dim: usize, margin: f64) -> Result<Self> {
        let mut l = Dense::zeros(dim, dim);
        for i in 0..dim {
            l.weights[i * dim + i] = 1.0;
        }
        Self::from_layers(vec![l], Activation::Identity, margin)
    }

    fn check_dims(dims: &[usize], margin: f64) -> Result<()> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer dimensions must be >= 1"));
        }
        if *dims.last().unwrap() < 2 {
            return Err(Error::invalid("embedding dimension must be >= 2"));
        }
        if !(margin.is_finite() && margin > 0.0) {
            return Err(Error::invalid("margin must be positive"));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Dimension {
                expected: self.parameter_count(),
                actual: flat.len(),
                location: None,
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(&acts[k], &mut z);
            let a = if k == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        Trace { acts, pre }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
                location: None,
            });
        }
        Ok(())
    }

    /// Embeds one descriptor. Hidden layers use the model activation; the
    /// output layer is linear.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).acts.pop().unwrap())
    }

    /// Accumulates `d(loss)/d(params)` given `d(loss)/d(output)`.
    fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut Gradients) {
        let last = self.layers.len() - 1;
        let mut delta = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k != last {
                for ((d, &z), &a) in delta.iter_mut().zip(&trace.pre[k]).zip(&trace.acts[k + 1]) {
                    *d *= self.activation.derivative(z, a);
                }
            }
            let input = &trace.acts[k];
            let (gw, gb) = &mut grads.layers[k];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, &v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            if k > 0 {
                let mut next = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                delta = next;
            }
        }
    }

    fn apply_update(&mut self, grads: &Gradients, scale: f64) {
        for (l, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, g) in l.weights.iter_mut().zip(gw) {
                *w -= scale * g;
            }
            for (b, g) in l.bias.iter_mut().zip(gb) {
                *b -= scale * g;
            }
        }
    }
}

/// Euclidean distance between the embeddings of two descriptors.
pub fn pair_distance(model: &EmbeddingModel, xi: &[f64], xj: &[f64]) -> Result<f64> {
    let (a, b) = (model.forward(xi)?, model.forward(xj)?);
    Ok(euclid(&a, &b))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One element of a loss batch: two descriptors and the label (1 = similar).
pub type PairExample<'a> = (&'a [f64], &'a [f64], u8);

/// Summed contrastive loss `w·D²` for similar pairs and `[α − D]₊²` for
/// dissimilar ones, with `w = pos_weight`, plus its exact gradient.
pub fn contrastive_loss(
    model: &EmbeddingModel,
    batch: &[PairExample<'_>],
    pos_weight: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let alpha = model.margin;
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for &(xi, xj, y) in batch {
        if y > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {y}")));
        }
        model.check_input(xi)?;
        model.check_input(xj)?;
        let ti = model.trace(xi);
        let tj = model.trace(xj);
        let (pi, pj) = (ti.acts.last().unwrap(), tj.acts.last().unwrap());
        let diff: Vec<f64> = pi.iter().zip(pj).map(|(a, b)| a - b).collect();
        let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();

        // coefficient c such that dL/dφ_i = c · (φ_i − φ_j)
        let coef = if y == 1 {
            total += pos_weight * d * d;
            2.0 * pos_weight
        } else if d < alpha {
            total += (alpha - d) * (alpha - d);
            // at D = 0 the direction is undefined; take the zero subgradient
            if d > 0.0 {
                -2.0 * (alpha - d) / d
            } else {
                0.0
            }
        } else {
            0.0
        };
        if coef == 0.0 {
            continue;
        }
        let gi: Vec<f64> = diff.iter().map(|v| coef * v).collect();
        let gj: Vec<f64> = gi.iter().map(|v| -v).collect();
        model.backward(&ti, &gi, &mut grads);
        model.backward(&tj, &gj, &mut grads);
    }
    Ok((total, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_positives: usize,
    pub neg_ratio: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub pos_class_weight: f64,
    pub momentum: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batches_per_epoch: 20,
            batch_positives: 8,
            neg_ratio: 10,
            learning_rate: 0.03,
            lr_decay: 0.99,
            pos_class_weight: 10.0,
            momentum: 0.9,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_positives == 0 {
            return Err(Error::invalid(
                "epochs, batches_per_epoch and batch_positives must be >= 1",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Mini-batch SGD over distance-weighted batches. Each step uses the
/// batch-mean gradient; the returned trace holds the mean per-pair loss of
/// every epoch.
pub fn train(
    model: &EmbeddingModel,
    pairs: &PairSet,
    descriptors: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(EmbeddingModel, Vec<f64>)> {
    train_observed(model, pairs, descriptors, cfg, |_, _, _| Ok(()))
}

/// [`train`] with a callback after every epoch, given the 1-based epoch,
/// the current model and that epoch's mean loss.
pub fn train_observed(
    model: &EmbeddingModel,
    pairs: &PairSet,
    descriptors: &[Vec<f64>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EmbeddingModel, f64) -> Result<()>,
) -> Result<(EmbeddingModel, Vec<f64>)> {
    cfg.validate()?;
    if let Some(d) = descriptors.iter().find(|d| d.len() != model.input_dim()) {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            actual: d.len(),
            location: None,
        });
    }
    let sampler = BatchSampler::new(pairs, descriptors)?;
    let mut rng = RngStream::new(cfg.seed).fork(0x5452_4149_4e);
    let mut model = model.clone();
    let mut velocity: Option<Gradients> = None;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_pairs = 0usize;
        for _ in 0..cfg.batches_per_epoch {
            let batch: Vec<LabeledPair> =
                sampler.sample(&mut rng, cfg.batch_positives, cfg.neg_ratio)?;
            let examples: Vec<PairExample<'_>> = batch
                .iter()
                .map(|p| {
                    (
                        descriptors[p.i].as_slice(),
                        descriptors[p.j].as_slice(),
                        p.y,
                    )
                })
                .collect();
            let (loss, grads) = contrastive_loss(&model, &examples, cfg.pos_class_weight)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}; lower learning_rate (now {lr})"
                )));
            }
            epoch_loss += loss;
            epoch_pairs += examples.len();
            let scale = lr / examples.len() as f64;
            if cfg.momentum > 0.0 {
                let v = velocity.get_or_insert_with(|| Gradients::zeros_like(&model));
                for ((vw, vb), (gw, gb)) in v.layers.iter_mut().zip(&grads.layers) {
                    for (a, g) in vw.iter_mut().chain(vb.iter_mut()).zip(gw.iter().chain(gb)) {
                        *a = cfg.momentum * *a + g;
                    }
                }
                model.apply_update(v, scale);
            } else {
                model.apply_update(&grads, scale);
            }
            if !model.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameters diverged at epoch {epoch}; lower learning_rate (now {lr})"
                )));
            }
        }
        let mean = epoch_loss / epoch_pairs as f64;
        trace.push(mean);
        on_epoch(epoch + 1, &model, mean)?;
        lr *= cfg.lr_decay;
    }
    Ok((model, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedDescriptor {
    pub keyframe_id: usize,
    pub phi: Vec<f64>,
}

pub fn embed_all(model: &EmbeddingModel, frames: &[Keyframe]) -> Result<Vec<EmbeddedDescriptor>> {
    frames
        .iter()
        .map(|k| {
            Ok(EmbeddedDescriptor {
                keyframe_id: k.id,
                phi: model.forward(&k.descriptor.vector)?,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    layer_dims: Vec<usize>,
    margin: f64,
    activation: Activation,
    /// Per layer: weights (row-major, outputs × inputs) then biases.
    parameters: Vec<Vec<f64>>,
    config: Option<serde_json::Value>,
}

impl EmbeddingModel {
    pub fn save(&self, path: &Path, config: Option<serde_json::Value>) -> Result<()> {
        let ck = Checkpoint {
            layer_dims: self.layer_dims(),
            margin: self.margin,
            activation: self.activation,
            parameters: self
                .layers
                .iter()
                .map(|l| l.weights.iter().chain(&l.bias).copied().collect())
                .collect(),
            config,
        };
        let text = serde_json::to_string_pretty(&ck).map_err(|e| Error::invalid(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ck.layer_dims.len() != ck.parameters.len() + 1 {
            return Err(Error::invalid("checkpoint layer count mismatch"));
        }
        let layers = ck
            .layer_dims
            .windows(2)
            .zip(ck.parameters)
            .map(|(d, p)| {
                let (i, o) = (d[0], d[1]);
                if p.len() != i * o + o {
                    return Err(Error::invalid("checkpoint parameter length mismatch"));
                }
                Ok(Dense {
                    inputs: i,
                    outputs: o,
                    weights: p[..i * o].to_vec(),
                    bias: p[i * o..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, ck.activation, ck.margin)
    }
}
