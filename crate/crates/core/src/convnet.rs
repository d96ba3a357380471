//! Encoder/predictor ConvNet.
//!
//! The encoder is a sequence of `[conv 2×2 → relu → maxpool 2×2]` stacks;
//! its flattened output is the feature vector `f`. The predictor is a
//! fully connected network with `tanh` hidden layers and a single sigmoid
//! output, the score `s` (probability of Group 2).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Activation, NodeId, Tape};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

const MODEL_MAGIC: &str = "confviz-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each conv stack.
    pub encoder: Vec<usize>,
    /// Hidden widths of the predictor.
    pub predictor: Vec<usize>,
}

impl ModelSpec {
    /// Three stacks with channel plan 1→4→8→2 over a 32×32 input, giving
    /// 2×4×4 = 32 features, and one hidden layer of 16.
    pub fn synthetic() -> Self {
        Self {
            input_channels: 1,
            input_height: 32,
            input_width: 32,
            encoder: vec![4, 8, 2],
            predictor: vec![16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scale = 1usize << self.encoder.len();
        if self.encoder.is_empty() || self.encoder.contains(&0) || self.predictor.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        if self.input_channels == 0
            || !self.input_height.is_multiple_of(scale)
            || !self.input_width.is_multiple_of(scale)
            || self.input_height == 0
            || self.input_width == 0
        {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {scale} for {} pooling stages",
                self.input_height,
                self.input_width,
                self.encoder.len()
            )));
        }
        Ok(())
    }

    /// Number of features at the encoder/predictor boundary.
    pub fn feature_dim(&self) -> usize {
        let scale = 1usize << self.encoder.len();
        (self.input_height / scale) * (self.input_width / scale) * self.encoder.last().unwrap()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }

    /// Names and shapes of all parameters in declaration order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (i, &cout) in self.encoder.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![cout, cin, 2, 2]));
            out.push((format!("conv{}.bias", i + 1), vec![cout]));
            cin = cout;
        }
        let mut width = self.feature_dim();
        for (i, &next) in self.predictor.iter().chain(std::iter::once(&1)).enumerate() {
            out.push((format!("fc{}.weight", i + 1), vec![next, width]));
            out.push((format!("fc{}.bias", i + 1), vec![next]));
            width = next;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    /// Parameters in `spec.parameter_layout()` order.
    pub params: Vec<Tensor>,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
            l2: 0.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation("momentum must lie in [0, 1)".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Validation("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Recorded forward pass with the nodes callers need for gradient queries.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub tape: Tape,
    pub input: NodeId,
    /// Encoder output after flattening (before any feature-level layer).
    pub features: NodeId,
    /// Predictor input; differs from `features` only when a blend layer
    /// was inserted.
    pub predictor_input: NodeId,
    pub logit: NodeId,
    pub score: NodeId,
    pub params: Vec<NodeId>,
}

impl ForwardPass {
    pub fn score(&self) -> f64 {
        self.tape.value(self.score).item()
    }

    pub fn features(&self) -> &Tensor {
        self.tape.value(self.features)
    }
}

/// Feature-level layer `x * mask + (1 - mask) * constants` inserted between
/// encoder and predictor.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBlend<'a> {
    pub mask: &'a [f64],
    pub constants: &'a [f64],
}

impl Model {
    /// Parameters drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let layout = spec.parameter_layout();
        let mut params = Vec::with_capacity(layout.len());
        for pair in layout.chunks(2) {
            let wshape = &pair[0].1;
            let fan_in: usize = wshape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            for (_, shape) in pair {
                params.push(Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)));
            }
        }
        Ok(Self {
            spec,
            params,
            metadata: TrainingMetadata {
                seed,
                epochs_run: 0,
                final_loss: None,
            },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.spec
            .parameter_layout()
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self
            .spec
            .parameter_layout()
            .iter()
            .position(|(n, _)| n == name)?;
        Some(&mut self.params[idx])
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.image_shape() {
            return Err(Error::Shape(format!(
                "image shape {:?}, model expects {:?}",
                image.shape(),
                self.spec.image_shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        self.forward_with(image, None)
    }

    /// Forward pass, optionally routing the features through a blend layer.
    pub fn forward_with(&self, image: &Tensor, blend: Option<FeatureBlend<'_>>) -> Result<ForwardPass> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let input = tape.leaf(image.clone());
        let params: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let n_conv = self.spec.encoder.len();

        let mut x = input;
        for stack in 0..n_conv {
            x = tape.conv2d(x, params[2 * stack], params[2 * stack + 1])?;
            x = tape.pointwise(x, Activation::Relu);
            x = tape.maxpool2(x)?;
        }
        let features = tape.flatten(x);
        let predictor_input = match blend {
            Some(b) => tape.blend(features, b.mask, b.constants)?,
            None => features,
        };

        let mut h = predictor_input;
        let n_fc = self.spec.predictor.len() + 1;
        for layer in 0..n_fc {
            let w = params[2 * (n_conv + layer)];
            let b = params[2 * (n_conv + layer) + 1];
            h = tape.affine(h, w, b)?;
            if layer + 1 < n_fc {
                h = tape.pointwise(h, Activation::Tanh);
            }
        }
        let logit = h;
        let score = tape.pointwise(logit, Activation::Sigmoid);
        Ok(ForwardPass {
            tape,
            input,
            features,
            predictor_input,
            logit,
            score,
            params,
        })
    }

    pub fn score(&self, image: &Tensor) -> Result<f64> {
        Ok(self.forward(image)?.score())
    }

    fn l2_penalty(&self, l2: f64) -> f64 {
        let n_conv = self.spec.encoder.len();
        let sq: f64 = self.params[2 * n_conv..]
            .iter()
            .step_by(2)
            .map(|w| w.dot(w))
            .sum();
        0.5 * l2 * sq
    }

    /// Mini-batch gradient descent with momentum on mean binary
    /// cross-entropy, plus `l2 / 2 * |W|^2` over fully connected weights.
    /// Returns the per-epoch mean loss.
    pub fn train(&mut self, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Validation("cannot train on an empty dataset".into()));
        }
        for r in &dataset.records {
            self.check_image(&r.image)?;
        }
        let n_conv = self.spec.encoder.len();
        let is_fc_weight: Vec<bool> = (0..self.params.len())
            .map(|i| i >= 2 * n_conv && i % 2 == 0)
            .collect();
        let mut velocity: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train"));
        let mut history = Vec::with_capacity(config.epochs);

        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut penalty_sum = 0.0;
            let mut n_batches = 0usize;
            for batch in order.chunks(config.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                for &i in batch {
                    let rec = &dataset.records[i];
                    let target = rec.group.target();
                    let pass = self.forward(&rec.image)?;
                    let z = pass.tape.value(pass.logit).item();
                    loss_sum += softplus(z) - target * z;
                    let seed = Tensor::scalar((sigmoid(z) - target) * scale);
                    let g = pass.tape.backward_from(pass.logit, seed)?;
                    for (acc, &id) in grads.iter_mut().zip(&pass.params) {
                        acc.add_assign(g.get(id));
                    }
                }
                penalty_sum += self.l2_penalty(config.l2);
                n_batches += 1;
                for (((p, v), g), &fc) in self
                    .params
                    .iter_mut()
                    .zip(velocity.iter_mut())
                    .zip(&grads)
                    .zip(&is_fc_weight)
                {
                    let l2 = if fc { config.l2 } else { 0.0 };
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = config.momentum * *vv - config.learning_rate * (gv + l2 * *pv);
                        *pv += *vv;
                    }
                }
            }
            let mean = loss_sum / dataset.len() as f64 + penalty_sum / n_batches as f64;
            log::debug!("epoch {} mean loss {mean:.6}", epoch + 1);
            if !mean.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss: mean,
                });
            }
            history.push(mean);
            self.metadata.epochs_run += 1;
            self.metadata.final_loss = Some(mean);
        }
        self.metadata.seed = config.seed;
        Ok(history)
    }

    /// Fraction of records whose thresholded score (s >= 0.5 means Group 2)
    /// matches the label.
    pub fn training_accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for rec in &dataset.records {
            let predicted = self.score(&rec.image)? >= 0.5;
            if predicted == (rec.group.target() == 1.0) {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Text serialization: magic line, JSON header, then one `param` line
    /// and one value line per tensor, then `end`.
    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            spec: &'a ModelSpec,
            metadata: &'a TrainingMetadata,
        }
        let header = serde_json::to_string(&Header {
            spec: &self.spec,
            metadata: &self.metadata,
        })
        .expect("header serializes");
        let mut out = format!("{MODEL_MAGIC} {MODEL_VERSION}\n{header}\n");
        for ((name, shape), tensor) in self.spec.parameter_layout().iter().zip(&self.params) {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "param {name} {}", dims.join(" "));
            let values: Vec<String> = tensor.data().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", values.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            spec: ModelSpec,
            metadata: TrainingMetadata,
        }
        let mut lines = text.lines();
        let magic = lines
            .next()
            .ok_or_else(|| Error::format("magic", "empty model file"))?;
        if magic != format!("{MODEL_MAGIC} {MODEL_VERSION}") {
            return Err(Error::format("magic", format!("unrecognized header `{magic}`")));
        }
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("header", "missing spec header"))?;
        let header: Header = serde_json::from_str(header_line)
            .map_err(|e| Error::format("header", e.to_string()))?;
        header.spec.validate()?;

        let mut params = Vec::new();
        for (name, shape) in header.spec.parameter_layout() {
            let decl = lines
                .next()
                .ok_or_else(|| Error::format(&name, "file truncated before parameter block"))?;
            let mut parts = decl.split_whitespace();
            if parts.next() != Some("param") || parts.next() != Some(name.as_str()) {
                return Err(Error::format(&name, format!("expected `param {name}`, found `{decl}`")));
            }
            let declared: Vec<usize> = parts
                .map(|d| d.parse().map_err(|_| Error::format(&name, format!("bad extent `{d}`"))))
                .collect::<Result<_>>()?;
            if declared != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` declared as {declared:?}, spec requires {shape:?}"
                )));
            }
            let values_line = lines
                .next()
                .ok_or_else(|| Error::format(&name, "file truncated inside parameter block"))?;
            let values: Vec<f64> = values_line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::format(&name, format!("bad value `{v}`"))))
                .collect::<Result<_>>()?;
            let expected: usize = shape.iter().product();
            if values.len() != expected {
                return Err(Error::format(
                    &name,
                    format!("expected {expected} values, found {}", values.len()),
                ));
            }
            params.push(Tensor::new(shape, values)?);
        }
        if lines.next() != Some("end") {
            return Err(Error::format("end", "missing end marker (file truncated?)"));
        }
        Ok(Self {
            spec: header.spec,
            params,
            metadata: header.metadata,
        })
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
