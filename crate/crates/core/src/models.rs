//! Source models: a feature extractor followed by a linear classifier.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domains::{batch_iter, LabeledSet};
use crate::error::{Error, Result};
use crate::optim::{lr_schedule, GroupConfig, SgdMomentum};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "decision-ckpt-v1";

/// Layer sizes shared by every model in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    pub classes: usize,
}

fn default_hidden() -> usize {
    64
}

fn default_feature_dim() -> usize {
    16
}

impl Architecture {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
            classes,
        }
    }
}

/// `x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::ShapeMismatch {
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
                context: "affine layer",
            });
        }
        Ok(Self { weight, bias })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let weight = Tensor::new(vec![input, output], draw(input * output)).expect("positive dims");
        let bias = Tensor::new(vec![output], draw(output)).expect("positive dims");
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }
}

/// Affine layers with ReLU between consecutive layers; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Affine>,
}

impl FeatureExtractor {
    pub fn new(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("feature extractor needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch {
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                    context: "consecutive feature layers",
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub layer: Affine,
    pub frozen: bool,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.layer.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub domain: String,
    pub features: FeatureExtractor,
    pub classifier: Classifier,
    /// Label smoothing used when the model was trained.
    pub label_smoothing: f64,
}

impl SourceModel {
    pub fn new(domain: impl Into<String>, features: FeatureExtractor, classifier: Affine) -> Result<Self> {
        if features.output_dim() != classifier.input_dim() {
            return Err(Error::ShapeMismatch {
                left: vec![features.output_dim()],
                right: classifier.weight.shape().to_vec(),
                context: "feature dim vs classifier input",
            });
        }
        Ok(Self {
            domain: domain.into(),
            features,
            classifier: Classifier {
                layer: classifier,
                frozen: false,
            },
            label_smoothing: 0.0,
        })
    }

    /// Fresh randomly initialized model of the standard two-layer shape.
    pub fn init(domain: impl Into<String>, arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = Affine::init(arch.input_dim, arch.hidden, &mut rng);
        let l2 = Affine::init(arch.hidden, arch.feature_dim, &mut rng);
        let head = Affine::init(arch.feature_dim, arch.classes, &mut rng);
        Self::new(domain, FeatureExtractor { layers: vec![l1, l2] }, head).expect("consistent architecture")
    }

    pub fn input_dim(&self) -> usize {
        self.features.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
                context: "model input",
            });
        }
        self.features.forward(x)
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.layer.forward(&self.forward_features(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward_logits(x)?.argmax_rows())
    }

    pub fn freeze_classifier(&mut self) {
        self.classifier.frozen = true;
    }

    /// FNV-1a over the bit patterns of the classifier parameters.
    pub fn classifier_checksum(&self) -> u64 {
        checksum([&self.classifier.layer.weight, &self.classifier.layer.bias])
    }

    pub fn feature_checksum(&self) -> u64 {
        checksum(self.features.params())
    }

    pub fn feature_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.features.params_mut().collect()
    }

    pub fn feature_param_shapes(&self) -> Vec<Vec<usize>> {
        self.features.params().map(|t| t.shape().to_vec()).collect()
    }

    /// Records parameters on `tape`. Feature parameters are trainable when
    /// `train_features` is set; the classifier is trainable only when it is
    /// not frozen and `train_classifier` is set.
    pub fn bind(&self, tape: &mut Tape, train_features: bool, train_classifier: bool) -> BoundModel {
        let leaf = |tape: &mut Tape, t: &Tensor, trainable: bool| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let features = self
            .features
            .layers
            .iter()
            .map(|l| (leaf(tape, &l.weight, train_features), leaf(tape, &l.bias, train_features)))
            .collect();
        let train_head = train_classifier && !self.classifier.frozen;
        let head = (
            leaf(tape, &self.classifier.layer.weight, train_head),
            leaf(tape, &self.classifier.layer.bias, train_head),
        );
        BoundModel { features, head }
    }
}

fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for v in t.data() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

/// Tape handles for one model's parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub features: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

impl BoundModel {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.features.len() - 1;
        for (i, &(w, b)) in self.features.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.features(tape, x)?;
        let z = tape.matmul(f, self.head.0)?;
        tape.add_bias(z, self.head.1)
    }

    pub fn feature_vars(&self) -> Vec<Var> {
        self.features.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn head_vars(&self) -> [Var; 2] {
        [self.head.0, self.head.1]
    }
}

/// Checks that all models agree on input size, feature size and class count.
/// Returns `(classes, feature_dim)`.
pub fn check_compatible(models: &[SourceModel]) -> Result<(usize, usize)> {
    let first = models.first().ok_or(Error::Empty("source models"))?;
    for m in &models[1..] {
        if m.classes() != first.classes() {
            return Err(Error::Incompatible(format!(
                "class count {} ({}) vs {} ({})",
                first.classes(),
                first.domain,
                m.classes(),
                m.domain
            )));
        }
        if m.feature_dim() != first.feature_dim() {
            return Err(Error::Incompatible(format!(
                "feature dim {} ({}) vs {} ({})",
                first.feature_dim(),
                first.domain,
                m.feature_dim(),
                m.domain
            )));
        }
        if m.input_dim() != first.input_dim() {
            return Err(Error::Incompatible(format!(
                "input dim {} ({}) vs {} ({})",
                first.input_dim(),
                first.domain,
                m.input_dim(),
                m.domain
            )));
        }
    }
    Ok((first.classes(), first.feature_dim()))
}

/// Weighted sum of per-model logits.
pub fn aggregate_logits(models: &[SourceModel], alpha: &[f64], x: &Tensor) -> Result<Tensor> {
    check_compatible(models)?;
    if alpha.len() != models.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} models",
            alpha.len(),
            models.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (m, &a) in models.iter().zip(alpha) {
        let z = m.forward_logits(x)?;
        match &mut total {
            None => total = Some(z.map(|v| a * v)),
            Some(t) => t.add_scaled(&z, a)?,
        }
    }
    Ok(total.expect("at least one model"))
}

fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("label smoothing must be in [0, 1), got {eps}")));
    }
    let mut q = vec![eps / classes as f64; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        q[i * classes + y] += 1.0 - eps;
    }
    Tensor::new(vec![labels.len(), classes], q)
}

/// Mean cross-entropy against `(1 - eps) * onehot + eps / K`, recorded on the tape.
pub fn label_smoothing_ce(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let z = tape.value(logits)?;
    if z.shape().len() != 2 || z.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            left: z.shape().to_vec(),
            right: vec![labels.len()],
            context: "logits vs labels",
        });
    }
    let b = labels.len() as f64;
    let q = tape.constant(smoothed_targets(labels, z.cols(), eps)?);
    let logp = tape.log_softmax(logits)?;
    let weighted = tape.mul(logp, q)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / b)
}

/// Value-only version of [`label_smoothing_ce`].
pub fn label_smoothing_ce_value(logits: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = label_smoothing_ce(&mut tape, z, labels, eps)?;
    Ok(tape.value(loss)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lr() -> f64 {
        1e-2
    }
    pub fn momentum() -> f64 {
        crate::optim::DEFAULT_MOMENTUM
    }
    pub fn weight_decay() -> f64 {
        crate::optim::DEFAULT_WEIGHT_DECAY
    }
    pub fn label_smoothing() -> f64 {
        0.1
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            label_smoothing: defaults::label_smoothing(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Supervised training with label smoothing. Updates the classifier too unless
/// it is frozen.
pub fn train_source(model: &mut SourceModel, data: &LabeledSet, cfg: &TrainConfig) -> Result<TrainMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if data.inputs.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            left: data.inputs.shape().to_vec(),
            right: vec![model.input_dim()],
            context: "training inputs",
        });
    }
    let feature_shapes = model.feature_param_shapes();
    let head_shapes = [
        model.classifier.layer.weight.shape().to_vec(),
        model.classifier.layer.bias.shape().to_vec(),
    ];
    let group = GroupConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = SgdMomentum::new(cfg.momentum)?;
    let fg = opt.add_group(group, &feature_shapes.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let hg = opt.add_group(group, &head_shapes.iter().map(Vec::as_slice).collect::<Vec<_>>())?;

    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = batch_iter(data.len(), cfg.batch_size, cfg.seed.wrapping_add(epoch as u64));
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true, true);
            let x = tape.constant(data.inputs.gather_rows(batch));
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let logits = bound.logits(&mut tape, x)?;
            let loss = label_smoothing_ce(&mut tape, logits, &labels, cfg.label_smoothing)?;
            loss_sum += tape.value(loss)?.item() * batch.len() as f64;
            let grads = tape.backward(loss)?;

            let factor = lr_schedule(1.0, step as f64 / total_steps as f64);
            let fgrads: Vec<Tensor> = bound
                .feature_vars()
                .into_iter()
                .zip(&feature_shapes)
                .map(|(v, s)| grads.wrt_or_zeros(v, s))
                .collect();
            opt.step(fg, &mut model.feature_params_mut(), &fgrads.iter().collect::<Vec<_>>(), factor)?;
            if !model.classifier.frozen {
                let hgrads: Vec<Tensor> = bound
                    .head_vars()
                    .into_iter()
                    .zip(&head_shapes)
                    .map(|(v, s)| grads.wrt_or_zeros(v, s))
                    .collect();
                let layer = &mut model.classifier.layer;
                opt.step(hg, &mut [&mut layer.weight, &mut layer.bias], &hgrads.iter().collect::<Vec<_>>(), factor)?;
            }
            step += 1;
        }
        epoch_losses.push(loss_sum / data.len() as f64);
    }
    model.label_smoothing = cfg.label_smoothing;
    let predictions = model.predict(&data.inputs)?;
    Ok(TrainMetrics {
        epoch_losses,
        train_accuracy: accuracy(&predictions, &data.labels),
    })
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    input: usize,
    output: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl LayerRecord {
    fn from_affine(a: &Affine) -> Self {
        Self {
            input: a.input_dim(),
            output: a.output_dim(),
            weight: a.weight.data().to_vec(),
            bias: a.bias.data().to_vec(),
        }
    }

    fn into_affine(self) -> Result<Affine> {
        let weight = Tensor::new(vec![self.input, self.output], self.weight)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bias = Tensor::new(vec![self.output], self.bias).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Affine::new(weight, bias)
    }
}

/// On-disk JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    version: String,
    domain: String,
    label_smoothing: f64,
    feature_layers: Vec<LayerRecord>,
    classifier: LayerRecord,
}

impl Checkpoint {
    pub fn from_model(model: &SourceModel) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            domain: model.domain.clone(),
            label_smoothing: model.label_smoothing,
            feature_layers: model.features.layers.iter().map(LayerRecord::from_affine).collect(),
            classifier: LayerRecord::from_affine(&model.classifier.layer),
        }
    }

    pub fn into_model(self) -> Result<SourceModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {:?}, expected {CHECKPOINT_VERSION:?}",
                self.version
            )));
        }
        let layers = self
            .feature_layers
            .into_iter()
            .map(LayerRecord::into_affine)
            .collect::<Result<Vec<_>>>()?;
        let mut model = SourceModel::new(self.domain, FeatureExtractor::new(layers)?, self.classifier.into_affine()?)?;
        model.label_smoothing = self.label_smoothing;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &SourceModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&Checkpoint::from_model(model))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SourceModel> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}
