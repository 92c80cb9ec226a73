use serde::{Deserialize, Serialize};

use super::alpha::{alpha_project_on_tape, simplex_error, AggregationWeights};
use super::losses::{aggregate_on_tape, entropy_of, total_loss, Objective};
use super::pseudo::{pseudo_label_models, DistanceMode};
use crate::autodiff::Tape;
use crate::domains::{batch_iter, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::models::{accuracy, aggregate_logits, check_compatible, SourceModel};
use crate::optim::{lr_schedule, GroupConfig, SgdMomentum, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Weight of the pseudo-label term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_alpha: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub refinement_rounds: usize,
    pub distance: DistanceMode,
    pub objective: Objective,
    /// Update feature extractors; off for the weights-only variant.
    pub train_backbone: bool,
    /// Update the aggregation weights; ignored with a single source.
    pub train_alpha: bool,
    /// Fail the run if the weights ever leave the simplex.
    pub check_simplex: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            epochs: 15,
            batch_size: 32,
            lr_backbone: 1e-3,
            lr_alpha: 1e-2,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            refinement_rounds: 1,
            distance: DistanceMode::PerSource,
            objective: Objective::FULL,
            train_backbone: true,
            train_alpha: true,
            check_simplex: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("adaptation.batch_size must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("adaptation.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr_backbone > 0.0) || !(self.lr_alpha > 0.0) {
            return Err(Error::Config("adaptation learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("adaptation.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adaptation.weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    fn uses_pseudo_labels(&self) -> bool {
        self.objective.pseudo_label && self.lambda > 0.0
    }
}

/// One line of the per-epoch metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_ent")]
    pub l_ent: f64,
    #[serde(rename = "L_div")]
    pub l_div: f64,
    #[serde(rename = "L_pl")]
    pub l_pl: f64,
    #[serde(rename = "L_tot")]
    pub l_tot: f64,
    pub alpha: Vec<f64>,
    pub target_accuracy: Option<f64>,
    /// Mean prediction over the whole target set at the start of the epoch.
    pub mean_prediction: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub models: Vec<SourceModel>,
    pub weights: AggregationWeights,
    pub metrics: Vec<EpochMetrics>,
    /// Weights before the first step and after every epoch.
    pub alpha_trajectory: Vec<Vec<f64>>,
    pub steps: usize,
    /// Worst `|sum alpha - 1|` seen after any step.
    pub max_simplex_error: f64,
    /// Smallest single weight seen after any step.
    pub min_alpha: f64,
}

impl AdaptOutcome {
    pub fn alpha(&self) -> &[f64] {
        self.weights.alpha()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        ensemble_predict(&self.models, self.alpha(), x)
    }
}

/// Which parameters receive gradients in [`batch_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub alpha: bool,
}

/// Loss values and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub entropy: f64,
    pub diversity: f64,
    pub pseudo_label: Option<f64>,
    pub total: f64,
    /// Per model, gradients for every feature-extractor tensor in
    /// `feature_params_mut` order; empty when the backbone is fixed.
    pub feature_grads: Vec<Vec<Tensor>>,
    /// Gradient with respect to the raw (unprojected) weights.
    pub raw_alpha_grad: Option<Tensor>,
}

/// Evaluates the adaptation objective on a batch with the weights given by
/// their raw values, and backpropagates into whatever is trainable.
pub fn batch_objective(
    models: &[SourceModel],
    raw_alpha: &[f64],
    x: &Tensor,
    pseudo_labels: Option<&[usize]>,
    lambda: f64,
    objective: Objective,
    trainable: Trainable,
) -> Result<BatchObjective> {
    check_compatible(models)?;
    if raw_alpha.len() != models.len() {
        return Err(Error::InvalidArgument(format!(
            "{} raw weights for {} models",
            raw_alpha.len(),
            models.len()
        )));
    }
    let n = models.len();
    let mut tape = Tape::new();
    let bound: Vec<_> = models.iter().map(|m| m.bind(&mut tape, trainable.backbone, false)).collect();
    let raw_t = Tensor::vector(raw_alpha.to_vec())?;
    let raw = if trainable.alpha {
        tape.param(raw_t)
    } else {
        tape.constant(raw_t)
    };
    let alpha = alpha_project_on_tape(&mut tape, raw)?;
    let xv = tape.constant(x.clone());
    let logits = bound.iter().map(|b| b.logits(&mut tape, xv)).collect::<Result<Vec<_>>>()?;
    let agg = aggregate_on_tape(&mut tape, alpha, &logits)?;
    let terms = total_loss(&mut tape, agg, pseudo_labels, lambda, objective)?;

    let mut out = BatchObjective {
        entropy: tape.value(terms.entropy)?.item(),
        diversity: tape.value(terms.diversity)?.item(),
        pseudo_label: terms.pseudo_label.map(|v| tape.value(v).map(Tensor::item)).transpose()?,
        total: tape.value(terms.total)?.item(),
        feature_grads: Vec::new(),
        raw_alpha_grad: None,
    };
    if !trainable.backbone && !trainable.alpha {
        return Ok(out);
    }
    let grads = tape.backward(terms.total)?;
    if trainable.backbone {
        out.feature_grads = models
            .iter()
            .zip(&bound)
            .map(|(m, b)| {
                b.feature_vars()
                    .into_iter()
                    .zip(m.feature_param_shapes())
                    .map(|(v, s)| grads.wrt_or_zeros(v, &s))
                    .collect()
            })
            .collect();
    }
    if trainable.alpha {
        out.raw_alpha_grad = Some(grads.wrt_or_zeros(raw, &[n]));
    }
    Ok(out)
}

/// Argmax of the weighted logits.
pub fn ensemble_predict(models: &[SourceModel], alpha: &[f64], x: &Tensor) -> Result<Vec<usize>> {
    Ok(aggregate_logits(models, alpha, x)?.argmax_rows())
}

pub fn ensemble_accuracy(models: &[SourceModel], alpha: &[f64], data: &LabeledSet) -> Result<f64> {
    Ok(accuracy(&ensemble_predict(models, alpha, &data.inputs)?, &data.labels))
}

/// Jointly adapts the feature extractors of every source and their
/// aggregation weights on unlabeled target data, with all classifiers frozen.
///
/// `eval` is only read to report per-epoch accuracy.
pub fn adapt(
    mut models: Vec<SourceModel>,
    target: &UnlabeledSet,
    cfg: &AdaptationConfig,
    eval: Option<&LabeledSet>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    check_compatible(&models)?;
    if target.is_empty() {
        return Err(Error::Empty("target set"));
    }
    if target.input_dim() != models[0].input_dim() {
        return Err(Error::Incompatible(format!(
            "target has {} features, models expect {}",
            target.input_dim(),
            models[0].input_dim()
        )));
    }
    for m in &mut models {
        m.freeze_classifier();
    }

    let n = models.len();
    let train_alpha = cfg.train_alpha && n > 1;
    let mut weights = AggregationWeights::uniform(n)?;
    let mut opt = SgdMomentum::new(cfg.momentum)?;
    let backbone_groups: Vec<usize> = if cfg.train_backbone {
        models
            .iter()
            .map(|m| {
                let shapes = m.feature_param_shapes();
                opt.add_group(
                    GroupConfig {
                        lr: cfg.lr_backbone,
                        weight_decay: cfg.weight_decay,
                    },
                    &shapes.iter().map(Vec::as_slice).collect::<Vec<_>>(),
                )
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let alpha_group = opt.add_group(
        GroupConfig {
            lr: cfg.lr_alpha,
            weight_decay: 0.0,
        },
        &[&[n]],
    )?;

    let x_all = &target.inputs;
    let batches_per_epoch = target.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut trajectory = vec![weights.alpha().to_vec()];
    let (mut max_err, mut min_alpha) = weights.simplex_error();

    for epoch in 0..cfg.epochs {
        let pseudo = if cfg.uses_pseudo_labels() {
            Some(pseudo_label_models(&models, weights.alpha(), x_all, cfg.refinement_rounds, cfg.distance)?)
        } else {
            None
        };
        let mean_prediction = aggregate_logits(&models, weights.alpha(), x_all)?.softmax().mean_rows().into_data();

        let mut sums = [0.0f64; 4];
        let batches = batch_iter(target.len(), cfg.batch_size, cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        for batch in &batches {
            let batch_labels: Option<Vec<usize>> = pseudo.as_ref().map(|p| batch.iter().map(|&i| p.labels[i]).collect());
            let trainable = Trainable {
                backbone: cfg.train_backbone,
                alpha: train_alpha,
            };
            let out = batch_objective(
                &models,
                weights.raw(),
                &x_all.gather_rows(batch),
                batch_labels.as_deref(),
                cfg.lambda,
                cfg.objective,
                trainable,
            )?;

            let w = batch.len() as f64;
            sums[0] += w * out.entropy;
            sums[1] += w * out.diversity;
            sums[2] += w * out.pseudo_label.unwrap_or(0.0);
            sums[3] += w * out.total;

            if !cfg.train_backbone && !train_alpha {
                step += 1;
                continue;
            }
            let factor = lr_schedule(1.0, step as f64 / total_steps as f64);
            for ((model, g), &group) in models.iter_mut().zip(&out.feature_grads).zip(&backbone_groups) {
                opt.step(group, &mut model.feature_params_mut(), &g.iter().collect::<Vec<_>>(), factor)?;
            }
            if let Some(g) = &out.raw_alpha_grad {
                let mut raw_t = weights.raw_tensor();
                opt.step(alpha_group, &mut [&mut raw_t], &[g], factor)?;
                weights.set_raw(raw_t.into_data());
            }

            let (err, min) = simplex_error(weights.alpha());
            max_err = max_err.max(err);
            min_alpha = min_alpha.min(min);
            if cfg.check_simplex && (err > 1e-9 || min < 0.0) {
                return Err(Error::Violation(format!(
                    "aggregation weights left the simplex at step {step}: |sum - 1| = {err:e}, min = {min:e}"
                )));
            }
            step += 1;
        }

        let count = target.len() as f64;
        let target_accuracy = match eval {
            Some(set) => Some(ensemble_accuracy(&models, weights.alpha(), set)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            l_ent: sums[0] / count,
            l_div: sums[1] / count,
            l_pl: sums[2] / count,
            l_tot: sums[3] / count,
            alpha: weights.alpha().to_vec(),
            target_accuracy,
            mean_prediction,
        });
        trajectory.push(weights.alpha().to_vec());
    }

    Ok(AdaptOutcome {
        models,
        weights,
        metrics,
        alpha_trajectory: trajectory,
        steps: step,
        max_simplex_error: max_err,
        min_alpha,
    })
}

/// Learns only the aggregation weights; feature extractors stay fixed.
pub fn weights_only_adapt(
    models: Vec<SourceModel>,
    target: &UnlabeledSet,
    cfg: &AdaptationConfig,
    eval: Option<&LabeledSet>,
) -> Result<AdaptOutcome> {
    let cfg = AdaptationConfig {
        train_backbone: false,
        ..cfg.clone()
    };
    adapt(models, target, &cfg, eval)
}

/// Entropy of the empirical distribution of hard predictions.
pub fn label_entropy(predictions: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0.0; classes];
    for &p in predictions {
        counts[p] += 1.0;
    }
    let total = predictions.len().max(1) as f64;
    let p: Vec<f64> = counts.iter().map(|c| c / total).collect();
    entropy_of(&p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_domain, DomainSpec};
    use crate::models::{train_source, Architecture, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_models(n: usize, seed: u64) -> Vec<SourceModel> {
        let arch = Architecture {
            input_dim: 2,
            hidden: 6,
            feature_dim: 4,
            classes: 3,
        };
        (0..n).map(|j| SourceModel::init(format!("s{j}"), arch, seed * 10 + j as u64)).collect()
    }

    fn objective_at(models: &[SourceModel], raw: &[f64], x: &Tensor, labels: &[usize], objective: Objective) -> f64 {
        let t = Trainable {
            backbone: false,
            alpha: false,
        };
        batch_objective(models, raw, x, Some(labels), 0.3, objective, t).unwrap().total
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for case in 0..10 {
            let n = 1 + case % 3;
            let models = small_models(n, case as u64);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
            let x = Tensor::from_rows(&rows).unwrap();
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let t = Trainable {
                backbone: true,
                alpha: true,
            };
            let out = batch_objective(&models, &raw, &x, Some(&labels), 0.3, Objective::FULL, t).unwrap();

            let g = out.raw_alpha_grad.unwrap();
            for j in 0..n {
                let (mut up, mut down) = (raw.clone(), raw.clone());
                up[j] += h;
                down[j] -= h;
                let fd = (objective_at(&models, &up, &x, &labels, Objective::FULL)
                    - objective_at(&models, &down, &x, &labels, Objective::FULL))
                    / (2.0 * h);
                assert!(rel_err(g.data()[j], fd) < 1e-4 || (g.data()[j] - fd).abs() < 1e-8, "alpha {j}: {} vs {fd}", g.data()[j]);
            }
            for m in 0..n {
                for (p, grad) in out.feature_grads[m].iter().enumerate() {
                    for e in 0..grad.len() {
                        let mut shifted = models.clone();
                        shifted[m].feature_params_mut()[p].data_mut()[e] += h;
                        let up = objective_at(&shifted, &raw, &x, &labels, Objective::FULL);
                        shifted[m].feature_params_mut()[p].data_mut()[e] -= 2.0 * h;
                        let down = objective_at(&shifted, &raw, &x, &labels, Objective::FULL);
                        let fd = (up - down) / (2.0 * h);
                        let a = grad.data()[e];
                        assert!(rel_err(a, fd) < 1e-4 || (a - fd).abs() < 1e-8, "model {m} param {p}[{e}]: {a} vs {fd}");
                    }
                }
            }
        }
    }

    fn moons_target(seed: u64) -> (Vec<SourceModel>, LabeledSet) {
        let mut source = DomainSpec::two_moons(200, seed);
        source.noise = 0.1;
        let data = generate_domain(&source).unwrap();
        let arch = Architecture {
            input_dim: 2,
            hidden: 16,
            feature_dim: 8,
            classes: 2,
        };
        let models = (0..2)
            .map(|j| {
                let mut m = SourceModel::init(format!("m{j}"), arch, j);
                let cfg = TrainConfig {
                    epochs: 5,
                    seed: j,
                    ..TrainConfig::default()
                };
                train_source(&mut m, &data, &cfg).unwrap();
                m
            })
            .collect();
        let mut target = DomainSpec::two_moons(120, seed + 1);
        target.noise = 0.1;
        target.rotation = 0.3;
        (models, generate_domain(&target).unwrap())
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (models, target) = moons_target(0);
        let cfg = AdaptationConfig {
            epochs: 0,
            ..AdaptationConfig::default()
        };
        let out = adapt(models.clone(), &target.unlabeled(), &cfg, None).unwrap();
        for (a, b) in out.models.iter().zip(&models) {
            assert_eq!(a.features, b.features);
        }
        assert_eq!(out.alpha(), &[0.5, 0.5]);
        assert_eq!(out.steps, 0);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn classifiers_stay_frozen_and_weights_stay_on_simplex() {
        let (models, target) = moons_target(1);
        let before: Vec<u64> = models.iter().map(SourceModel::classifier_checksum).collect();
        let cfg = AdaptationConfig {
            epochs: 3,
            check_simplex: true,
            ..AdaptationConfig::default()
        };
        let out = adapt(models.clone(), &target.unlabeled(), &cfg, Some(&target)).unwrap();
        let after: Vec<u64> = out.models.iter().map(SourceModel::classifier_checksum).collect();
        assert_eq!(before, after);
        assert!(out.max_simplex_error <= 1e-9);
        assert!(out.min_alpha >= 0.0);
        assert_eq!(out.metrics.len(), 3);
        assert_eq!(out.alpha_trajectory.len(), 4);
        assert!(out.metrics.iter().all(|m| m.target_accuracy.is_some()));
        assert_ne!(out.models[0].feature_checksum(), models[0].feature_checksum());
    }

    #[test]
    fn single_source_weight_is_fixed_at_one() {
        let (models, target) = moons_target(2);
        let cfg = AdaptationConfig {
            epochs: 2,
            ..AdaptationConfig::default()
        };
        let out = adapt(models[..1].to_vec(), &target.unlabeled(), &cfg, None).unwrap();
        assert_eq!(out.alpha(), &[1.0]);
    }

    #[test]
    fn weights_only_keeps_features() {
        let (models, target) = moons_target(3);
        let cfg = AdaptationConfig {
            epochs: 2,
            ..AdaptationConfig::default()
        };
        let out = weights_only_adapt(models.clone(), &target.unlabeled(), &cfg, None).unwrap();
        for (a, b) in out.models.iter().zip(&models) {
            assert_eq!(a.features, b.features);
        }
        assert_ne!(out.alpha(), &[0.5, 0.5]);
    }

    #[test]
    fn full_batch_information_maximization_does_not_increase() {
        let (models, target) = moons_target(4);
        let n = target.len();
        let cfg = AdaptationConfig {
            epochs: 1,
            batch_size: n,
            lambda: 0.0,
            objective: Objective::INFO_MAX,
            ..AdaptationConfig::default()
        };
        let single = models[..1].to_vec();
        let t = Trainable {
            backbone: false,
            alpha: false,
        };
        let loss = |ms: &[SourceModel]| {
            batch_objective(ms, &[0.0], &target.inputs, None, 0.0, Objective::INFO_MAX, t)
                .unwrap()
                .total
        };
        let before = loss(&single);
        let out = adapt(single, &target.unlabeled(), &cfg, None).unwrap();
        assert!(loss(&out.models) <= before, "{} > {before}", loss(&out.models));
    }

    #[test]
    fn runs_are_deterministic() {
        let (models, target) = moons_target(5);
        let cfg = AdaptationConfig {
            epochs: 2,
            ..AdaptationConfig::default()
        };
        let a = adapt(models.clone(), &target.unlabeled(), &cfg, None).unwrap();
        let b = adapt(models, &target.unlabeled(), &cfg, None).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.alpha(), b.alpha());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn label_entropy_of_histograms() {
        assert_eq!(label_entropy(&[0, 0, 0], 2), 0.0);
        assert!((label_entropy(&[0, 1], 2) - 2f64.ln()).abs() < 1e-15);
    }
}
