//! End-to-end experiment stages: data, source training, method comparison,
//! and distillation.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::adaptation::{
    adapt, ensemble_accuracy, ensemble_predict, label_entropy, mean_softmax, weights_only_adapt, AdaptOutcome,
    AdaptationConfig, EpochMetrics, Objective,
};
use crate::adaptation::baselines::argmax_of_probs;
use crate::distill::{teacher_label, train_student, DistillOutcome, TeacherView};
use crate::domains::{generate_domain, DomainSpec, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::models::{accuracy, check_compatible, train_source, Architecture, SourceModel, TrainConfig, TrainMetrics};

pub const SOURCE_BEST: &str = "Source-best";
pub const SOURCE_WORST: &str = "Source-worst";
pub const SHOT_BEST: &str = "SHOT-best";
pub const SHOT_WORST: &str = "SHOT-worst";
pub const SHOT_ENS: &str = "SHOT-Ens";
pub const UNIFORM: &str = "Uniform";
pub const WEIGHTS_ONLY: &str = "Weights-only";
pub const DECISION: &str = "DECISION";

pub const ABLATION_ENTROPY: &str = "L_ent";
pub const ABLATION_INFO_MAX: &str = "L_ent+L_div";
pub const ABLATION_PSEUDO_LABEL: &str = "L_pl";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one named random stream under the global seed.
pub fn derive_seed(global: u64, stream: &str, index: u64) -> u64 {
    let tag = stream
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    splitmix64(splitmix64(global) ^ splitmix64(tag ^ index.rotate_left(29)))
}

#[derive(Debug, Clone)]
pub struct SourceData {
    pub name: String,
    pub train: LabeledSet,
    pub eval: LabeledSet,
}

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub sources: Vec<SourceData>,
    pub target_train: UnlabeledSet,
    pub target_eval: LabeledSet,
}

fn realize(spec: &DomainSpec, global: u64, fraction: f64) -> Result<(LabeledSet, LabeledSet)> {
    let spec = DomainSpec {
        seed: derive_seed(global, "domain", spec.seed),
        ..spec.clone()
    };
    let set = generate_domain(&spec)?;
    set.split(fraction, derive_seed(global, "split", spec.seed))
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let sources = cfg
        .sources
        .iter()
        .map(|s| {
            let (train, eval) = realize(&s.domain, cfg.seed, cfg.train_fraction)?;
            Ok(SourceData {
                name: s.name.clone(),
                train,
                eval,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, target_eval) = realize(&cfg.target, cfg.seed, cfg.train_fraction)?;
    if train.is_empty() || target_eval.is_empty() {
        return Err(Error::Config("target: too few samples for the train/eval split".into()));
    }
    Ok(ExperimentData {
        sources,
        target_train: train.unlabeled(),
        target_eval,
    })
}

pub fn architecture(cfg: &ExperimentConfig) -> Architecture {
    Architecture {
        input_dim: 2,
        hidden: cfg.model.hidden,
        feature_dim: cfg.model.feature_dim,
        classes: cfg.target.num_classes(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSource {
    pub model: SourceModel,
    pub metrics: TrainMetrics,
    /// Accuracy on the source's own held-out split.
    pub eval_accuracy: f64,
}

pub fn train_sources(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<TrainedSource>> {
    let arch = architecture(cfg);
    data.sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut model = SourceModel::init(s.name.clone(), arch, derive_seed(cfg.seed, "init", i as u64));
            let train_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, "source-batches", i as u64),
                ..cfg.source_training
            };
            let metrics = train_source(&mut model, &s.train, &train_cfg)?;
            let eval_accuracy = if s.eval.is_empty() {
                metrics.train_accuracy
            } else {
                accuracy(&model.predict(&s.eval.inputs)?, &s.eval.labels)
            };
            Ok(TrainedSource {
                model,
                metrics,
                eval_accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAccuracy {
    pub method: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub name: String,
    pub unadapted_target_accuracy: f64,
    /// Accuracy after adapting this source alone.
    pub adapted_target_accuracy: Option<f64>,
    /// Learned weight in the full multi-source run.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub alpha: Vec<f64>,
    pub alpha_trajectory: Vec<Vec<f64>>,
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
    pub max_simplex_error: f64,
    pub min_alpha: f64,
    pub classifier_checksums_unchanged: bool,
    /// Entropy of the hard-prediction histogram on the target eval split.
    pub label_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub objective: String,
    pub accuracy: f64,
    pub label_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub accuracy: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    /// Student/teacher agreement on the target training inputs.
    pub agreement: f64,
    /// Teacher labels on the eval split equal the ensemble's predictions.
    pub teacher_matches_ensemble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub methods: Vec<MethodAccuracy>,
    pub sources: Vec<SourceSummary>,
    pub decision: Option<DecisionSummary>,
    pub weights_only_alpha: Option<Vec<f64>>,
    pub ablations: Vec<AblationResult>,
    pub lambda_sweep: Vec<LambdaPoint>,
    /// Rank correlation between unadapted target accuracy and learned weight.
    pub spearman_alpha_vs_accuracy: Option<f64>,
    pub distill: Option<DistillSummary>,
}

impl RunReport {
    pub fn accuracy(&self, method: &str) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.accuracy)
    }

    pub fn ablation(&self, objective: &str) -> Option<&AblationResult> {
        self.ablations.iter().find(|a| a.objective == objective)
    }
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Adaptation settings with the seed tied to the run's global seed.
pub fn adaptation_config(cfg: &ExperimentConfig, stream: &str, index: u64) -> AdaptationConfig {
    AdaptationConfig {
        seed: derive_seed(cfg.seed, stream, index),
        ..cfg.adaptation.clone()
    }
}

/// Everything produced by [`run_methods`].
#[derive(Debug, Clone)]
pub struct MethodsOutcome {
    pub report: RunReport,
    /// The full multi-source run, when enabled.
    pub decision: Option<AdaptOutcome>,
}

fn best_and_worst(values: &[f64]) -> (f64, f64) {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
    (best, worst)
}

/// Runs every enabled method against the given source models.
pub fn run_methods(cfg: &ExperimentConfig, data: &ExperimentData, models: Vec<SourceModel>) -> Result<MethodsOutcome> {
    check_compatible(&models)?;
    let eval = &data.target_eval;
    let toggles = cfg.methods;
    let n = models.len();
    let classes = models[0].classes();
    let checksums: Vec<u64> = models.iter().map(SourceModel::classifier_checksum).collect();

    let unadapted: Vec<f64> = models
        .iter()
        .map(|m| Ok(accuracy(&m.predict(&eval.inputs)?, &eval.labels)))
        .collect::<Result<_>>()?;

    let mut methods = Vec::new();
    let mut push = |name: &str, accuracy: f64| {
        methods.push(MethodAccuracy {
            method: name.to_string(),
            accuracy,
        })
    };

    let (best, worst) = best_and_worst(&unadapted);
    if toggles.source_best {
        push(SOURCE_BEST, best);
    }
    if toggles.source_worst {
        push(SOURCE_WORST, worst);
    }

    let mut adapted_single: Option<Vec<f64>> = None;
    if toggles.needs_single_source_runs() {
        let mut singles = Vec::with_capacity(n);
        let mut accs = Vec::with_capacity(n);
        for (i, m) in models.iter().enumerate() {
            let out = adapt(vec![m.clone()], &data.target_train, &adaptation_config(cfg, "single", i as u64), None)?;
            accs.push(ensemble_accuracy(&out.models, &[1.0], eval)?);
            singles.extend(out.models);
        }
        let (best, worst) = best_and_worst(&accs);
        if toggles.shot_best {
            push(SHOT_BEST, best);
        }
        if toggles.shot_worst {
            push(SHOT_WORST, worst);
        }
        if toggles.shot_ens {
            let preds = argmax_of_probs(&mean_softmax(&singles, &eval.inputs)?);
            push(SHOT_ENS, accuracy(&preds, &eval.labels));
        }
        adapted_single = Some(accs);
    }

    if toggles.uniform {
        push(UNIFORM, ensemble_accuracy(&models, &vec![1.0 / n as f64; n], eval)?);
    }

    let mut weights_only_alpha = None;
    if toggles.weights_only {
        let out = weights_only_adapt(models.clone(), &data.target_train, &adaptation_config(cfg, "weights-only", 0), None)?;
        push(WEIGHTS_ONLY, ensemble_accuracy(&out.models, out.alpha(), eval)?);
        weights_only_alpha = Some(out.alpha().to_vec());
    }

    let mut decision = None;
    let mut decision_summary = None;
    if toggles.decision || toggles.distill {
        let out = adapt(models.clone(), &data.target_train, &adaptation_config(cfg, "decision", 0), Some(eval))?;
        let preds = out.predict(&eval.inputs)?;
        if toggles.decision {
            push(DECISION, accuracy(&preds, &eval.labels));
        }
        decision_summary = Some(DecisionSummary {
            alpha: out.alpha().to_vec(),
            alpha_trajectory: out.alpha_trajectory.clone(),
            epochs: out.metrics.clone(),
            steps: out.steps,
            max_simplex_error: out.max_simplex_error,
            min_alpha: out.min_alpha,
            classifier_checksums_unchanged: out
                .models
                .iter()
                .map(SourceModel::classifier_checksum)
                .eq(checksums.iter().copied()),
            label_entropy: label_entropy(&preds, classes),
        });
        decision = Some(out);
    }

    let mut ablations = Vec::new();
    if toggles.ablations {
        for (name, objective) in [
            (ABLATION_ENTROPY, Objective::ENTROPY_ONLY),
            (ABLATION_INFO_MAX, Objective::INFO_MAX),
            (ABLATION_PSEUDO_LABEL, Objective::PSEUDO_LABEL_ONLY),
        ] {
            let acfg = AdaptationConfig {
                objective,
                ..adaptation_config(cfg, "decision", 0)
            };
            let out = adapt(models.clone(), &data.target_train, &acfg, None)?;
            let preds = out.predict(&eval.inputs)?;
            ablations.push(AblationResult {
                objective: name.to_string(),
                accuracy: accuracy(&preds, &eval.labels),
                label_entropy: label_entropy(&preds, classes),
            });
        }
    }

    let mut lambda_sweep = Vec::with_capacity(cfg.lambda_sweep.len());
    for &lambda in &cfg.lambda_sweep {
        let acfg = AdaptationConfig {
            lambda,
            ..adaptation_config(cfg, "decision", 0)
        };
        let out = if acfg == adaptation_config(cfg, "decision", 0) && decision.is_some() {
            decision.clone().expect("checked")
        } else {
            adapt(models.clone(), &data.target_train, &acfg, None)?
        };
        lambda_sweep.push(LambdaPoint {
            lambda,
            accuracy: ensemble_accuracy(&out.models, out.alpha(), eval)?,
            alpha: out.alpha().to_vec(),
        });
    }

    let alpha = decision_summary.as_ref().map(|d| d.alpha.clone());
    let spearman_alpha_vs_accuracy = alpha.as_ref().and_then(|a| spearman(&unadapted, a));
    let sources = data
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| SourceSummary {
            name: s.name.clone(),
            unadapted_target_accuracy: unadapted[i],
            adapted_target_accuracy: adapted_single.as_ref().map(|a| a[i]),
            alpha: alpha.as_ref().map(|a| a[i]),
        })
        .collect();

    Ok(MethodsOutcome {
        report: RunReport {
            seed: cfg.seed,
            config: cfg.clone(),
            methods,
            sources,
            decision: decision_summary,
            weights_only_alpha,
            ablations,
            lambda_sweep,
            spearman_alpha_vs_accuracy,
            distill: None,
        },
        decision,
    })
}

/// Trains a student on the adapted ensemble's labels for the target training
/// split and evaluates both on the held-out split.
pub fn run_distill(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    adapted: &[SourceModel],
    alpha: &[f64],
) -> Result<(DistillOutcome, DistillSummary)> {
    let teacher = TeacherView::new(adapted, alpha)?;
    let eval = &data.target_eval;
    let teacher_eval = teacher_label(&teacher, &eval.inputs)?;
    let student_cfg = crate::distill::StudentConfig {
        seed: derive_seed(cfg.seed, "student", 0),
        ..cfg.distill
    };
    let out = train_student(&teacher, &data.target_train, &student_cfg)?;
    let summary = DistillSummary {
        teacher_accuracy: accuracy(&teacher_eval, &eval.labels),
        student_accuracy: accuracy(&out.student.predict(&eval.inputs)?, &eval.labels),
        agreement: out.agreement,
        teacher_matches_ensemble: teacher_eval == ensemble_predict(adapted, alpha, &eval.inputs)?,
    };
    Ok((out, summary))
}

/// All stages in one process.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub data: ExperimentData,
    pub sources: Vec<TrainedSource>,
    pub report: RunReport,
    pub decision: Option<AdaptOutcome>,
    pub student: Option<SourceModel>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let sources = train_sources(cfg, &data)?;
    let models = sources.iter().map(|s| s.model.clone()).collect();
    let MethodsOutcome { mut report, decision } = run_methods(cfg, &data, models)?;
    let mut student = None;
    if cfg.methods.distill {
        let d = decision.as_ref().expect("distillation runs the full method");
        let (out, summary) = run_distill(cfg, &data, &d.models, d.alpha())?;
        report.distill = Some(summary);
        student = Some(out.student);
    }
    Ok(Experiment {
        data,
        sources,
        report,
        decision,
        student,
    })
}
