//! Compressing an adapted ensemble into one network.
//!
//! The student is trained with plain cross-entropy on the ensemble's hard
//! labels for the unlabeled target training split.

use serde::{Deserialize, Serialize};

use crate::adaptation::ensemble_predict;
use crate::adaptation::alpha::simplex_error;
use crate::domains::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::models::{accuracy, check_compatible, train_source, Architecture, SourceModel, TrainConfig, TrainMetrics};
use crate::tensor::Tensor;

/// Adapted models together with their aggregation weights.
#[derive(Debug, Clone, Copy)]
pub struct TeacherView<'a> {
    models: &'a [SourceModel],
    alpha: &'a [f64],
}

impl<'a> TeacherView<'a> {
    pub fn new(models: &'a [SourceModel], alpha: &'a [f64]) -> Result<Self> {
        check_compatible(models)?;
        if alpha.len() != models.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} models",
                alpha.len(),
                models.len()
            )));
        }
        let (err, min) = simplex_error(alpha);
        if err > 1e-9 || min < 0.0 {
            return Err(Error::InvalidArgument("teacher weights must lie on the simplex".into()));
        }
        Ok(Self { models, alpha })
    }

    pub fn models(&self) -> &'a [SourceModel] {
        self.models
    }

    pub fn alpha(&self) -> &'a [f64] {
        self.alpha
    }
}

/// Argmax of the weighted teacher logits.
pub fn teacher_label(teacher: &TeacherView<'_>, x: &Tensor) -> Result<Vec<usize>> {
    ensemble_predict(teacher.models, teacher.alpha, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: SourceModel,
    pub metrics: TrainMetrics,
    /// Fraction of distillation inputs where student and teacher agree.
    pub agreement: f64,
}

/// Architecture matching the first teacher model.
fn student_architecture(teacher: &TeacherView<'_>) -> Architecture {
    let m = &teacher.models[0];
    Architecture {
        input_dim: m.input_dim(),
        hidden: m.features.layers[0].output_dim(),
        feature_dim: m.feature_dim(),
        classes: m.classes(),
    }
}

pub fn train_student(teacher: &TeacherView<'_>, target: &UnlabeledSet, cfg: &StudentConfig) -> Result<DistillOutcome> {
    if target.is_empty() {
        return Err(Error::Empty("distillation set"));
    }
    let labels = teacher_label(teacher, &target.inputs)?;
    let classes = teacher.models[0].classes();
    let data = LabeledSet::new(target.inputs.clone(), labels.clone(), classes)?;
    let mut student = SourceModel::init("student", student_architecture(teacher), cfg.seed);
    let train = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        label_smoothing: 0.0,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let metrics = if cfg.epochs == 0 {
        TrainMetrics {
            epoch_losses: Vec::new(),
            train_accuracy: accuracy(&student.predict(&data.inputs)?, &labels),
        }
    } else {
        train_source(&mut student, &data, &train)?
    };
    let agreement = accuracy(&student.predict(&target.inputs)?, &labels);
    Ok(DistillOutcome {
        student,
        metrics,
        agreement,
    })
}
