//! Information-maximization and pseudo-label losses on aggregate logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::SourceModel;
use crate::tensor::Tensor;

fn batch_rows(tape: &Tape, logits: Var) -> Result<usize> {
    let z = tape.value(logits)?;
    if z.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!("logits must be a matrix, got {:?}", z.shape())));
    }
    Ok(z.rows())
}

/// Mean conditional entropy of the softmax predictions.
pub fn entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let b = batch_rows(tape, logits)?;
    let logp = tape.log_softmax(logits)?;
    let p = tape.exp(logp)?;
    let plogp = tape.mul(p, logp)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Entropy of the batch-mean prediction.
pub fn diversity_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    batch_rows(tape, logits)?;
    let p = tape.softmax(logits)?;
    let mean = tape.mean_rows(p)?;
    let terms = tape.xlogx(mean)?;
    let total = tape.sum(terms)?;
    tape.scale(total, -1.0)
}

/// Mean cross-entropy against hard pseudo-labels.
pub fn pl_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let b = batch_rows(tape, logits)?;
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!("{} pseudo-labels for {b} rows", labels.len())));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather_cols(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Which terms enter the total objective. The full objective enables all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub entropy: bool,
    pub diversity: bool,
    pub pseudo_label: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self::FULL
    }
}

impl Objective {
    pub const FULL: Self = Self {
        entropy: true,
        diversity: true,
        pseudo_label: true,
    };
    pub const ENTROPY_ONLY: Self = Self {
        entropy: true,
        diversity: false,
        pseudo_label: false,
    };
    pub const INFO_MAX: Self = Self {
        entropy: true,
        diversity: true,
        pseudo_label: false,
    };
    pub const PSEUDO_LABEL_ONLY: Self = Self {
        entropy: false,
        diversity: false,
        pseudo_label: true,
    };
}

/// Loss components recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub entropy: Var,
    pub diversity: Var,
    pub pseudo_label: Option<Var>,
    pub total: Var,
}

/// `L_tot = L_ent - L_div + lambda * L_pl`, restricted to the enabled terms.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    pseudo_labels: Option<&[usize]>,
    lambda: f64,
    objective: Objective,
) -> Result<LossTerms> {
    let entropy = entropy_loss(tape, logits)?;
    let diversity = diversity_loss(tape, logits)?;
    let pseudo_label = match pseudo_labels {
        Some(labels) => Some(pl_loss(tape, logits, labels)?),
        None if objective.pseudo_label && lambda != 0.0 => {
            return Err(Error::InvalidArgument("pseudo-label term enabled without labels".into()))
        }
        None => None,
    };
    let mut parts = Vec::new();
    if objective.entropy {
        parts.push(entropy);
    }
    if objective.diversity {
        parts.push(tape.scale(diversity, -1.0)?);
    }
    if objective.pseudo_label {
        if let Some(pl) = pseudo_label {
            parts.push(tape.scale(pl, lambda)?);
        }
    }
    let total = match parts.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = tape.add(acc, p)?;
            }
            acc
        }
    };
    Ok(LossTerms {
        entropy,
        diversity,
        pseudo_label,
        total,
    })
}

/// Plain-number combination of the three terms with the same signs as [`total_loss`].
pub fn combine(entropy: f64, diversity: f64, pseudo_label: f64, lambda: f64) -> f64 {
    entropy - diversity + lambda * pseudo_label
}

/// Records `sum_j alpha_j * logits_j` where `alpha` is a length-n tape vector.
pub fn aggregate_on_tape(tape: &mut Tape, alpha: Var, logits: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (j, &z) in logits.iter().enumerate() {
        let a = tape.select(alpha, j)?;
        let term = tape.mul_scalar(z, a)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or(Error::Empty("source logits"))
}

fn with_aggregate<T>(models: &[SourceModel], alpha: &[f64], x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<T>) -> Result<T> {
    if x.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    let z = crate::models::aggregate_logits(models, alpha, x)?;
    let mut tape = Tape::new();
    let v = tape.constant(z);
    f(&mut tape, v)
}

/// Entropy of the weighted ensemble on a batch.
pub fn entropy_value(models: &[SourceModel], alpha: &[f64], x: &Tensor) -> Result<f64> {
    with_aggregate(models, alpha, x, |t, z| {
        let l = entropy_loss(t, z)?;
        Ok(t.value(l)?.item())
    })
}

pub fn diversity_value(models: &[SourceModel], alpha: &[f64], x: &Tensor) -> Result<f64> {
    with_aggregate(models, alpha, x, |t, z| {
        let l = diversity_loss(t, z)?;
        Ok(t.value(l)?.item())
    })
}

pub fn pl_value(models: &[SourceModel], alpha: &[f64], x: &Tensor, labels: &[usize]) -> Result<f64> {
    with_aggregate(models, alpha, x, |t, z| {
        let l = pl_loss(t, z, labels)?;
        Ok(t.value(l)?.item())
    })
}

/// Entropy of a probability vector with `0 ln 0 = 0`.
pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().map(|&v| crate::autodiff::xlogx(v)).sum::<f64>()
}
