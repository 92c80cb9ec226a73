//! Comparison methods built from independently adapted single-source models.

use crate::error::{Error, Result};
use crate::models::{check_compatible, SourceModel};
use crate::tensor::{argmax, Tensor};

/// Mean of the per-model softmax outputs.
pub fn mean_softmax(models: &[SourceModel], x: &Tensor) -> Result<Tensor> {
    check_compatible(models)?;
    let mut total: Option<Tensor> = None;
    for m in models {
        let p = m.forward_logits(x)?.softmax();
        match &mut total {
            None => total = Some(p),
            Some(t) => t.add_scaled(&p, 1.0)?,
        }
    }
    let n = models.len() as f64;
    Ok(total.ok_or(Error::Empty("models"))?.map(|v| v / n))
}

/// Uniform average of soft predictions followed by argmax; ties go to the
/// smaller class index.
pub fn shot_ens(models: &[SourceModel], x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_of_probs(&mean_softmax(models, x)?))
}

/// Argmax over rows of an already averaged probability matrix.
pub fn argmax_of_probs(p: &Tensor) -> Vec<usize> {
    p.data().chunks(p.cols()).map(argmax).collect()
}
