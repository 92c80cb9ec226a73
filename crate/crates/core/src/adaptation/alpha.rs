//! Aggregation weights on the probability simplex.
//!
//! The optimizer works on unconstrained raw values. After every step the
//! normalized view is rebuilt by squashing each raw value through a sigmoid
//! and dividing by the total, so the weights handed to the next forward pass
//! are always nonnegative and sum to one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `s_j = sigmoid(raw_j)`, `alpha_j = s_j / sum_i s_i`.
pub fn alpha_project(raw: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = raw.iter().map(|&r| sigmoid(r)).collect();
    let total: f64 = s.iter().sum();
    s.iter().map(|v| v / total).collect()
}

/// Same projection recorded on the tape so gradients reach the raw values.
pub fn alpha_project_on_tape(tape: &mut Tape, raw: Var) -> Result<Var> {
    let s = tape.sigmoid(raw)?;
    let total = tape.sum(s)?;
    tape.div_scalar(s, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    raw: Vec<f64>,
    alpha: Vec<f64>,
}

impl AggregationWeights {
    /// Raw values all zero, so the projected weights are exactly uniform.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("aggregation weights"));
        }
        Ok(Self::from_raw(vec![0.0; n]))
    }

    pub fn from_raw(raw: Vec<f64>) -> Self {
        let alpha = alpha_project(&raw);
        Self { raw, alpha }
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_tensor(&self) -> Tensor {
        Tensor::vector(self.raw.clone()).expect("nonempty weights")
    }

    /// Replaces the raw values and recomputes the normalized view.
    pub fn set_raw(&mut self, raw: Vec<f64>) {
        self.alpha = alpha_project(&raw);
        self.raw = raw;
    }

    /// Largest deviation of the weight total from one, and the smallest weight.
    pub fn simplex_error(&self) -> (f64, f64) {
        simplex_error(&self.alpha)
    }
}

pub fn simplex_error(alpha: &[f64]) -> (f64, f64) {
    let total: f64 = alpha.iter().sum();
    let min = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    ((total - 1.0).abs(), min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_raw_is_uniform() {
        assert_eq!(alpha_project(&[0.0, 0.0]), vec![0.5, 0.5]);
        let w = AggregationWeights::uniform(4).unwrap();
        assert_eq!(w.alpha(), &[0.25; 4]);
    }

    #[test]
    fn saturation_keeps_total_one() {
        let a = alpha_project(&[40.0, -40.0]);
        assert!((a[0] - 1.0).abs() < 1e-15);
        assert!(a[1] > 0.0 && a[1] < 1e-17);
        assert_eq!(a[0] + a[1], 1.0);
    }

    #[test]
    fn tape_projection_matches() {
        let raw = vec![0.3, -1.2, 2.0];
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(raw.clone()).unwrap());
        let a = alpha_project_on_tape(&mut tape, v).unwrap();
        let got = tape.value(a).unwrap().data().to_vec();
        for (g, e) in got.iter().zip(alpha_project(&raw)) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn projection_lands_on_simplex(raw in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let a = alpha_project(&raw);
            let (err, min) = simplex_error(&a);
            prop_assert!(err < 1e-12);
            prop_assert!(min >= 0.0);
        }
    }
}
