//! Weighted centroid pseudo-labeling.
//!
//! Round 0 builds per-source class centroids from soft predictions, combines
//! them with the aggregation weights and labels every target point by its
//! nearest centroid. Each refinement round rebuilds the centroids from the
//! previous hard labels. Everything here runs outside the tape: the labels
//! are constants for the gradient step that uses them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{check_compatible, SourceModel};
use crate::tensor::{argmin, Tensor};

/// How the distance from a point to a class is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// `sum_j alpha_j * ||phi_j(x) - mu_kj||^2`, each source in its own feature space.
    #[default]
    PerSource,
    /// `||sum_j alpha_j phi_j(x) - mu_k||^2` against the combined centroid.
    CombinedFeature,
}

/// Per-source features and softmax outputs on the whole target set.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceViews {
    pub features: Vec<Tensor>,
    pub probs: Vec<Tensor>,
}

impl SourceViews {
    pub fn compute(models: &[SourceModel], x: &Tensor) -> Result<Self> {
        check_compatible(models)?;
        let mut features = Vec::with_capacity(models.len());
        let mut probs = Vec::with_capacity(models.len());
        for m in models {
            let f = m.forward_features(x)?;
            probs.push(m.classifier.layer.forward(&f)?.softmax());
            features.push(f);
        }
        Ok(Self { features, probs })
    }

    pub fn sources(&self) -> usize {
        self.features.len()
    }

    pub fn points(&self) -> usize {
        self.features[0].rows()
    }

    pub fn classes(&self) -> usize {
        self.probs[0].cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].cols()
    }

    fn validate(&self, alpha: &[f64]) -> Result<()> {
        if self.features.is_empty() || self.features.len() != self.probs.len() {
            return Err(Error::InvalidArgument("need matching features and predictions for every source".into()));
        }
        if alpha.len() != self.sources() {
            return Err(Error::InvalidArgument(format!("{} weights for {} sources", alpha.len(), self.sources())));
        }
        let (n, k, d) = (self.points(), self.classes(), self.feature_dim());
        for (f, p) in self.features.iter().zip(&self.probs) {
            if f.rows() != n || p.rows() != n || p.cols() != k || f.cols() != d {
                return Err(Error::ShapeMismatch {
                    left: f.shape().to_vec(),
                    right: p.shape().to_vec(),
                    context: "source views",
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelState {
    /// One `K × d` centroid matrix per source.
    pub source_centroids: Vec<Tensor>,
    /// `sum_j alpha_j * source_centroids[j]`.
    pub centroids: Tensor,
    pub labels: Vec<usize>,
    /// 0 for soft centroids, then one more per refinement.
    pub round: usize,
    /// Weights the combined centroids were built with.
    pub alpha: Vec<f64>,
}

fn combine(source_centroids: &[Tensor], alpha: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(source_centroids[0].shape());
    for (c, &a) in source_centroids.iter().zip(alpha) {
        out.add_scaled(c, a).expect("centroid shapes agree");
    }
    out
}

/// Weighted feature means per class: `sum_x w_k(x) phi(x) / sum_x w_k(x)`.
/// Classes with zero total weight take the matching row of `fallback`.
fn weighted_means(features: &Tensor, weight: impl Fn(usize, usize) -> f64, classes: usize, fallback: Option<&Tensor>) -> Tensor {
    let d = features.cols();
    let mut sums = vec![0.0; classes * d];
    let mut mass = vec![0.0; classes];
    for i in 0..features.rows() {
        let f = features.row(i);
        for k in 0..classes {
            let w = weight(i, k);
            if w == 0.0 {
                continue;
            }
            mass[k] += w;
            for (s, &v) in sums[k * d..(k + 1) * d].iter_mut().zip(f) {
                *s += w * v;
            }
        }
    }
    for k in 0..classes {
        let row = &mut sums[k * d..(k + 1) * d];
        if mass[k] > 0.0 {
            row.iter_mut().for_each(|s| *s /= mass[k]);
        } else if let Some(fb) = fallback {
            row.copy_from_slice(fb.row(k));
        }
    }
    Tensor::new(vec![classes, d], sums).expect("positive dims")
}

/// Builds per-source and combined centroids for the given round. Round 0
/// weights each point by the source's own softmax; later rounds use the
/// indicator of `previous.labels`, keeping the previous centroid for a class
/// that received no points.
pub fn compute_centroids(
    views: &SourceViews,
    alpha: &[f64],
    round: usize,
    previous: Option<&PseudoLabelState>,
) -> Result<(Vec<Tensor>, Tensor)> {
    views.validate(alpha)?;
    let k = views.classes();
    let per_source: Vec<Tensor> = if round == 0 {
        views
            .features
            .iter()
            .zip(&views.probs)
            .map(|(f, p)| weighted_means(f, |i, c| p.get(i, c), k, None))
            .collect()
    } else {
        let prev = previous.ok_or_else(|| {
            Error::InvalidArgument(format!("round {round} needs the labels of round {}", round - 1))
        })?;
        if prev.labels.len() != views.points() {
            return Err(Error::InvalidArgument(format!(
                "{} previous labels for {} points",
                prev.labels.len(),
                views.points()
            )));
        }
        views
            .features
            .iter()
            .zip(&prev.source_centroids)
            .map(|(f, fb)| weighted_means(f, |i, c| if prev.labels[i] == c { 1.0 } else { 0.0 }, k, Some(fb)))
            .collect()
    };
    let combined = combine(&per_source, alpha);
    Ok((per_source, combined))
}

/// Squared distance from every point to every class centroid, `N × K`.
pub fn centroid_distances(views: &SourceViews, alpha: &[f64], source_centroids: &[Tensor], mode: DistanceMode) -> Result<Tensor> {
    views.validate(alpha)?;
    let (n, k, d) = (views.points(), views.classes(), views.feature_dim());
    let mut dist = vec![0.0; n * k];
    match mode {
        DistanceMode::PerSource => {
            for ((f, mu), &a) in views.features.iter().zip(source_centroids).zip(alpha) {
                for i in 0..n {
                    for c in 0..k {
                        dist[i * k + c] += a * sq_dist(f.row(i), mu.row(c));
                    }
                }
            }
        }
        DistanceMode::CombinedFeature => {
            let combined_mu = combine(source_centroids, alpha);
            let mut fx = vec![0.0; d];
            for i in 0..n {
                fx.iter_mut().for_each(|v| *v = 0.0);
                for (f, &a) in views.features.iter().zip(alpha) {
                    for (o, &v) in fx.iter_mut().zip(f.row(i)) {
                        *o += a * v;
                    }
                }
                for c in 0..k {
                    dist[i * k + c] = sq_dist(&fx, combined_mu.row(c));
                }
            }
        }
    }
    Tensor::new(vec![n, k], dist)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-centroid labels; ties go to the smaller class index.
pub fn assign_pseudo_labels(views: &SourceViews, alpha: &[f64], source_centroids: &[Tensor], mode: DistanceMode) -> Result<Vec<usize>> {
    let dist = centroid_distances(views, alpha, source_centroids, mode)?;
    Ok(dist.data().chunks(dist.cols()).map(argmin).collect())
}

/// Round 0 plus `refinement_rounds` indicator rounds.
pub fn pseudo_label(views: &SourceViews, alpha: &[f64], refinement_rounds: usize, mode: DistanceMode) -> Result<PseudoLabelState> {
    let mut state: Option<PseudoLabelState> = None;
    for round in 0..=refinement_rounds {
        let (source_centroids, centroids) = compute_centroids(views, alpha, round, state.as_ref())?;
        let labels = assign_pseudo_labels(views, alpha, &source_centroids, mode)?;
        state = Some(PseudoLabelState {
            source_centroids,
            centroids,
            labels,
            round,
            alpha: alpha.to_vec(),
        });
    }
    Ok(state.expect("at least round 0"))
}

/// Computes views for `models` on `x` and runs [`pseudo_label`].
pub fn pseudo_label_models(
    models: &[SourceModel],
    alpha: &[f64],
    x: &Tensor,
    refinement_rounds: usize,
    mode: DistanceMode,
) -> Result<PseudoLabelState> {
    pseudo_label(&SourceViews::compute(models, x)?, alpha, refinement_rounds, mode)
}
