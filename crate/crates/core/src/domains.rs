//! Synthetic domains with controllable shift, batching and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Center of the canonical two-moons layout; generated moons are shifted so
/// this point sits at the origin before rotation.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    TwoMoons,
    GaussianMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub generator: Generator,
    /// Class count for the Gaussian mixture; two-moons always has 2.
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Counter-clockwise rotation in radians about the origin.
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub translation: [f64; 2],
    #[serde(default)]
    pub noise: f64,
    /// Probability that a label is resampled uniformly.
    #[serde(default)]
    pub label_corruption: f64,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}

impl DomainSpec {
    pub fn two_moons(samples: usize, seed: u64) -> Self {
        Self {
            generator: Generator::TwoMoons,
            classes: 2,
            rotation: 0.0,
            translation: [0.0, 0.0],
            noise: 0.0,
            label_corruption: 0.0,
            samples,
            seed,
        }
    }

    pub fn gaussian_mixture(classes: usize, samples: usize, seed: u64) -> Self {
        Self {
            generator: Generator::GaussianMixture,
            classes,
            noise: 1.0,
            ..Self::two_moons(samples, seed)
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.generator {
            Generator::TwoMoons => 2,
            Generator::GaussianMixture => self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("domain needs at least one sample".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.label_corruption) {
            return Err(Error::InvalidArgument(format!(
                "label corruption must be in [0, 1], got {}",
                self.label_corruption
            )));
        }
        if self.generator == Generator::GaussianMixture && self.classes < 1 {
            return Err(Error::InvalidArgument("gaussian mixture needs at least one class".into()));
        }
        if !self.rotation.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("rotation and translation must be finite".into()));
        }
        Ok(())
    }
}

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Inputs only. The adaptation API accepts nothing else for the target.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub inputs: Tensor,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
                context: "inputs vs labels",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self { inputs, labels, classes })
    }

    /// A set with no rows. `Tensor` cannot have a zero dimension, so this
    /// carries a placeholder row that is never exposed through `len`.
    pub fn empty(input_dim: usize, classes: usize) -> Self {
        Self {
            inputs: Tensor::zeros(&[1, input_dim]),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Ok(Self::empty(self.input_dim(), self.classes));
        }
        Self::new(
            self.inputs.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            inputs: self.inputs.clone(),
        }
    }

    /// Seeded split into `(first, second)` with `round(len * fraction)` rows first.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.len();
        let cut = ((n as f64) * fraction).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&order[..cut])?, self.subset(&order[cut..])?))
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }
}

pub fn generate_domain(spec: &DomainSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes();
    let n = spec.samples;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    match spec.generator {
        Generator::TwoMoons => {
            let upper = n.div_ceil(2);
            for i in 0..n {
                let t = rng.random_range(0.0..=std::f64::consts::PI);
                let (x, y, label) = if i < upper {
                    (t.cos(), t.sin(), 0)
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin(), 1)
                };
                points.push([x - MOONS_CENTER[0], y - MOONS_CENTER[1]]);
                labels.push(label);
            }
        }
        Generator::GaussianMixture => {
            for i in 0..n {
                let c = i % k;
                let angle = std::f64::consts::TAU * c as f64 / k as f64;
                points.push([2.0 * angle.cos(), 2.0 * angle.sin()]);
                labels.push(c);
            }
        }
    }

    if spec.noise > 0.0 {
        for p in &mut points {
            p[0] += noise.sample(&mut rng);
            p[1] += noise.sample(&mut rng);
        }
    }

    let (s, c) = spec.rotation.sin_cos();
    for p in &mut points {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y + spec.translation[0];
        p[1] = s * x + c * y + spec.translation[1];
    }

    if spec.label_corruption > 0.0 {
        for y in &mut labels {
            if rng.random_bool(spec.label_corruption) {
                *y = rng.random_range(0..k);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let data = order.iter().flat_map(|&i| points[i]).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    LabeledSet::new(Tensor::new(vec![n, 2], data)?, labels, k)
}

/// Seeded permutation of `0..len` cut into batches; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CsvData {
    Labeled(LabeledSet),
    Unlabeled(UnlabeledSet),
}

/// Reads a numeric CSV with a header row. A final column named `label` holds
/// integer classes; otherwise the file is unlabeled.
pub fn load_csv(path: &Path) -> Result<CsvData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let labeled = headers.iter().next_back() == Some("label");
    let width = headers.len();
    let features = if labeled { width - 1 } else { width };
    if features == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for cell in record.iter().take(features) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            data.push(v);
        }
        if labeled {
            let cell = &record[features];
            let y: usize = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("label {cell:?} is not a nonnegative integer"),
            })?;
            labels.push(y);
        }
    }
    let rows = data.len() / features;
    if rows == 0 {
        return Err(Error::Empty("csv file has no data rows"));
    }
    let inputs = Tensor::new(vec![rows, features], data)?;
    if labeled {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(CsvData::Labeled(LabeledSet::new(inputs, labels, classes)?))
    } else {
        Ok(CsvData::Unlabeled(UnlabeledSet { inputs }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let set = generate_domain(&DomainSpec::two_moons(101, 4)).unwrap();
        for i in 0..set.len() {
            let (x, y) = (set.inputs.get(i, 0) + MOONS_CENTER[0], set.inputs.get(i, 1) + MOONS_CENTER[1]);
            let r = if set.labels[i] == 0 {
                (x * x + y * y).sqrt()
            } else {
                ((x - 1.0).powi(2) + (y - 0.5).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-12, "row {i}: radius {r}");
        }
    }

    #[test]
    fn even_moons_are_balanced_under_rotation() {
        for angle in [0.0, 0.3, 1.2] {
            let spec = DomainSpec {
                rotation: angle,
                noise: 0.1,
                ..DomainSpec::two_moons(200, 9)
            };
            let set = generate_domain(&spec).unwrap();
            assert_eq!(set.labels.iter().filter(|&&y| y == 0).count(), 100);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec {
            noise: 0.2,
            label_corruption: 0.3,
            ..DomainSpec::two_moons(64, 1)
        };
        assert_eq!(generate_domain(&spec).unwrap(), generate_domain(&spec).unwrap());
        let other = DomainSpec { seed: 2, ..spec.clone() };
        assert_ne!(generate_domain(&spec).unwrap(), generate_domain(&other).unwrap());
    }

    #[test]
    fn seed_changes_preserve_statistics() {
        // Noiseless unrotated moons have mean exactly at the origin in
        // expectation; the sample mean of x has std <= 1/sqrt(n) per axis.
        let n = 2000;
        for seed in 0..5 {
            let set = generate_domain(&DomainSpec::two_moons(n, seed)).unwrap();
            let mean = set.inputs.mean_rows();
            for &m in mean.data() {
                assert!(m.abs() < 3.0 / (n as f64).sqrt(), "seed {seed}: mean {m}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = DomainSpec::two_moons(0, 0);
        assert!(generate_domain(&spec).is_err());
        spec.samples = 10;
        spec.label_corruption = 1.5;
        assert!(generate_domain(&spec).is_err());
        spec.label_corruption = 0.0;
        spec.noise = -1.0;
        assert!(generate_domain(&spec).is_err());
    }

    #[test]
    fn batches_partition_the_data() {
        let short = batch_iter(10, 32, 0);
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].len(), 10);

        let batches = batch_iter(103, 10, 5);
        assert_eq!(batches.len(), 11);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());

        let a = batch_iter(50, 7, 1).concat();
        let b = batch_iter(50, 7, 2).concat();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
    }

    #[test]
    fn split_is_a_partition() {
        let set = generate_domain(&DomainSpec::two_moons(50, 3)).unwrap();
        let (a, b) = set.split(0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_labeled_and_unlabeled() {
        let f = write_tmp("x0,x1,label\n0.5,1.0,0\n-1,2,1\n3,4,1\n");
        match load_csv(f.path()).unwrap() {
            CsvData::Labeled(set) => {
                assert_eq!(set.len(), 3);
                assert_eq!(set.labels, vec![0, 1, 1]);
                assert_eq!(set.inputs.row(1), &[-1.0, 2.0]);
            }
            other => panic!("expected labeled, got {other:?}"),
        }
        let f = write_tmp("x0,x1\n0.5,1.0\n-1,2\n");
        assert!(matches!(load_csv(f.path()).unwrap(), CsvData::Unlabeled(u) if u.len() == 2));
    }

    #[test]
    fn csv_error_names_line() {
        let f = write_tmp("x0,x1,label\n1,1,0\n2,2,1\n3,3,0\n4,4,1\n5,5,0\nbad,6,1\n");
        match load_csv(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(load_csv(Path::new("/nonexistent/file.csv")), Err(Error::Io(_))));
    }
}
