//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationConfig;
use crate::distill::StudentConfig;
use crate::domains::DomainSpec;
use crate::error::{Error, Result};
use crate::models::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub name: String,
    pub domain: DomainSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_hidden() -> usize {
    64
}

fn default_feature_dim() -> usize {
    16
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
        }
    }
}

/// Which rows of the comparison table to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodToggles {
    pub source_best: bool,
    pub source_worst: bool,
    pub shot_best: bool,
    pub shot_worst: bool,
    pub shot_ens: bool,
    pub uniform: bool,
    pub weights_only: bool,
    pub decision: bool,
    pub ablations: bool,
    pub distill: bool,
}

impl Default for MethodToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl MethodToggles {
    pub fn all() -> Self {
        Self {
            source_best: true,
            source_worst: true,
            shot_best: true,
            shot_worst: true,
            shot_ens: true,
            uniform: true,
            weights_only: true,
            decision: true,
            ablations: true,
            distill: true,
        }
    }

    pub fn none() -> Self {
        Self {
            source_best: false,
            source_worst: false,
            shot_best: false,
            shot_worst: false,
            shot_ens: false,
            uniform: false,
            weights_only: false,
            decision: false,
            ablations: false,
            distill: false,
        }
    }

    pub fn needs_single_source_runs(&self) -> bool {
        self.shot_best || self.shot_worst || self.shot_ens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed mixed into every derived seed.
    #[serde(default)]
    pub seed: u64,
    /// Fraction of each domain used for training; the rest is held out.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub sources: Vec<SourceEntry>,
    pub target: DomainSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub source_training: TrainConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default)]
    pub distill: StudentConfig,
    #[serde(default)]
    pub methods: MethodToggles,
    /// Extra full-objective runs at these pseudo-label weights.
    #[serde(default)]
    pub lambda_sweep: Vec<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("sources: at least one source domain is required".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1), got {}", self.train_fraction)));
        }
        let classes = self.target.num_classes();
        for (i, s) in self.sources.iter().enumerate() {
            s.domain
                .validate()
                .map_err(|e| Error::Config(format!("sources[{i}] ({}): {e}", s.name)))?;
            if s.domain.num_classes() != classes {
                return Err(Error::Config(format!(
                    "sources[{i}] ({}) has {} classes, target has {classes}",
                    s.name,
                    s.domain.num_classes()
                )));
            }
            if self.sources[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("sources[{i}]: duplicate name {:?}", s.name)));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("sources[{i}]: name {:?} is not a valid file stem", s.name)));
            }
        }
        self.target.validate().map_err(|e| Error::Config(format!("target: {e}")))?;
        if self.model.hidden == 0 || self.model.feature_dim == 0 {
            return Err(Error::Config("model: layer sizes must be positive".into()));
        }
        if self.source_training.batch_size == 0 {
            return Err(Error::Config("source_training.batch_size must be positive".into()));
        }
        self.adaptation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.distill.batch_size == 0 {
            return Err(Error::Config("distill.batch_size must be positive".into()));
        }
        if let Some(l) = self.lambda_sweep.iter().find(|l| !(**l >= 0.0)) {
            return Err(Error::Config(format!("lambda_sweep: {l} is not >= 0")));
        }
        Ok(())
    }

    /// Three clean rotated sources, one heavily label-corrupted source, and a
    /// target rotated between them.
    pub fn moons_3_plus_1() -> Self {
        let moons = |rotation_deg: f64, corruption: f64, samples: usize, seed: u64| DomainSpec {
            rotation: rotation_deg.to_radians(),
            noise: 0.1,
            label_corruption: corruption,
            ..DomainSpec::two_moons(samples, seed)
        };
        Self {
            seed: 0,
            train_fraction: default_train_fraction(),
            sources: vec![
                SourceEntry {
                    name: "rot0".into(),
                    domain: moons(0.0, 0.0, 1000, 1),
                },
                SourceEntry {
                    name: "rot20".into(),
                    domain: moons(20.0, 0.0, 1000, 2),
                },
                SourceEntry {
                    name: "rot40".into(),
                    domain: moons(40.0, 0.0, 1000, 3),
                },
                SourceEntry {
                    name: "outlier".into(),
                    domain: moons(0.0, 0.9, 1000, 4),
                },
            ],
            target: moons(30.0, 0.0, 2000, 5),
            model: ModelConfig::default(),
            source_training: TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
            adaptation: AdaptationConfig::default(),
            distill: StudentConfig {
                epochs: 100,
                ..StudentConfig::default()
            },
            methods: MethodToggles::all(),
            lambda_sweep: vec![0.0, 0.1, 0.3, 1.0],
            out_dir: None,
        }
    }
}
