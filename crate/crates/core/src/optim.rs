//! SGD with momentum and coupled weight decay, plus the annealing schedule
//! used for both source training and adaptation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-3;

/// Hyperparameters of one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
struct Group {
    config: GroupConfig,
    velocity: Vec<Tensor>,
}

/// Momentum SGD over several parameter groups.
///
/// Update per parameter: `v = momentum * v + (g + wd * p)`, then `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    momentum: f64,
    groups: Vec<Group>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            momentum,
            groups: Vec::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Registers a group whose parameters have the given shapes; returns its index.
    pub fn add_group(&mut self, config: GroupConfig, shapes: &[&[usize]]) -> Result<usize> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        if !(config.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be nonnegative, got {}",
                config.weight_decay
            )));
        }
        self.groups.push(Group {
            config,
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        });
        Ok(self.groups.len() - 1)
    }

    pub fn group_config(&self, group: usize) -> GroupConfig {
        self.groups[group].config
    }

    /// Applies one step to a group. `lr_factor` scales the group's base rate
    /// (the schedule multiplier).
    pub fn step(&mut self, group: usize, params: &mut [&mut Tensor], grads: &[&Tensor], lr_factor: f64) -> Result<()> {
        let momentum = self.momentum;
        let g = self
            .groups
            .get_mut(group)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter group {group}")))?;
        if params.len() != g.velocity.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "group {group} has {} parameters, got {} params and {} grads",
                g.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = g.config.lr * lr_factor;
        let wd = g.config.weight_decay;
        for ((p, grad), v) in params.iter_mut().zip(grads).zip(g.velocity.iter_mut()) {
            if p.shape() != grad.shape() || p.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    left: p.shape().to_vec(),
                    right: grad.shape().to_vec(),
                    context: "sgd_step",
                });
            }
            let pd = p.data_mut();
            for ((pv, &gv), vv) in pd.iter_mut().zip(grad.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Annealed learning rate `initial * (1 + 10 p)^(-0.75)` at progress `p` in `[0, 1]`.
pub fn lr_schedule(initial: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    initial * (1.0 + 10.0 * p).powf(-0.75)
}
