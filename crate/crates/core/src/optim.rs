//! First-order optimizers over a model's parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Gradient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerConfig::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::InvalidConfig(format!("optimizer betas must lie in [0, 1), got {beta1}, {beta2}")));
            }
            if !(eps > 0.0) {
                return Err(Error::InvalidConfig(format!("optimizer.eps must be positive, got {eps}")));
            }
        }
        Ok(())
    }
}

/// Optimizer state. Shapes are fixed on first use; call [`Optimizer::reset`]
/// whenever the parameter blocks change shape.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place and returns the Euclidean norm of the
    /// parameter change.
    pub fn step(&mut self, params: &mut [&mut [f64]], grad: &Gradient, lr: f64) -> Result<f64> {
        if params.len() != grad.blocks.len() {
            return Err(Error::LengthMismatch { expected: params.len(), got: grad.blocks.len() });
        }
        for (p, g) in params.iter().zip(&grad.blocks) {
            if p.len() != g.len() {
                return Err(Error::LengthMismatch { expected: p.len(), got: g.len() });
            }
        }
        self.t += 1;
        let mut sq = 0.0;
        match self.cfg {
            OptimizerConfig::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad.blocks) {
                    for (w, gi) in p.iter_mut().zip(g) {
                        let d = lr * gi;
                        *w -= d;
                        sq += d * d;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grad.blocks.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                if self.m.iter().zip(&grad.blocks).any(|(m, g)| m.len() != g.len()) {
                    return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(&grad.blocks).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let d = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        p[i] -= d;
                        sq += d * d;
                    }
                }
            }
        }
        Ok(sq.sqrt())
    }
}

/// Constant learning rate, optionally multiplied by `factor` every `every`
/// steps within a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

pub fn learning_rate_at(base: f64, decay: Option<StepDecay>, step: usize) -> f64 {
    match decay {
        Some(d) if d.every > 0 => base * d.factor.powi((step / d.every) as i32),
        _ => base,
    }
}
