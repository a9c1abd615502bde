use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Adam with per-coordinate step sizes capped by their running average.
    AdaMod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    /// Multiplier applied at each milestone.
    pub decay: f64,
    /// Epochs at which the rate is decayed, ascending. Entries at or past
    /// `epochs` never fire.
    pub milestones: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty added to the gradient of convolution weights only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Smoothing of the AdaMod step-size bound.
    pub beta3: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            base_lr: 5e-3,
            decay: 0.1,
            milestones: vec![80, 90, 100],
            epochs: 110,
            batch_size: 32,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            beta3: 0.999,
        }
    }
}

impl OptimizerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("optimizer.epochs and optimizer.batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite())
            || !(self.decay > 0.0)
            || self.weight_decay < 0.0
        {
            return bad(
                "optimizer.base_lr, decay and weight_decay must be finite and non-negative".into(),
            );
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "optimizer.milestones must be strictly ascending, got {:?}",
                self.milestones
            ));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("optimizer.{name} must lie in [0, 1), got {b}"));
            }
        }
        Ok(())
    }

    /// `base_lr * decay^k` where `k` counts milestones `<= epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.decay.powi(k as i32)
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    bound: Vec<f64>,
}

/// Adaptive-moment optimizer over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    moments: Vec<Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                let n = p.tensor.numel();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    bound: if cfg.kind == OptimizerKind::AdaMod {
                        vec![0.0; n]
                    } else {
                        Vec::new()
                    },
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            moments,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients stored on `params`. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::invalid(
                "optimizer",
                "parameter store changed since construction",
            ));
        }
        if let Some(p) = params.iter().find(|p| {
            p.tensor
                .grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
        }) {
            return Err(Error::Training(format!(
                "non-finite gradient in `{}`",
                p.name
            )));
        }
        self.steps += 1;
        let c = &self.cfg;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (p, st) in params.iter_mut().zip(&mut self.moments) {
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            let decay = if p.kind == ParamKind::Conv {
                c.weight_decay
            } else {
                0.0
            };
            let w = p.tensor.data_mut();
            for (i, (w, g)) in w.iter_mut().zip(&grad).enumerate() {
                let g = g + decay * *w;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let mut rate = lr / ((st.v[i] / bc2).sqrt() + c.eps);
                if c.kind == OptimizerKind::AdaMod {
                    st.bound[i] = c.beta3 * st.bound[i] + (1.0 - c.beta3) * rate;
                    rate = rate.min(st.bound[i]);
                }
                *w -= rate * st.m[i] / bc1;
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}
