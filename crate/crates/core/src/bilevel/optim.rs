use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// `θ ← θ − ξ ∇θ`, no weight decay.
    PlainSgd,
    /// AdamW with decoupled weight decay and bias correction.
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr · ½(1 + cos(π t / T))`.
    #[default]
    Cosine,
}

impl Schedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

/// First-order optimizer over a fixed, ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<S: Scalar> {
    pub mode: OptimizerMode,
    pub hp: AdamParams,
    pub step: u64,
    /// First and second moments, allocated on the first adaptive step.
    pub m: Vec<Array2<S>>,
    pub v: Vec<Array2<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(mode: OptimizerMode, hp: AdamParams) -> Self {
        Optimizer {
            mode,
            hp,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update with learning rate `lr`; `grads[i]` belongs to
    /// `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Array2<S>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.value.dim() != g.dim() {
                return Err(Error::shape(
                    "optimizer",
                    format!("parameter {i} is {:?}, gradient {:?}", p.value.dim(), g.dim()),
                ));
            }
        }
        let lr_s = S::of(lr);
        self.step += 1;
        match self.mode {
            OptimizerMode::PlainSgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.value.scaled_add(-lr_s, g);
                }
            }
            OptimizerMode::Adaptive => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
                    self.v = self.m.clone();
                } else if self.m.len() != grads.len() {
                    return Err(Error::shape("optimizer", "moment count differs from parameters"));
                }
                let AdamParams {
                    beta1,
                    beta2,
                    epsilon,
                    weight_decay,
                } = self.hp;
                let t = self.step as i32;
                let c1 = S::of(1.0 - beta1.powi(t));
                let c2 = S::of(1.0 - beta2.powi(t));
                let (b1, b2, eps, wd) = (S::of(beta1), S::of(beta2), S::of(epsilon), S::of(weight_decay));
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    ndarray::Zip::from(&mut p.value)
                        .and(g)
                        .and(m)
                        .and(v)
                        .for_each(|p, &g, m, v| {
                            *m = b1 * *m + (S::one() - b1) * g;
                            *v = b2 * *v + (S::one() - b2) * g * g;
                            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                            *p -= lr_s * (update + wd * *p);
                        });
                }
            }
        }
        Ok(())
    }
}
