//! AdamW with global-norm gradient clipping and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::params::{Gradients, ParamStore};
use crate::kernels::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

/// What a step did to the gradients, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        let zeros = |p: &ParamStore<F>| {
            p.iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One AdamW update. Parameters without a gradient still decay.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<StepReport> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::Shape(format!(
                        "gradient for {} is {:?}, parameter is {:?}",
                        params.name(id),
                        g.shape(),
                        params.get(id).shape()
                    )));
                }
            }
        }
        let norm = grads.global_norm().to_f64_lossy();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        let c = self.config;
        let clip_scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let decay = F::of(1.0 - c.lr * c.weight_decay);
        let step_size = F::of(c.lr / bias1);
        let inv_bias2_sqrt = F::of(1.0 / bias2.sqrt());
        let eps = F::of(c.eps);
        let scale = F::of(clip_scale);

        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            match grads.get(id) {
                Some(g) => {
                    for (((pv, mv), vv), &gv) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                        let gv = gv * scale;
                        *mv = b1 * *mv + one_b1 * gv;
                        *vv = b2 * *vv + one_b2 * gv * gv;
                        *pv *= decay;
                        *pv -= step_size * *mv / ((*vv).sqrt() * inv_bias2_sqrt + eps);
                    }
                }
                None => {
                    for ((pv, mv), vv) in p.iter_mut().zip(m).zip(v) {
                        *mv = b1 * *mv;
                        *vv = b2 * *vv;
                        *pv *= decay;
                        *pv -= step_size * *mv / ((*vv).sqrt() * inv_bias2_sqrt + eps);
                    }
                }
            }
        }
        Ok(StepReport {
            grad_norm: norm,
            clip_scale,
        })
    }
}
