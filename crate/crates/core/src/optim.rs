//! Adam with global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};

use crate::error::Result;

pub struct Optimizer {
    inner: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, lr: f64, eps: f64, clip: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Backpropagates `loss`, clips this optimizer's gradients to the
    /// configured global norm and applies one update. Returns the
    /// pre-clipping norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = clip_grad_norm(&mut grads, &self.vars, self.clip)?;
        self.inner.step(&grads)?;
        Ok(norm)
    }
}

/// Scales the gradients of `vars` so their joint L2 norm is at most `clip`.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], clip: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm.is_finite() {
        let scale = clip / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}
