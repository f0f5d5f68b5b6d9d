use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NnError, Result};
use crate::graph::Grads;
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique identity of a parameter, used to route gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor together with its Adam moment estimates.
///
/// Values and moments are kept on the `f32` grid so that a parameter written
/// to disk as 32-bit floats reloads bit-exactly.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    /// Frozen parameters enter graphs as constants and are skipped by the optimizer.
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut value: Tensor) -> Self {
        value.round_to_f32();
        let shape = value.shape().to_vec();
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
            frozen: false,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

impl Clone for Parameter {
    /// Clones receive a fresh identity so both copies can appear in one graph.
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.step,
            frozen: self.frozen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Applies one bias-corrected Adam update to every non-frozen parameter.
    ///
    /// All gradients are validated first; if any is non-finite nothing is
    /// modified. Parameters without a gradient (unused in the graph) are
    /// treated as having a zero gradient.
    pub fn step(&self, params: &mut [&mut Parameter], grads: &Grads) -> Result<()> {
        let mut updates = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if p.frozen {
                continue;
            }
            match grads.param(p) {
                Some(g) if !g.is_finite() => return Err(NnError::NonFiniteGradient(p.name.clone())),
                g => updates.push((i, g)),
            }
        }
        for (i, g) in updates {
            let zero;
            let g = match g {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; params[i].value.numel()];
                    &zero[..]
                }
            };
            self.apply(params[i], g);
        }
        Ok(())
    }

    /// Update a single parameter from a raw gradient slice.
    pub fn apply(&self, p: &mut Parameter, grad: &[f64]) {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let Parameter { value, m, v, .. } = p;
        for (((w, m), v), &g) in value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(grad)
        {
            *m = (self.beta1 * *m + (1.0 - self.beta1) * g) as f32 as f64;
            *v = (self.beta2 * *v + (1.0 - self.beta2) * g * g) as f32 as f64;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = (*w - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32 as f64;
        }
    }
}
