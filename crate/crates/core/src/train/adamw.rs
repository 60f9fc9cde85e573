//! AdamW with decoupled weight decay and global-norm gradient clipping.

use ndarray::{ArrayD, ArrayViewMutD};

use crate::error::{Error, Result};
use crate::model::layers::cast;
use crate::model::{MaeParams, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Decay applies to linear-layer weights only; biases, norm parameters and
/// the mask token are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// One AdamW update of a flat parameter slice. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) {
    let b1 = cast::<F>(cfg.beta1);
    let b2 = cast::<F>(cfg.beta2);
    let one = F::one();
    let bc1 = cast::<F>(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = cast::<F>(1.0 - cfg.beta2.powi(step as i32));
    let lr_f = cast::<F>(lr);
    let eps = cast::<F>(cfg.eps);
    let shrink = cast::<F>(1.0 - lr * weight_decay);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *p = *p * shrink;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr_f * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamConfig,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &MaeParams<F>, config: AdamConfig) -> Self {
        let zeros: Vec<ArrayD<F>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut MaeParams<F>,
        grads: &MaeParams<F>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let gs = grads.tensors();
        for (((name, mut p), (_, g)), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(gs.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let wd = if decays(&name) { weight_decay } else { 0.0 };
            let p = p.as_slice_mut().expect("parameters are contiguous");
            let g = g.as_slice().expect("gradients are contiguous");
            adamw_update(
                p,
                g,
                m.as_slice_mut().expect("contiguous"),
                v.as_slice_mut().expect("contiguous"),
                self.step,
                lr,
                wd,
                &self.config,
            );
        }
    }
}

/// Rescales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<F: Real>(grads: &mut [ArrayViewMutD<'_, F>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config("max_norm must be positive"));
    }
    let mut sq = 0.0f64;
    for t in grads.iter() {
        for v in t.iter() {
            let x = v.to_f64().unwrap_or(f64::NAN);
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        let bad = grads
            .iter()
            .position(|t| t.iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::Divergence(format!(
            "non-finite gradient (tensor #{bad}, global norm {norm})"
        )));
    }
    if norm > max_norm {
        let s = cast::<F>(max_norm / norm);
        for t in grads.iter_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }
    Ok(norm)
}
