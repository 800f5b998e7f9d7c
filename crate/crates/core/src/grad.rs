//! Gradient estimators and the AdamW optimizer.

use std::f64::consts::FRAC_PI_2;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{batch_loss, Batch, ModelParams, ParamSet};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMethod {
    ParamShift,
    Spsa,
    ReverseMode,
    FiniteDiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub grads: ParamSet,
    pub method: GradMethod,
    /// Circuit or loss evaluations spent.
    pub evaluations: usize,
}

/// Name under which vector-valued estimators store their result.
pub const VECTOR: &str = "x";

impl GradReport {
    fn vector(method: GradMethod, values: Vec<f64>, evaluations: usize) -> Self {
        let mut grads = ParamSet::new();
        grads.insert(VECTOR.to_string(), ArrayD::from_shape_vec(IxDyn(&[values.len()]), values).expect("1-d"));
        GradReport { grads, method, evaluations }
    }

    /// All gradient entries concatenated in tensor order.
    pub fn flat(&self) -> Vec<f64> {
        self.grads.values().flat_map(|t| t.iter().copied()).collect()
    }
}

/// `½[f(θ + π/2·e_k) − f(θ − π/2·e_k)]` for each k. Exact when every angle
/// enters a single RY rotation.
pub fn parameter_shift_grad<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64]) -> GradReport {
    let mut x = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        x[k] = theta[k] + FRAC_PI_2;
        let plus = f(&x);
        x[k] = theta[k] - FRAC_PI_2;
        let minus = f(&x);
        x[k] = theta[k];
        g.push(0.5 * (plus - minus));
    }
    GradReport::vector(GradMethod::ParamShift, g, 2 * theta.len())
}

/// Central differences with step `h`.
pub fn finite_difference_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> GradReport {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        p[k] = x[k] + h;
        let plus = f(&p);
        p[k] = x[k] - h;
        let minus = f(&p);
        p[k] = x[k];
        g.push((plus - minus) / (2.0 * h));
    }
    GradReport::vector(GradMethod::FiniteDiff, g, 2 * x.len())
}

pub fn rademacher<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// SPSA with a caller-supplied perturbation direction of ±1 entries.
pub fn spsa_grad_with_delta<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64, delta: &[f64]) -> Result<GradReport> {
    if !(eps > 0.0) {
        return Err(Error::validation("SPSA epsilon must be positive"));
    }
    if delta.len() != x.len() || delta.iter().any(|d| d.abs() != 1.0) {
        return Err(Error::validation("SPSA direction must be ±1 with one entry per parameter"));
    }
    let plus: Vec<f64> = x.iter().zip(delta).map(|(v, d)| v + eps * d).collect();
    let minus: Vec<f64> = x.iter().zip(delta).map(|(v, d)| v - eps * d).collect();
    let diff = f(&plus) - f(&minus);
    let g = delta.iter().map(|d| diff / (2.0 * eps * d)).collect();
    Ok(GradReport::vector(GradMethod::Spsa, g, 2))
}

/// SPSA with a Rademacher direction drawn from the keyed stream of `seed`.
pub fn spsa_grad<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], eps: f64, seed: u64) -> Result<GradReport> {
    let delta = rademacher(x.len(), &mut keyed_rng(seed, "spsa", 0));
    spsa_grad_with_delta(f, x, eps, &delta)
}

/// Exact gradients of the batch loss for every tensor outside the SPSA set.
pub fn reverse_mode_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, GradReport)> {
    let (loss, grads) = params.loss_and_classical_grads(batch)?;
    Ok((loss, GradReport { grads, method: GradMethod::ReverseMode, evaluations: 1 }))
}

/// SPSA over all tensors that feed quantum circuits, with one shared
/// direction for the batch drawn from `(seed, "spsa", step)`. The two loss
/// evaluations run concurrently.
pub fn spsa_model_grad(params: &ModelParams, batch: &Batch, eps: f64, seed: u64, step: u64) -> Result<GradReport> {
    let names = params.config.spsa_tensors();
    if names.is_empty() {
        return Ok(GradReport { grads: ParamSet::new(), method: GradMethod::Spsa, evaluations: 0 });
    }
    if !(eps > 0.0) {
        return Err(Error::validation("SPSA epsilon must be positive"));
    }
    let len: usize = names.iter().map(|n| params.tensors[*n].len()).sum();
    let delta = rademacher(len, &mut keyed_rng(seed, "spsa", step));
    let shifted = |sign: f64| {
        let mut p = params.clone();
        let mut offset = 0;
        for name in &names {
            let t = p.tensors.get_mut(*name).expect("spsa tensor");
            for v in t.iter_mut() {
                *v += sign * eps * delta[offset];
                offset += 1;
            }
        }
        batch_loss(&p, batch)
    };
    let (plus, minus) = rayon::join(|| shifted(1.0), || shifted(-1.0));
    let diff = plus? - minus?;
    let mut grads = ParamSet::new();
    let mut offset = 0;
    for name in names {
        let shape = params.tensors[name].raw_dim();
        let values: Vec<f64> = delta[offset..offset + params.tensors[name].len()]
            .iter()
            .map(|d| diff / (2.0 * eps * d))
            .collect();
        offset += values.len();
        grads.insert(name.to_string(), ArrayD::from_shape_vec(shape, values).expect("shape"));
    }
    Ok(GradReport { grads, method: GradMethod::Spsa, evaluations: 2 })
}

/// Rescales `g` to norm `max_norm` when it is larger; returns whether it did.
/// A relative slack of 1e-12 keeps re-clipping a clipped tensor a no-op.
pub fn clip_tensor(g: &mut ArrayD<f64>, max_norm: f64) -> bool {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm * (1.0 + 1e-12) {
        g.mapv_inplace(|v| v * max_norm / norm);
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-tensor gradient norm cap.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 0.005, weight_decay: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
    pub spsa_epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros: ParamSet = params.iter().map(|(k, t)| (k.clone(), ArrayD::zeros(t.raw_dim()))).collect();
        OptimizerState { config, step: 0, m: zeros.clone(), v: zeros, spsa_epsilon: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was non-finite; nothing changed.
    Skipped,
}

/// Clips each gradient tensor, then applies AdamW with decoupled weight
/// decay and bias correction to the tensors named in `grads`.
pub fn adamw_step(state: &mut OptimizerState, params: &mut ParamSet, grads: &ParamSet) -> Result<StepOutcome> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::validation(format!("gradient {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())))
            }
            None => return Err(Error::validation(format!("gradient for unknown tensor {name}"))),
        }
        if !state.m.contains_key(name) {
            return Err(Error::validation(format!("optimizer has no moments for {name}")));
        }
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        log::warn!("non-finite gradient in {name}; batch skipped");
        return Ok(StepOutcome::Skipped);
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - c.beta1.powi(t);
    let correction2 = 1.0 - c.beta2.powi(t);
    for (name, g) in grads {
        let mut g = g.clone();
        clip_tensor(&mut g, c.clip_norm);
        let p = params.get_mut(name).expect("checked");
        let m = state.m.get_mut(name).expect("checked");
        let v = state.v.get_mut(name).expect("checked");
        ndarray::Zip::from(p).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
            *p *= 1.0 - c.lr * c.weight_decay;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        });
    }
    Ok(StepOutcome::Applied)
}
