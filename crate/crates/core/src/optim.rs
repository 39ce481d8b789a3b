//! Adam and plain SGD, plus the Gabor bound projection run after each step.

use crate::error::{Error, Result};
use crate::gabor::{GaborParamSet, OMEGA_MIN, SIGMA_MIN};
use crate::layers::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub moments: Vec<Moments>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            moments: sizes.iter().map(|&n| Moments::zeros(n)).collect(),
            t: 0,
        }
    }
}

fn check_grads<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter tensor {i} has non-finite element {j}"
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update with the given learning rate. The step is
/// refused before any state changes if a gradient is non-finite.
pub fn adam_step(
    state: &mut AdamState,
    lr: f64,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    for ((p, g), mom) in params.iter().zip(grads).zip(&state.moments) {
        if p.len() != g.len() || p.len() != mom.m.len() {
            return Err(Error::Shape(format!(
                "adam: parameter of {} elements with gradient of {}",
                p.len(),
                g.len()
            )));
        }
    }
    check_grads(grads.iter().copied())?;

    state.t += 1;
    let AdamConfig {
        beta1, beta2, eps, ..
    } = state.config;
    let t = state.t as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    for ((p, g), mom) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        for i in 0..p.len() {
            let gi = g[i];
            mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
            mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = mom.m[i] / correction1;
            let v_hat = mom.v[i] / correction2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step(lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape("sgd: parameters and gradients differ".into()));
    }
    check_grads(grads.iter().copied())?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, gi) in p.iter_mut().zip(*g) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// Clamps σ and ω to their lower bounds; θ and ψ are left as they are.
pub fn project_gabor_constraints(set: &mut GaborParamSet) {
    for p in set.params_mut() {
        p.sigma = p.sigma.max(SIGMA_MIN);
        p.omega = p.omega.max(OMEGA_MIN);
    }
}

/// Step decay: the learning rate is multiplied by `factor` once the given
/// (1-based) epoch is reached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LrSchedule {
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(at, _)| epoch >= *at)
            .fold(base, |lr, (_, f)| lr * f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(config: AdamConfig, params: &[&Param]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Optimizer::Adam(AdamState::new(config, &sizes))
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            Optimizer::Adam(s) => s.config.lr,
            Optimizer::Sgd { lr } => *lr,
        }
    }

    /// Applies one update using each parameter's accumulated gradient.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Param]) -> Result<()> {
        let mut values = Vec::with_capacity(params.len());
        let mut grads = Vec::with_capacity(params.len());
        for p in params.iter_mut() {
            let Param { value, grad, .. } = &mut **p;
            values.push(value.as_mut_slice());
            grads.push(grad.as_slice());
        }
        match self {
            Optimizer::Adam(state) => adam_step(state, lr, &mut values, &grads),
            Optimizer::Sgd { .. } => sgd_step(lr, &mut values, &grads),
        }
    }
}
