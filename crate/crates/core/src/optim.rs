//! SGD, Adam and AdaBound over flat collections of parameter tensors.
//!
//! AdaBound clips Adam's per-coordinate step size `lr / (sqrt(v_hat) + eps)`
//! into a band `[lower(k), upper(k)]` that starts wide and closes on
//! `final_lr`, so early updates behave like Adam and late updates like SGD
//! with momentum. The band is exposed through [`bound_schedule`] and every
//! update records the step sizes it actually applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub final_lr: f64,
    pub bound_gamma: f64,
    /// SGD momentum; ignored by Adam and AdaBound.
    pub momentum: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr: 0.1,
            bound_gamma: 1e-3,
            momentum: 0.0,
        }
    }
}

impl OptimHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("final_lr", self.final_lr),
            ("bound_gamma", self.bound_gamma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        let unit = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ];
        for (name, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adabound,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adabound" => Ok(OptimizerKind::Adabound),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Moment accumulators and step counter for one parameter collection.
///
/// `m` doubles as the momentum buffer for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step_size: Vec<Tensor>,
    pub hyper: OptimHyper,
}

impl OptimizerState {
    pub fn new(hyper: OptimHyper) -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            step_size: Vec::new(),
            hyper,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    /// Per-coordinate learning rate applied by the most recent update
    /// (before multiplication with the update direction).
    pub fn last_step_sizes(&self) -> &[Tensor] {
        &self.step_size
    }

    fn begin(&mut self, params: &[&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        self.hyper.validate()?;
        if params.len() != grads.len() {
            return Err(Error::shape(&[params.len()], &[grads.len()], "parameter vs gradient count"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(p.shape(), g.shape(), "parameter vs gradient"));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros_like(g)).collect();
            self.v = self.m.clone();
            self.step_size = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::invalid("gradient layout changed between optimizer steps"));
        }
        self.step += 1;
        Ok(())
    }
}

/// Band `(lower, upper)` that AdaBound clips step sizes into at `step` (1-based).
pub fn bound_schedule(step: u64, hyper: &OptimHyper) -> Result<(f64, f64)> {
    if step < 1 {
        return Err(Error::invalid("bound schedule is defined for step >= 1"));
    }
    let k = step as f64;
    let lower = hyper.final_lr * (1.0 - 1.0 / (hyper.bound_gamma * k + 1.0));
    let upper = hyper.final_lr * (1.0 + 1.0 / (hyper.bound_gamma * k));
    Ok((lower, upper))
}

pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimizerState) -> Result<()> {
    state.begin(params, grads)?;
    let OptimHyper { lr, momentum, .. } = state.hyper;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let buf = state.m[i].data_mut();
        for ((theta, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
            *b = momentum * *b + gi;
            *theta -= lr * *b;
        }
        state.step_size[i].fill(lr);
    }
    Ok(())
}

pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimizerState) -> Result<()> {
    adaptive_step(params, grads, state, false)
}

pub fn adabound_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimizerState) -> Result<()> {
    adaptive_step(params, grads, state, true)
}

fn adaptive_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    bounded: bool,
) -> Result<()> {
    state.begin(params, grads)?;
    let h = state.hyper;
    let k = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(k);
    let bc2 = 1.0 - h.beta2.powi(k);
    let band = if bounded {
        Some(bound_schedule(state.step, &h)?)
    } else {
        None
    };
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let sizes = state.step_size[i].data_mut();
        for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let mut eta = h.lr / (v_hat.sqrt() + h.eps);
            if let Some((lower, upper)) = band {
                eta = eta.clamp(lower, upper);
            }
            sizes[j] = eta;
            *theta -= eta * m_hat;
        }
    }
    Ok(())
}

/// Unclipped Adam step sizes implied by the current moments, without updating anything.
pub fn adam_step_sizes(state: &OptimizerState) -> Vec<Tensor> {
    let h = state.hyper;
    let bc2 = 1.0 - h.beta2.powi(state.step.max(1) as i32);
    state
        .v
        .iter()
        .map(|v| v.map(|vj| h.lr / ((vj / bc2).sqrt() + h.eps)))
        .collect()
}

/// An optimizer kind bound to its state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: OptimHyper) -> Self {
        Self {
            kind,
            state: OptimizerState::new(hyper),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, &mut self.state),
            OptimizerKind::Adam => adam_step(params, grads, &mut self.state),
            OptimizerKind::Adabound => adabound_step(params, grads, &mut self.state),
        }
    }
}
