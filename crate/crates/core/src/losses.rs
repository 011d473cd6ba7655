//! Cross-entropy, focal and cross-entropy weighted focal (CEWF) losses.
//!
//! Each loss exists in two forms: a scalar function of the true-class
//! probability `p` (used for curve tables and property checks) and a batched
//! form over logits that also returns the analytic gradient.
//!
//! CEWF mixes the two baselines per sample:
//!
//! ```text
//! CEWF(p) = (1 - s) * CE(p) + s * Focal(p),   s = e^{pt} / (e^{pt} + e^{(1-p)t})
//! ```
//!
//! and `s` is evaluated as `sigmoid(t * (2p - 1))`, which is the same quantity
//! without the overflow of `e^{pt}` for large `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax_into, Tensor};

pub const DEFAULT_PROB_FLOOR: f64 = 1e-7;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_T: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Focal,
    Cewf,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "focal" => Ok(LossKind::Focal),
            "cewf" => Ok(LossKind::Cewf),
            other => Err(Error::invalid(format!("unknown loss `{other}`"))),
        }
    }
}

/// Loss selector plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focusing exponent of the focal term.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Temperature of the CE/focal mixing weight.
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_prob_floor")]
    pub prob_floor: f64,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_t() -> f64 {
    DEFAULT_T
}
fn default_prob_floor() -> f64 {
    DEFAULT_PROB_FLOOR
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: DEFAULT_GAMMA,
            t: DEFAULT_T,
            prob_floor: DEFAULT_PROB_FLOOR,
        }
    }

    pub fn ce() -> Self {
        Self::new(LossKind::Ce)
    }

    pub fn focal(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::new(LossKind::Focal)
        }
    }

    pub fn cewf(gamma: f64, t: f64) -> Self {
        Self {
            gamma,
            t,
            ..Self::new(LossKind::Cewf)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        check_t(self.t)?;
        if !(self.prob_floor > 0.0 && self.prob_floor <= 1e-3) {
            return Err(Error::invalid(format!(
                "prob_floor must be in (0, 1e-3], got {}",
                self.prob_floor
            )));
        }
        Ok(())
    }

    /// Loss at true-class probability `p` under this configuration.
    pub fn scalar(&self, p: f64) -> Result<f64> {
        match self.kind {
            LossKind::Ce => ce_scalar_with_floor(p, self.prob_floor),
            LossKind::Focal => focal_scalar_with_floor(p, self.gamma, self.prob_floor),
            LossKind::Cewf => cewf_scalar_with_floor(p, self.gamma, self.t, self.prob_floor),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::cewf(DEFAULT_GAMMA, DEFAULT_T)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("t must be >= 0, got {t}")));
    }
    Ok(())
}

fn clamp_prob(p: f64, floor: f64) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::NonFinite(format!("probability {p}")));
    }
    Ok(p.clamp(floor, 1.0 - floor))
}

/// Weight of the focal term, `e^{pt} / (e^{pt} + e^{(1-p)t})`.
#[inline]
pub fn focal_weight(p: f64, t: f64) -> f64 {
    sigmoid(t * (2.0 * p - 1.0))
}

pub fn ce_scalar(p: f64) -> Result<f64> {
    ce_scalar_with_floor(p, DEFAULT_PROB_FLOOR)
}

pub fn focal_scalar(p: f64, gamma: f64) -> Result<f64> {
    focal_scalar_with_floor(p, gamma, DEFAULT_PROB_FLOOR)
}

pub fn cewf_scalar(p: f64, gamma: f64, t: f64) -> Result<f64> {
    cewf_scalar_with_floor(p, gamma, t, DEFAULT_PROB_FLOOR)
}

pub fn ce_scalar_with_floor(p: f64, floor: f64) -> Result<f64> {
    let p = clamp_prob(p, floor)?;
    Ok(-p.ln())
}

pub fn focal_scalar_with_floor(p: f64, gamma: f64, floor: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let p = clamp_prob(p, floor)?;
    Ok(-(1.0 - p).powf(gamma) * p.ln())
}

pub fn cewf_scalar_with_floor(p: f64, gamma: f64, t: f64, floor: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_t(t)?;
    let p = clamp_prob(p, floor)?;
    let s = focal_weight(p, t);
    let log_p = p.ln();
    Ok(-((1.0 - s) * log_p + s * (1.0 - p).powf(gamma) * log_p))
}

/// `dL/d(log p)` for the configured loss, evaluated at an already clamped `p`.
///
/// With `L = -log(p) * w(p)` this is `-w(p) - log(p) * p * w'(p)`; the factor
/// `p * w'(p)` stays bounded as `p -> 0`, so the logits gradient
/// `dL/dz = dL/d(log p) * (onehot - softmax)` is well behaved everywhere.
fn dloss_dlogp(cfg: &LossConfig, p: f64) -> f64 {
    let log_p = p.ln();
    let (focus, dfocus) = focus_factor(p, cfg.gamma);
    match cfg.kind {
        LossKind::Ce => -1.0,
        LossKind::Focal => -focus - log_p * p * dfocus,
        LossKind::Cewf => {
            let s = focal_weight(p, cfg.t);
            let ds = 2.0 * cfg.t * s * (1.0 - s);
            // w = 1 - s (1 - F)
            let w = 1.0 - s * (1.0 - focus);
            let dw = -ds * (1.0 - focus) + s * dfocus;
            -w - log_p * p * dw
        }
    }
}

/// `(1-p)^γ` and its derivative in `p`.
fn focus_factor(p: f64, gamma: f64) -> (f64, f64) {
    let focus = (1.0 - p).powf(gamma);
    let dfocus = if gamma == 0.0 {
        0.0
    } else {
        -gamma * (1.0 - p).powf(gamma - 1.0)
    };
    (focus, dfocus)
}

/// Per-sample losses and their batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_sample: Vec<f64>,
}

/// Mean loss over a batch of logits (B×n) and the gradient of that mean with
/// respect to the logits.
///
/// The clamp on `p` is treated as a straight-through identity in the gradient,
/// so samples with vanishing probability still receive a signal.
pub fn loss_batch(logits: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<(LossValue, Tensor)> {
    cfg.validate()?;
    let (batch, classes) = match logits.shape() {
        [b, n] => (*b, *n),
        [n] => (1, *n),
        other => return Err(Error::shape(other, &[labels.len(), 0], "loss_batch logits")),
    };
    if labels.is_empty() {
        return Err(Error::Empty("loss_batch labels"));
    }
    if labels.len() != batch {
        return Err(Error::shape(logits.shape(), &[labels.len()], "loss_batch labels vs logits rows"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("loss_batch logits".into()));
    }

    let mut grad = Tensor::zeros(&[batch, classes]);
    let mut per_sample = Vec::with_capacity(batch);
    let inv_batch = 1.0 / batch as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let g = grad.row_mut(b);
        softmax_into(row, g);
        let p = clamp_prob(g[label], cfg.prob_floor)?;
        per_sample.push(cfg.scalar(p)?);
        let dlogp = dloss_dlogp(cfg, p) * inv_batch;
        // dL/dz_j = dL/dlogp * (δ_jy - p_j)
        for (j, gj) in g.iter_mut().enumerate() {
            let indicator = if j == label { 1.0 } else { 0.0 };
            *gj = dlogp * (indicator - *gj);
        }
    }
    let total = per_sample.iter().sum::<f64>() * inv_batch;
    Ok((LossValue { total, per_sample }, grad))
}

/// One row of the loss-curve table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub p: f64,
    pub gamma: f64,
    pub t: f64,
    pub ce: f64,
    pub focal: f64,
    pub cewf: f64,
}

/// Evaluates CE, focal and CEWF for every `(p, gamma, t)` combination.
///
/// Rows are ordered by `gamma`, then `t`, then `p`.
pub fn emit_curves(p_grid: &[f64], gammas: &[f64], ts: &[f64]) -> Result<Vec<CurveRow>> {
    if p_grid.is_empty() || gammas.is_empty() || ts.is_empty() {
        return Err(Error::Empty("curve grid"));
    }
    if let Some(p) = p_grid.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::invalid(format!("grid point {p} outside (0, 1)")));
    }
    if p_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("grid must be strictly ascending"));
    }
    let mut rows = Vec::with_capacity(p_grid.len() * gammas.len() * ts.len());
    for &gamma in gammas {
        for &t in ts {
            for &p in p_grid {
                rows.push(CurveRow {
                    p,
                    gamma,
                    t,
                    ce: ce_scalar(p)?,
                    focal: focal_scalar(p, gamma)?,
                    cewf: cewf_scalar(p, gamma, t)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Uniform open grid `i / (points + 1)`, `i = 1..=points`.
pub fn open_unit_grid(points: usize) -> Vec<f64> {
    (1..=points).map(|i| i as f64 / (points + 1) as f64).collect()
}
