//! AdamW with decoupled weight decay applied before the moment update,
//! global-norm gradient clipping across parameter groups, and the
//! finite-difference helpers the gradient checks are built on.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling across all groups.
    pub clip_max_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_max_norm: 35.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || self.clip_max_norm <= 0.0 {
            return Err(Error::Config(
                "weight decay must be >= 0; eps and clip_max_norm must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One group's parameters and gradients for a single step.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Scale applied to all gradients (1.0 when unclipped).
    pub clip_scale: f64,
}

/// AdamW state: per-group moments keyed by name, plus the shared step
/// counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Apply one update. Order per parameter: decoupled decay
    /// p ← p·(1 − lr·wd) first, then the bias-corrected Adam step with the
    /// (globally clipped) gradient. Moments for unseen group names are
    /// created lazily.
    pub fn apply(&mut self, groups: &mut [ParamUpdate<'_>]) -> Result<StepStats> {
        let mut sq_sum = 0.0;
        for g in groups.iter() {
            if g.params.len() != g.grads.len() {
                return Err(Error::Config(format!(
                    "group '{}': {} params but {} grads",
                    g.name,
                    g.params.len(),
                    g.grads.len()
                )));
            }
            for &x in g.grads {
                if !x.is_finite() {
                    return Err(Error::NonFiniteGradient(g.name.to_string()));
                }
                sq_sum += x * x;
            }
        }
        let grad_norm = sq_sum.sqrt();
        let clip_scale = if grad_norm > self.config.clip_max_norm {
            self.config.clip_max_norm / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for g in groups.iter_mut() {
            let moments = self
                .moments
                .entry(g.name.to_string())
                .or_insert_with(|| Moments::zeros(g.params.len()));
            if moments.m.len() != g.params.len() {
                return Err(Error::Config(format!(
                    "group '{}': moment length {} does not match {} params",
                    g.name,
                    moments.m.len(),
                    g.params.len()
                )));
            }
            for i in 0..g.params.len() {
                let grad = g.grads[i] * clip_scale;
                g.params[i] *= decay;
                moments.m[i] = c.beta1 * moments.m[i] + (1.0 - c.beta1) * grad;
                moments.v[i] = c.beta2 * moments.v[i] + (1.0 - c.beta2) * grad * grad;
                let m_hat = moments.m[i] / bias1;
                let v_hat = moments.v[i] / bias2;
                g.params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            clip_scale,
        })
    }
}

/// Step size of the central-difference gradient checks.
pub const FD_EPSILON: f64 = 1e-5;
/// Acceptance threshold on `relative_error`.
pub const FD_TOLERANCE: f64 = 1e-4;

/// |a − n| / max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// (f(x+ε) − f(x−ε)) / 2ε.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// One finite-difference comparison result.
#[derive(Debug, Clone)]
pub struct FdRecord {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl FdRecord {
    pub fn new(name: impl Into<String>, analytic: f64, numeric: f64) -> Self {
        Self {
            name: name.into(),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        }
    }

    pub fn passes(&self) -> bool {
        self.rel_error < FD_TOLERANCE
    }
}
