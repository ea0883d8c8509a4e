//! Gradient-descent parameter solver in the latent space.
//!
//! Minimizes `λ_s·L_CLIP(T, G(mix(x_prev, D(z), r))) + λ·L_Prior(z)` with plain
//! gradient descent and a fixed step count. PCA and continuous makeup
//! coordinates use one learning rate, relaxed one-hot group coordinates
//! another.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{prior_loss, LatentError, LatentModel, LatentSlot, PriorModel};
use crate::schema::{mix_unchecked, snap_discrete, ChannelMask, ParameterSchema, ParameterVector, SchemaError};
use crate::semantic::{clip_loss_to, Embedder, Renderer, SemanticError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub steps: usize,
    pub lr_continuous: f64,
    pub lr_discrete: f64,
    pub lambda_prior: f64,
    pub seed: u64,
    /// Removes the per-group mean from the gradient of relaxed one-hot
    /// coordinates. The renderer's softmax ignores that direction, while the
    /// ridge-regularized prior is extremely stiff along it.
    pub group_gauge_projection: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            steps: 100,
            lr_continuous: 1.0,
            lr_discrete: 100.0,
            lambda_prior: 8e-4,
            seed: 0,
            group_gauge_projection: true,
        }
    }
}

impl SolveConfig {
    pub fn check(&self) -> Result<(), SolveError> {
        if self.steps == 0 {
            return Err(SolveError::Config("steps must be at least 1".into()));
        }
        if !(self.lr_continuous > 0.0 && self.lr_discrete > 0.0) {
            return Err(SolveError::Config("learning rates must be positive".into()));
        }
        if !(self.lambda_prior >= 0.0) || !self.lambda_prior.is_finite() {
            return Err(SolveError::Config("lambda_prior must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub clip: f64,
    pub prior: f64,
    pub total: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("optimization diverged at step {step}")]
    Diverged { step: usize, trace: Vec<LossPoint> },
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub prompt: String,
    pub x_final: ParameterVector,
    pub z_final: Vec<f64>,
    /// Losses at the initial point and after every step.
    pub loss_trace: Vec<LossPoint>,
    pub edited_channels: ChannelMask,
    pub strength: f64,
    pub strength_weight: f64,
    pub config: SolveConfig,
}

impl SolveResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("result serializes")
    }
}

/// Everything the objective needs. All members are read-only.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub schema: &'a ParameterSchema,
    pub latent: &'a LatentModel,
    pub prior: &'a PriorModel,
    pub renderer: &'a dyn Renderer,
    pub embedder: &'a dyn Embedder,
}

/// `λ_s = 1 − cos(s·π)`, with `s` clamped to `[0, 1]`.
pub fn strength_weight(s: f64) -> f64 {
    let clamped = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
    if clamped != s {
        log::warn!("strength {s} clamped to {clamped}");
    }
    1.0 - (clamped * std::f64::consts::PI).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub clip: f64,
    pub prior: f64,
    pub grad: DVector<f64>,
}

/// Value and gradient of the masked, strength-weighted objective at `z`.
/// Channels with a clear mask bit come from `x_prev` and carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn objective_eval(
    z: &DVector<f64>,
    x_prev: &ParameterVector,
    mask: &ChannelMask,
    target: &DVector<f64>,
    lambda_s: f64,
    lambda: f64,
    m: &Models<'_>,
) -> Result<Objective, SolveError> {
    let x = m.latent.decode(z)?;
    let x_mix = mix_unchecked(x_prev, &x, mask);
    let clip = clip_loss_to(target, &x_mix, m.renderer, m.embedder)?;
    let mut gx = clip.grad;
    for (g, &on) in gx.iter_mut().zip(&mask.bits) {
        if !on {
            *g = 0.0;
        }
    }
    let (prior, gp) = prior_loss(z, m.prior);
    let grad = m.latent.decode_vjp(&gx)? * lambda_s + gp * lambda;
    Ok(Objective { total: lambda_s * clip.value + lambda * prior, clip: clip.value, prior, grad })
}

fn learning_rates(latent: &LatentModel, cfg: &SolveConfig) -> DVector<f64> {
    DVector::from_iterator(
        latent.slots.len(),
        latent.slots.iter().map(|s| match s {
            LatentSlot::Discrete { .. } => cfg.lr_discrete,
            _ => cfg.lr_continuous,
        }),
    )
}

/// Latent positions of each one-hot group.
fn group_slots(latent: &LatentModel, n_groups: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_groups];
    for (k, s) in latent.slots.iter().enumerate() {
        if let LatentSlot::Discrete { group, .. } = s {
            out[*group].push(k);
        }
    }
    out
}

fn descend(
    z0: DVector<f64>,
    x_prev: &ParameterVector,
    mask: &ChannelMask,
    target: &DVector<f64>,
    lambda_s: f64,
    cfg: &SolveConfig,
    m: &Models<'_>,
) -> Result<(DVector<f64>, Vec<LossPoint>), SolveError> {
    let lr = learning_rates(m.latent, cfg);
    let groups =
        if cfg.group_gauge_projection { group_slots(m.latent, m.schema.discrete_groups.len()) } else { Vec::new() };
    let mut z = z0;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let obj = objective_eval(&z, x_prev, mask, target, lambda_s, cfg.lambda_prior, m)?;
        let finite = obj.total.is_finite() && obj.grad.iter().all(|g| g.is_finite());
        trace.push(LossPoint { clip: obj.clip, prior: obj.prior, total: obj.total });
        if !finite {
            return Err(SolveError::Diverged { step, trace });
        }
        if step == cfg.steps {
            break;
        }
        let mut g = obj.grad;
        for slots in &groups {
            let mean = slots.iter().map(|&k| g[k]).sum::<f64>() / slots.len() as f64;
            for &k in slots {
                g[k] -= mean;
            }
        }
        z -= g.component_mul(&lr);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::Diverged { step: step + 1, trace });
        }
    }
    Ok((z, trace))
}

/// Creates a character from scratch, starting at the prior mean.
pub fn create(prompt: &str, cfg: &SolveConfig, m: &Models<'_>) -> Result<SolveResult, SolveError> {
    cfg.check()?;
    if prompt.trim().is_empty() {
        return Err(SolveError::EmptyPrompt);
    }
    let target = m.embedder.embed_text(prompt)?;
    let n = m.schema.len();
    let mask = ChannelMask::ones(n);
    let z0 = m.prior.mu_z.clone();
    // with a full mask the previous vector never reaches the objective
    let x_prev = m.latent.decode(&z0)?;
    let (z, trace) = descend(z0, &x_prev, &mask, &target, 1.0, cfg, m)?;
    let x_final = snap_discrete(&m.latent.decode(&z)?, m.schema);
    Ok(SolveResult {
        prompt: prompt.to_string(),
        x_final,
        z_final: z.iter().copied().collect(),
        loss_trace: trace,
        edited_channels: mask,
        strength: 1.0,
        strength_weight: 1.0,
        config: *cfg,
    })
}

/// Edits `x_prev` towards `prompt` on the masked channels only, starting at
/// its latent code. Unmasked channels of the result are bit-identical to
/// `x_prev`. Zero strength is a no-op.
pub fn edit(
    x_prev: &ParameterVector,
    prompt: &str,
    strength: f64,
    mask: &ChannelMask,
    cfg: &SolveConfig,
    m: &Models<'_>,
) -> Result<SolveResult, SolveError> {
    cfg.check()?;
    if x_prev.len() != m.schema.len() {
        return Err(SchemaError::Dimension { expected: m.schema.len(), actual: x_prev.len() }.into());
    }
    mask.check(m.schema)?;
    if prompt.trim().is_empty() {
        return Err(SolveError::EmptyPrompt);
    }
    let lambda_s = strength_weight(strength);
    let target = m.embedder.embed_text(prompt)?;
    let z0 = m.latent.encode(x_prev)?;
    let result = |x_final, z: &DVector<f64>, trace| SolveResult {
        prompt: prompt.to_string(),
        x_final,
        z_final: z.iter().copied().collect(),
        loss_trace: trace,
        edited_channels: mask.clone(),
        strength: strength.clamp(0.0, 1.0),
        strength_weight: lambda_s,
        config: *cfg,
    };
    if lambda_s == 0.0 {
        let obj = objective_eval(&z0, x_prev, mask, &target, 0.0, cfg.lambda_prior, m)?;
        let trace = vec![LossPoint { clip: obj.clip, prior: obj.prior, total: obj.total }];
        return Ok(result(x_prev.clone(), &z0, trace));
    }
    let (z, trace) = descend(z0, x_prev, mask, &target, lambda_s, cfg, m)?;
    let relaxed = mix_unchecked(x_prev, &m.latent.decode(&z)?, mask);
    let x_final = mix_unchecked(x_prev, &snap_discrete(&relaxed, m.schema), mask);
    Ok(result(x_final, &z, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strength_weight_points() {
        assert_eq!(strength_weight(0.0), 0.0);
        assert!((strength_weight(0.5) - 1.0).abs() < 1e-15);
        assert_eq!(strength_weight(1.0), 2.0);
        assert_eq!(strength_weight(-3.0), 0.0);
        assert_eq!(strength_weight(7.0), 2.0);
    }

    #[test]
    fn config_rejects_zero_steps() {
        let cfg = SolveConfig { steps: 0, ..Default::default() };
        assert!(matches!(cfg.check(), Err(SolveError::Config(_))));
        assert!(SolveConfig::default().check().is_ok());
    }
}
