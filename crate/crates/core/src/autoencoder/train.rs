use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Autoencoder, Bottleneck, LossParts, ModelParams};
use crate::error::{Error, Result};
use crate::gaitdata::SkeletonSequence;
use crate::quantizer::{codebook_usage, ema_update, expire_stale, Codebook};

pub const SMOOTH_L1_BETA: f64 = 0.25;

/// Mean Smooth-L1 loss and its gradient with respect to `pred`.
///
/// Per element: `0.5 d² / β` when `|d| < β`, otherwise `|d| - β/2`.
pub fn smooth_l1(pred: &Array3<f64>, target: &Array3<f64>, beta: f64) -> Result<(f64, Array3<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array3::zeros(pred.dim());
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &p, &t| {
            let d = p - t;
            if d.abs() < beta {
                loss += 0.5 * d * d / beta;
                *g = d / beta / n;
            } else {
                loss += d.abs() - 0.5 * beta;
                *g = d.signum() / n;
            }
        });
    Ok((loss / n, grad))
}

/// Triangular cyclical learning rate: `lr_min` at the start of each cycle,
/// `lr_max` half way through.
pub fn cyclical_lr(step: u64, lr_min: f64, lr_max: f64, cycle_len: u64) -> f64 {
    let cycle_len = cycle_len.max(2);
    let half = cycle_len as f64 / 2.0;
    let pos = (step % cycle_len) as f64;
    let frac = if pos <= half { pos / half } else { (cycle_len as f64 - pos) / half };
    lr_min + (lr_max - lr_min) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta: f64,
    pub commit: f64,
    pub ortho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: SMOOTH_L1_BETA,
            commit: 0.25,
            ortho: 0.01,
        }
    }
}

/// Optimizer, schedule and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_len: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    /// Seeds stale-code replacement.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_min: 0.0025,
            lr_max: 0.0075,
            cycle_len: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub first: ModelParams,
    pub second: ModelParams,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    /// One update at 1-based iteration `t`.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, t: u64, cfg: &TrainConfig) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut());
        for (((p, g), m), v) in tensors {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Autoencoder,
    pub optimizer: AdamW,
    /// Completed updates.
    pub step: u64,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(model: Autoencoder, config: TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(&model.params),
            model,
            step: 0,
            config,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        cyclical_lr(self.step, self.config.lr_min, self.config.lr_max, self.config.cycle_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub recon_loss: f64,
    pub commit_loss: f64,
    pub ortho_loss: f64,
    pub total: f64,
    /// Fraction of codes used by this batch.
    pub usage: f64,
    pub expired_codes: usize,
}

/// One optimization step on a batch: encode, quantize with straight-through
/// gradients, decode, AdamW on the network, then EMA update and stale-code
/// expiry on the codebook.
pub fn train_step(state: &mut TrainState, codebook: &mut Codebook, batch: &[&SkeletonSequence]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let lr = state.learning_rate();
    let model = &state.model;
    let weights = state.config.loss;
    let evals = batch
        .par_iter()
        .map(|s| model.loss_and_grad(&s.frames, Bottleneck::Codebook(codebook), &weights))
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut loss = LossParts::default();
    for e in &evals {
        grads.add_scaled(scale, &e.grads);
        loss.recon += scale * e.loss.recon;
        loss.commit += scale * e.loss.commit;
        loss.ortho += scale * e.loss.ortho;
        loss.total += scale * e.loss.total;
    }
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            detail: format!(
                "recon {} commit {} ortho {} lr {lr}",
                loss.recon, loss.commit, loss.ortho
            ),
        });
    }

    state.step += 1;
    let t = state.step;
    state
        .optimizer
        .update(&mut state.model.params, &grads, lr, t, &state.config);

    let latents: Vec<&Array3<f64>> = evals.iter().map(|e| &e.latent).collect();
    let grids: Vec<_> = evals.iter().map(|e| e.tokens.clone().expect("codebook bottleneck")).collect();
    let grid_refs: Vec<_> = grids.iter().collect();
    let usage = codebook_usage(&grids, codebook.size())?;
    ema_update(codebook, &latents, &grid_refs)?;
    let expiry_seed = state.config.seed ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let expired = expire_stale(codebook, &latents, expiry_seed)?;

    Ok(StepMetrics {
        step: t,
        lr,
        recon_loss: loss.recon,
        commit_loss: loss.commit,
        ortho_loss: loss.ortho,
        total: loss.total,
        usage,
        expired_codes: expired.len(),
    })
}
