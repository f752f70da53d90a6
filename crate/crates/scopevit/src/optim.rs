//! Optimization: decoupled-weight-decay Adam, the warmup -> cosine ->
//! constant learning-rate schedule, layer-wise LR decay multipliers, and
//! stochastic weight averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vit::ParamGroup;

/// Learning-rate schedule over fractional epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub cosine_end_epoch: f64,
    pub total_epochs: f64,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            peak_lr: 1.5e-3,
            warmup_epochs: 3.0,
            cosine_end_epoch: 10.0,
            total_epochs: 15.0,
            min_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.warmup_epochs
            && self.warmup_epochs < self.cosine_end_epoch
            && self.cosine_end_epoch <= self.total_epochs)
        {
            return Err(Error::config(format!(
                "schedule epochs must satisfy 0 <= warmup < cosine_end <= total, got {} / {} / {}",
                self.warmup_epochs, self.cosine_end_epoch, self.total_epochs
            )));
        }
        if !(self.peak_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::config(format!(
                "learning rates must satisfy peak > min >= 0, got peak {} min {}",
                self.peak_lr, self.min_lr
            )));
        }
        Ok(())
    }
}

/// Learning rate at a fractional epoch position.
///
/// Linear warmup to the peak, a cosine parameterized over the full
/// post-warmup span but truncated at `cosine_end_epoch`, then a constant
/// tail equal to the cosine value at the truncation point.
pub fn lr_at(epoch_fraction: f64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if !(0.0..=cfg.total_epochs).contains(&epoch_fraction) {
        return Err(Error::contract(format!(
            "epoch {epoch_fraction} outside [0, {}]",
            cfg.total_epochs
        )));
    }
    let cosine = |e: f64| {
        let span = cfg.total_epochs - cfg.warmup_epochs;
        let t = (e - cfg.warmup_epochs) / span;
        cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    };
    Ok(if epoch_fraction < cfg.warmup_epochs {
        cfg.peak_lr * epoch_fraction / cfg.warmup_epochs
    } else if epoch_fraction < cfg.cosine_end_epoch {
        cosine(epoch_fraction)
    } else {
        cosine(cfg.cosine_end_epoch)
    })
}

/// One layer group's LR multiplier.
#[derive(Clone, Debug, PartialEq)]
pub struct LlrdGroup {
    pub id: String,
    pub distance: usize,
    pub multiplier: f64,
}

/// Per-group multipliers `decay^distance`; groups at the latent boundary
/// (distance 0) keep multiplier 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LLRDPlan {
    pub decay: f64,
    pub groups: Vec<LlrdGroup>,
}

impl LLRDPlan {
    pub fn multiplier_of(&self, group_id: &str) -> Option<f64> {
        self.groups
            .iter()
            .find(|g| g.id == group_id)
            .map(|g| g.multiplier)
    }
}

pub fn llrd_multipliers(layers: &[ParamGroup], decay: f64) -> Result<LLRDPlan> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::config(format!(
            "layer-wise decay must lie in (0, 1], got {decay}"
        )));
    }
    let groups = layers
        .iter()
        .map(|g| LlrdGroup {
            id: g.id.clone(),
            distance: g.distance,
            multiplier: decay.powi(g.distance as i32),
        })
        .collect();
    Ok(LLRDPlan { decay, groups })
}

/// AdamW hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
pub struct AdamWState {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor], cfg: AdamWConfig) -> Self {
        AdamWState {
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One optimizer step with a per-parameter effective learning rate.
    ///
    /// Decoupled weight decay shrinks each parameter by `lr * wd` before the
    /// bias-corrected adaptive update.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len()
        {
            return Err(Error::contract(format!(
                "adamw_step: {} params, {} grads, {} lrs, state holds {}",
                params.len(),
                grads.len(),
                lrs.len(),
                self.m.len()
            )));
        }
        for ((p, g), st) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != st.shape() {
                return Err(Error::contract(format!(
                    "adamw_step: shape drift, param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    st.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            let lr = lrs[i];
            let wd = self.cfg.weight_decay;
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                p[j] -= lr * wd * p[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Running arithmetic mean of weight snapshots.
#[derive(Clone, Debug, Default)]
pub struct SWAState {
    avg: Vec<Tensor>,
    count: usize,
}

impl SWAState {
    pub fn new() -> Self {
        SWAState::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Averaged weights after at least one update.
    pub fn average(&self) -> Option<&[Tensor]> {
        if self.count == 0 {
            None
        } else {
            Some(&self.avg)
        }
    }

    /// Fold one snapshot into the running mean: `avg <- (avg*n + w)/(n+1)`.
    pub fn update(&mut self, weights: &[Tensor]) -> Result<()> {
        if self.count == 0 {
            self.avg = weights.to_vec();
            self.count = 1;
            return Ok(());
        }
        if weights.len() != self.avg.len() {
            return Err(Error::contract(format!(
                "swa_update: {} tensors, state holds {}",
                weights.len(),
                self.avg.len()
            )));
        }
        let n = self.count as f64;
        for (a, w) in self.avg.iter_mut().zip(weights) {
            if a.shape() != w.shape() {
                return Err(Error::contract(format!(
                    "swa_update: shape drift {:?} vs {:?}",
                    a.shape(),
                    w.shape()
                )));
            }
            for (av, wv) in a.data_mut().iter_mut().zip(w.data()) {
                *av = (*av * n + wv) / (n + 1.0);
            }
        }
        self.count += 1;
        Ok(())
    }
}
