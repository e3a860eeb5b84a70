//! Self-supervised pretraining: learning-rate scaling and schedule, SGD with
//! momentum, and the training loop over center/nearby groups.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentPolicy, EvalTransform, Patch};
use crate::batcher::{self, BatchError, MAX_NEARBY};
use crate::losses::{self, EmbeddingSet, LossConfig, LossError, LossVariant};
use crate::model::{self, ModelError, Network};
use crate::real::Real;
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("group {group} has {got} nearby patches, the run expects N={expected}")]
    NearbyMismatch { group: usize, got: usize, expected: usize },
    #[error("need at least {needed} groups for one batch, have {have}")]
    NotEnoughGroups { needed: usize, have: usize },
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("gradient/parameter shape mismatch at tensor {0}")]
    Shape(usize),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint callback failed: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Patches per view per step, `C·(N+1)` (before flooring `C`).
    pub view_budget: usize,
    pub nearby: usize,
    pub tau: f64,
    pub variant: LossVariant,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            warmup_epochs: 10,
            view_budget: 64,
            nearby: 4,
            tau: 0.1,
            variant: LossVariant::Dcl,
            seed: 0,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    /// 400 epochs at a 512-view budget.
    pub fn paper() -> Self {
        Self { epochs: 400, view_budget: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.nearby > MAX_NEARBY {
            return bad(format!("N={} exceeds the 8-neighborhood", self.nearby));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be < epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.centers() < 2 {
            return bad(format!("view budget {} leaves fewer than 2 centers at N={}", self.view_budget, self.nearby));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("need base_lr > 0, momentum in [0,1), weight_decay >= 0".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        self.loss().validate()?;
        Ok(())
    }

    /// Centers per batch, `C = floor(budget / (N+1))`.
    pub fn centers(&self) -> usize {
        self.view_budget / (self.nearby + 1)
    }

    /// Learning rate after batch-size scaling, with the nominal (unfloored)
    /// batch size `budget / (N+1)`.
    pub fn scaled_lr(&self) -> f64 {
        scaled_lr(self.base_lr, self.view_budget as f64 / (self.nearby + 1) as f64, self.nearby)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig::new(self.tau, self.variant)
    }

    pub fn sgd(&self) -> Sgd {
        Sgd { momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// `base_lr · batch_size · (N+1) / 256`, where `batch_size` counts centers.
pub fn scaled_lr(base_lr: f64, batch_size: f64, nearby: usize) -> f64 {
    base_lr * batch_size * (nearby + 1) as f64 / 256.0
}

/// Per-epoch learning rate: linear warmup from `scaled/warmup` up to `scaled`,
/// then cosine decay to zero.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange { epoch, epochs: cfg.epochs });
    }
    let peak = cfg.scaled_lr();
    let warmup = cfg.warmup_epochs;
    if epoch < warmup {
        return Ok(peak * (epoch + 1) as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (cfg.epochs - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Array2<T>>,
    pub steps: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array2<T>>) -> Self {
        Self { velocity: params.into_iter().map(|p| Array2::zeros(p.raw_dim())).collect(), steps: 0 }
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`. Nothing is updated if any gradient
/// is non-finite.
pub fn sgd_step<T: Real>(
    mut params: Vec<&mut Array2<T>>,
    grads: &[Array2<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    sgd: &Sgd,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(TrainError::Shape(params.len().min(grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.velocity[i].dim() {
            return Err(TrainError::Shape(i));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { what: format!("gradient of tensor {i}"), step: state.steps });
        }
    }
    let (mu, wd, lr) = (T::of(sgd.momentum), T::of(sgd.weight_decay), T::of(lr));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        ndarray::Zip::from(&mut **p).and(g).and(v).for_each(|p, &g, v| {
            *v = mu * *v + (g + wd * *p);
            *p = *p - lr * *v;
        });
    }
    state.steps += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Runs the pretraining loop.
///
/// `groups` holds one entry per center: the center patch followed by its `N`
/// nearby patches. Each epoch shuffles the groups, cuts them into batches of
/// `C` (dropping the remainder), and per batch assembles two views per patch,
/// encodes, projects, evaluates the configured loss and takes one SGD step at
/// the epoch's learning rate. Views are normalized with `norm`'s mean/std
/// before entering the encoder.
///
/// `on_checkpoint(epochs_done, net)` fires every `checkpoint_every` epochs and
/// after the last one.
pub fn pretrain<G, F>(
    groups: &[G],
    net: &mut Network<f32>,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    norm: &EvalTransform,
    mut on_checkpoint: F,
) -> Result<Vec<TraceRow>, TrainError>
where
    G: AsRef<[Patch]>,
    F: FnMut(usize, &Network<f32>) -> Result<(), TrainError>,
{
    cfg.validate()?;
    policy.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    for (group, g) in groups.iter().enumerate() {
        let got = g.as_ref().len().saturating_sub(1);
        if got != cfg.nearby {
            return Err(TrainError::NearbyMismatch { group, got, expected: cfg.nearby });
        }
    }
    let c = cfg.centers();
    if groups.len() < c {
        return Err(TrainError::NotEnoughGroups { needed: c, have: groups.len() });
    }

    let loss_cfg = cfg.loss();
    let sgd = cfg.sgd();
    let mut state = OptimizerState::new(net.named_params().into_iter().map(|(_, p)| p));
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..groups.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, &[0xE90C, epoch as u64]));
        for (b, chunk) in order.chunks_exact(c).enumerate() {
            let batch_groups: Vec<&[Patch]> = chunk.iter().map(|&g| groups[g].as_ref()).collect();
            let batch_seed = seed::derive(cfg.seed, &[0xBA7C, epoch as u64, b as u64]);
            let mut batch = batcher::assemble(&batch_groups, policy, batch_seed)?;
            for v in &mut batch.views {
                augment::normalize(v, &norm.mean, &norm.std);
            }
            let x = model::images_to_map::<f32>(&batch.views)?;
            let (z, fwd) = net.forward_train(&x)?;
            let z64 = z.mapv(f64::from);
            let embeddings = EmbeddingSet::new(z64, batch.group.clone())?;
            let (loss, dz) = losses::loss_and_grad(&embeddings, &loss_cfg)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { what: "loss".into(), step: state.steps });
            }
            let grads = net.backward(&fwd, dz.mapv(|v| v as f32).view());
            trace.push(TraceRow { epoch, step: state.steps, lr, loss });
            sgd_step(net.params_mut(), &grads, &mut state, lr, &sgd)?;
        }
        log::info!(
            "epoch {}/{} lr {:.5} mean loss {:.5}",
            epoch + 1,
            cfg.epochs,
            lr,
            mean_loss(trace.iter().filter(|r| r.epoch == epoch))
        );
        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
            on_checkpoint(done, net)?;
        }
    }
    Ok(trace)
}

fn mean_loss<'a>(rows: impl Iterator<Item = &'a TraceRow>) -> f64 {
    let (s, n) = rows.fold((0.0, 0usize), |(s, n), r| (s + r.loss, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize, warmup: usize) -> TrainConfig {
        TrainConfig { epochs, warmup_epochs: warmup, view_budget: 512, nearby: 0, ..TrainConfig::default() }
    }

    #[test]
    fn scaled_lr_examples() {
        assert!((scaled_lr(0.2, 512.0, 0) - 0.4).abs() < 1e-15);
        assert!((scaled_lr(0.2, 256.0, 1) - 0.4).abs() < 1e-15);
        assert!((scaled_lr(0.1, 128.0, 1) - 0.1).abs() < 1e-15);
        for n in 0..=8 {
            let c = TrainConfig { nearby: n, ..TrainConfig::paper() };
            assert!((c.scaled_lr() - 0.4).abs() < 1e-12, "N={n}: {}", c.scaled_lr());
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(400, 10);
        assert!((lr_at(4, &c).unwrap() - 0.2).abs() < 1e-15);
        assert!((lr_at(0, &c).unwrap() - 0.04).abs() < 1e-15);
        assert!((lr_at(9, &c).unwrap() - 0.4).abs() < 1e-15);
        assert!((lr_at(10, &c).unwrap() - 0.4).abs() < 1e-15);
        let last = lr_at(399, &c).unwrap();
        let expected = 0.4 * 0.5 * (1.0 + (std::f64::consts::PI * 389.0 / 390.0).cos());
        assert!((last - expected).abs() < 1e-15);
        assert!(last < 1e-5);
        assert!(matches!(lr_at(400, &c), Err(TrainError::EpochOutOfRange { .. })));
    }

    #[test]
    fn schedule_is_non_increasing_after_warmup() {
        let c = cfg(30, 10);
        let lrs: Vec<f64> = (0..30).map(|e| lr_at(e, &c).unwrap()).collect();
        for w in lrs[10..].windows(2) {
            assert!(w[1] <= w[0]);
        }
        for w in lrs[..10].windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_epochs: 30, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { nearby: 9, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { view_budget: 9, nearby: 4, ..TrainConfig::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().centers(), 12);
    }

    fn scalar(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new([&p]);
        let sgd = Sgd { momentum: 0.0, weight_decay: 0.0 };
        sgd_step(vec![&mut p], &[scalar(2.0)], &mut st, 0.1, &sgd).unwrap();
        assert!((p[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = scalar(0.0);
        let mut st = OptimizerState::new([&p]);
        let sgd = Sgd { momentum: 0.9, weight_decay: 0.0 };
        sgd_step(vec![&mut p], &[scalar(1.0)], &mut st, 0.1, &sgd).unwrap();
        assert!((p[[0, 0]] + 0.1).abs() < 1e-15);
        sgd_step(vec![&mut p], &[scalar(1.0)], &mut st, 0.1, &sgd).unwrap();
        assert!((p[[0, 0]] + 0.29).abs() < 1e-15);
        assert_eq!(st.steps, 2);
    }

    #[test]
    fn weight_decay_alone_shrinks() {
        let mut p = scalar(3.0);
        let mut st = OptimizerState::new([&p]);
        let sgd = Sgd { momentum: 0.0, weight_decay: 1e-4 };
        sgd_step(vec![&mut p], &[scalar(0.0)], &mut st, 0.5, &sgd).unwrap();
        assert!((p[[0, 0]] - 3.0 * (1.0 - 0.5 * 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.1);
        let before = p.clone();
        let mut st = OptimizerState::new([&p]);
        let sgd = Sgd { momentum: 0.9, weight_decay: 0.0 };
        sgd_step(vec![&mut p], &[Array2::zeros((3, 4))], &mut st, 0.4, &sgd).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new([&p]);
        let sgd = Sgd { momentum: 0.9, weight_decay: 0.0 };
        let err = sgd_step(vec![&mut p], &[scalar(f64::NAN)], &mut st, 0.1, &sgd).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }));
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(st.steps, 0);
    }
}
