//! Adversarial fine-tuning.
//!
//! Each step crafts `x_adv` by maximizing cross-entropy against the current
//! tuned encoder, then takes one SGD-with-momentum step on
//! `ce + α·ca + β·reg` evaluated at `(x, x_adv)`. The frozen encoder and the
//! prototypes are never written.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, CawConfig, LossBreakdown};
use crate::model::{DualEncoderModel, ImageEncoder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: CawConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `None` trains on clean inputs only.
    pub inner_attack: Option<AttackConfig>,
    /// Checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: CawConfig::default(),
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            inner_attack: Some(AttackConfig::pgd(0.05, 2)),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    /// Clean cross-entropy training with the given optimizer settings.
    pub fn clean(learning_rate: f64, epochs: usize, seed: u64) -> Self {
        Self { loss: CawConfig::ce_only(), learning_rate, epochs, seed, inner_attack: None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(a) = &self.inner_attack {
            a.validate()?;
        }
        Ok(())
    }
}

/// Momentum buffers, one per tuned parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(encoder: &ImageEncoder) -> Self {
        Self { velocity: encoder.params().map(|p| Tensor::zeros(p.shape())).collect(), step: 0 }
    }

    pub(crate) fn from_flat(shapes: &[Vec<usize>], values: &[f64], step: u64) -> Result<Self> {
        let mut offset = 0;
        let mut velocity = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n: usize = s.iter().product();
            let chunk = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::Dimension("velocity blob shorter than parameters".into()))?;
            velocity.push(Tensor::new(s.clone(), chunk.to_vec())?);
            offset += n;
        }
        Ok(Self { velocity, step })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor] {
        &mut self.velocity
    }

    pub fn flat_velocity(&self) -> Vec<f64> {
        self.velocity.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `v ← μ·v + g + λ·θ`, then `θ ← θ − lr·v`.
    fn apply(&mut self, encoder: &mut ImageEncoder, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((param, v), g) in encoder.params_mut().zip(&mut self.velocity).zip(grads) {
            param.same_shape(v, "optimizer velocity")?;
            for ((p, vi), gi) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *p;
                *p -= cfg.learning_rate * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Fraction of the batch misclassified after the inner attack.
    pub attack_success_rate: Option<f64>,
    /// Wall-clock time of the step. Kept out of the serialized record so
    /// logs stay reproducible.
    #[serde(skip)]
    pub duration_secs: f64,
}

/// Freezes the current tuned parameters as the reference encoder.
pub fn snapshot_frozen(model: &mut DualEncoderModel) -> Result<()> {
    model.snapshot_frozen(false)
}

/// One inner-maximization / outer-minimization step on a batch.
pub fn train_step(
    model: &mut DualEncoderModel,
    optimizer: &mut OptimizerState,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<TrainLogRecord> {
    if !model.snapshot_state().taken {
        return Err(Error::Contract("train_step needs a frozen snapshot; call snapshot_frozen first".into()));
    }
    step_unchecked(model, optimizer, x, y, cfg, epoch)
}

fn step_unchecked(
    model: &mut DualEncoderModel,
    optimizer: &mut OptimizerState,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<TrainLogRecord> {
    let started = Instant::now();
    if x.rows() == 0 || x.is_empty() {
        return Err(Error::Contract("train_step needs a non-empty batch".into()));
    }
    let (x_adv, attack_success_rate) = match &cfg.inner_attack {
        Some(a) => {
            let per_step = AttackConfig { seed: a.seed.wrapping_add(optimizer.step), ..a.clone() };
            let r = attack(model, x, y, &per_step)?;
            let rate = r.success_rate();
            (r.x_adv, Some(rate))
        }
        None => (x.clone(), None),
    };
    let (losses, grads) = total_loss_with_grad(model, x, &x_adv, y, &cfg.loss)?;
    let grads_finite = grads.iter().all(Tensor::is_finite);
    if !losses.is_finite() || !grads_finite {
        log::error!(
            "non-finite training step: epoch {epoch}, step {}, losses {losses:?}, finite grads {grads_finite}",
            optimizer.step
        );
        return Err(Error::Numeric(format!(
            "non-finite loss or gradient at step {} (total {})",
            optimizer.step, losses.l_total
        )));
    }
    optimizer.apply(model.tuned_mut(), &grads, cfg)?;
    model.note_update();
    Ok(TrainLogRecord {
        epoch,
        step: optimizer.step,
        losses,
        attack_success_rate,
        duration_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub records: Vec<TrainLogRecord>,
    pub optimizer: OptimizerState,
}

/// Runs `cfg.epochs` shuffled passes over `data`.
pub fn fit(model: &mut DualEncoderModel, data: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    fit_with(model, data, cfg, |_, _, _| Ok(()))
}

/// [`fit`] with a callback after every `cfg.checkpoint_every` epochs
/// (always after the last), receiving the 1-based epoch number.
pub fn fit_with<F>(model: &mut DualEncoderModel, data: &Dataset, cfg: &TrainConfig, on_checkpoint: F) -> Result<FitOutcome>
where
    F: FnMut(usize, &DualEncoderModel, &OptimizerState) -> Result<()>,
{
    if !model.snapshot_state().taken {
        return Err(Error::Contract("fit needs a frozen snapshot; call snapshot_frozen first".into()));
    }
    run_epochs(model, data, cfg, on_checkpoint)
}

/// Clean cross-entropy training of the tuned encoder, used to produce the
/// reference state before a snapshot is taken.
pub fn pretrain_clean(model: &mut DualEncoderModel, data: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    let clean = TrainConfig { loss: CawConfig::ce_only(), inner_attack: None, ..cfg.clone() };
    run_epochs(model, data, &clean, |_, _, _| Ok(()))
}

fn run_epochs<F>(model: &mut DualEncoderModel, data: &Dataset, cfg: &TrainConfig, mut on_checkpoint: F) -> Result<FitOutcome>
where
    F: FnMut(usize, &DualEncoderModel, &OptimizerState) -> Result<()>,
{
    cfg.validate()?;
    if data.input_dim() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            data.input_dim(),
            model.input_dim()
        )));
    }
    if data.prototypes != *model.prototypes() {
        return Err(Error::Contract("training data prototypes differ from the model's".into()));
    }
    let mut optimizer = OptimizerState::new(model.tuned());
    let mut records = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            records.push(step_unchecked(model, &mut optimizer, &x, &y, cfg, epoch)?);
        }
        let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if due || epoch == cfg.epochs {
            on_checkpoint(epoch, model, &optimizer)?;
        }
    }
    Ok(FitOutcome { records, optimizer })
}
