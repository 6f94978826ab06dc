//! ℓ∞-bounded white-box attacks on the tuned encoder.
//!
//! All attacks share one loop: take a signed-gradient step on the chosen
//! objective, then project back into the ε-ball around the clean input and
//! the valid input range. FGSM is the single step of size ε; the CW variant
//! swaps cross-entropy for the margin `max_{j≠y} z_j − z_y`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy_loss, validate_labels};
use crate::model::{zero_shot_logits, DualEncoderModel};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "cw" => Ok(AttackKind::Cw),
            other => Err(Error::Config(format!("unknown attack `{other}` (fgsm, pgd, cw)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub norm: Norm,
    pub random_start: bool,
    pub clamp_min: f64,
    pub clamp_max: f64,
    /// Seeds the uniform random start.
    pub seed: u64,
}

impl Default for AttackConfig {
    /// PGD-2 at 1/255 with step size equal to the budget.
    fn default() -> Self {
        Self::pgd(1.0 / 255.0, 2)
    }
}

impl AttackConfig {
    /// PGD with step size equal to the budget.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: epsilon,
            norm: Norm::Linf,
            random_start: false,
            clamp_min: 0.0,
            clamp_max: 1.0,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self { kind: AttackKind::Fgsm, ..Self::pgd(epsilon, 1) }
    }

    pub fn cw(epsilon: f64, steps: usize) -> Self {
        Self { kind: AttackKind::Cw, ..Self::pgd(epsilon, steps) }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.epsilon, self.step_size, self.clamp_min, self.clamp_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("attack parameters must be finite".into()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.step_size < 0.0 {
            return Err(Error::Config(format!("step_size must be >= 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.clamp_min >= self.clamp_max {
            return Err(Error::Config(format!(
                "clamp_min {} must be below clamp_max {}",
                self.clamp_min, self.clamp_max
            )));
        }
        Ok(())
    }

    /// Short label such as `pgd-20@0.05`.
    pub fn label(&self) -> String {
        format!("{}-{}@{}", self.kind.name(), self.steps, self.epsilon)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Objective value at each iterate: entry `k` is measured at `x_k`, the
    /// last entry at the returned `x_adv`.
    pub loss_trace: Vec<f64>,
    /// `true` where the tuned model misclassifies `x_adv`.
    pub success_mask: Vec<bool>,
    /// Coordinates whose gradient was exactly zero, summed over steps.
    pub zero_grad_coords: usize,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        if self.success_mask.is_empty() {
            return 0.0;
        }
        self.success_mask.iter().filter(|&&s| s).count() as f64 / self.success_mask.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    CrossEntropy,
    Margin,
}

/// Projects onto `{x' : ‖x' − x‖∞ ≤ ε} ∩ [clamp_min, clamp_max]`.
///
/// Implemented as a clamp to `[x − ε, x + ε]`, which makes the projection
/// exactly idempotent in floating point.
pub fn project_linf(x_adv: &Tensor, x: &Tensor, epsilon: f64, clamp_min: f64, clamp_max: f64) -> Result<Tensor> {
    x_adv.same_shape(x, "project_linf")?;
    Ok(x_adv.zip_map(x, |a, c| a.max(c - epsilon).min(c + epsilon).max(clamp_min).min(clamp_max)))
}

/// Iterated signed-gradient ascent on the cross-entropy of the tuned encoder.
pub fn pgd_attack(model: &DualEncoderModel, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    run(model, x, y, cfg, Objective::CrossEntropy)
}

/// One step of size ε, no random start.
pub fn fgsm_attack(model: &DualEncoderModel, x: &Tensor, y: &[usize], epsilon: f64) -> Result<AttackResult> {
    pgd_attack(model, x, y, &AttackConfig::fgsm(epsilon))
}

/// PGD on the CW margin loss with κ = 0.
pub fn cw_pgd_attack(model: &DualEncoderModel, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    run(model, x, y, cfg, Objective::Margin)
}

/// Dispatches on `cfg.kind`. `Fgsm` forces one step of size ε.
pub fn attack(model: &DualEncoderModel, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    match cfg.kind {
        AttackKind::Pgd => pgd_attack(model, x, y, cfg),
        AttackKind::Fgsm => {
            let one = AttackConfig { steps: 1, step_size: cfg.epsilon, random_start: false, ..cfg.clone() };
            pgd_attack(model, x, y, &one)
        }
        AttackKind::Cw => cw_pgd_attack(model, x, y, cfg),
    }
}

/// Mean CW margin `max_{j≠y} z_j − z_y` over the batch.
pub fn margin_loss<'g>(logits: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    let values = logits.value();
    let (_, classes) = values.require_matrix("margin_loss")?;
    if classes < 2 {
        return Err(Error::Domain("margin loss needs at least two classes".into()));
    }
    validate_labels(y, values.rows(), classes)?;
    let runner_up: Vec<usize> = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let row = values.row(i);
            let mut best = usize::MAX;
            for (j, &v) in row.iter().enumerate() {
                if j != yi && (best == usize::MAX || v > row[best]) {
                    best = j;
                }
            }
            best
        })
        .collect();
    let other = logits.gather(&runner_up)?;
    let own = logits.gather(y)?;
    Ok(other.sub(own)?.mean())
}

fn objective<'g>(logits: Var<'g>, y: &[usize], which: Objective) -> Result<Var<'g>> {
    match which {
        Objective::CrossEntropy => cross_entropy_loss(logits, y),
        Objective::Margin => margin_loss(logits, y),
    }
}

fn input_gradient(model: &DualEncoderModel, x: &Tensor, y: &[usize], which: Objective) -> Result<(f64, Tensor)> {
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let features = model.tuned().bind(&g, false).encode(xv)?;
    let protos = g.constant(model.prototypes().embeddings().clone());
    let logits = zero_shot_logits(features, protos, model.temperature())?;
    let loss = objective(logits, y, which)?;
    let value = loss.item()?;
    let grads = loss.backward()?;
    Ok((value, grads.wrt(xv)))
}

fn objective_value(model: &DualEncoderModel, x: &Tensor, y: &[usize], which: Objective) -> Result<(f64, Vec<usize>)> {
    let logits = model.logits(x, false)?;
    let preds = logits.argmax_rows();
    let g = Graph::new();
    let value = objective(g.constant(logits), y, which)?.item()?;
    Ok((value, preds))
}

fn run(model: &DualEncoderModel, x: &Tensor, y: &[usize], cfg: &AttackConfig, which: Objective) -> Result<AttackResult> {
    cfg.validate()?;
    let (rows, cols) = x.require_matrix("attack input")?;
    if cols != model.input_dim() {
        return Err(Error::Dimension(format!(
            "attack input has {cols} features, model expects {}",
            model.input_dim()
        )));
    }
    validate_labels(y, rows, model.classes())?;

    let mut x_adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in x_adv.data_mut() {
            *v += rng.random_range(-cfg.epsilon..=cfg.epsilon);
        }
        x_adv = project_linf(&x_adv, x, cfg.epsilon, cfg.clamp_min, cfg.clamp_max)?;
    }

    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);
    let mut zero_grad_coords = 0;
    for step in 0..cfg.steps {
        let (loss, grad) = input_gradient(model, &x_adv, y, which)?;
        if !grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite input gradient at attack step {step}")));
        }
        loss_trace.push(loss);
        for (v, &gi) in x_adv.data_mut().iter_mut().zip(grad.data()) {
            if gi == 0.0 {
                zero_grad_coords += 1;
            } else {
                *v += cfg.step_size * gi.signum();
            }
        }
        x_adv = project_linf(&x_adv, x, cfg.epsilon, cfg.clamp_min, cfg.clamp_max)?;
    }
    if zero_grad_coords > 0 {
        log::debug!("attack saw {zero_grad_coords} zero-gradient coordinates");
    }

    let (final_loss, preds) = objective_value(model, &x_adv, y, which)?;
    loss_trace.push(final_loss);
    let success_mask = preds.iter().zip(y).map(|(p, t)| p != t).collect();
    Ok(AttackResult { x_adv, loss_trace, success_mask, zero_grad_coords })
}
