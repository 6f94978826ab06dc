//! Training objectives.
//!
//! * `ce`: cross-entropy over the cosine/τ logits of the tuned encoder.
//! * `ca`: confidence-aware term, the mean over samples of
//!   `KL(P_adv,i ‖ P_clean,i) · (1 − P_adv[i, y_i])`, where `P_adv` comes from
//!   the tuned encoder on adversarial inputs and `P_clean` from the frozen
//!   encoder on clean inputs.
//! * `reg`: mean ℓ2 distance between tuned and frozen embeddings of the same
//!   adversarial input.
//! * `total = ce + α·ca + β·reg`.
//!
//! Everything computed from the frozen encoder enters the graph as a
//! constant, so no gradient ever reaches it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{zero_shot_logits, BoundEncoder, DualEncoderModel};
use crate::tensor::{Graph, Tensor, Var};

/// Argument order of the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(P_adv ‖ P_clean)`
    #[default]
    AdvFirst,
    /// `KL(P_clean ‖ P_adv)`
    CleanFirst,
}

/// Which inputs the cross-entropy term sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeInput {
    #[default]
    Adversarial,
    Clean,
    /// Average of the clean and adversarial cross-entropies.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CawConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Treat the confidence weight as a constant during backprop.
    pub detach_weight: bool,
    pub kl_direction: KlDirection,
    pub ce_input: CeInput,
}

impl Default for CawConfig {
    fn default() -> Self {
        Self {
            alpha: 6.0,
            beta: 3.0,
            detach_weight: true,
            kl_direction: KlDirection::AdvFirst,
            ce_input: CeInput::Adversarial,
        }
    }
}

impl CawConfig {
    /// Plain cross-entropy training.
    pub fn ce_only() -> Self {
        Self { alpha: 0.0, beta: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "alpha and beta must be finite and >= 0 (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "ce")]
    pub l_ce: f64,
    #[serde(rename = "ca")]
    pub l_ca: f64,
    #[serde(rename = "reg")]
    pub l_reg: f64,
    #[serde(rename = "total")]
    pub l_total: f64,
    /// Mean of `1 − P_adv[i, y_i]`.
    #[serde(rename = "mean_weight")]
    pub mean_confidence_weight: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_ca, self.l_reg, self.l_total, self.mean_confidence_weight]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub(crate) fn validate_labels(y: &[usize], rows: usize, classes: usize) -> Result<()> {
    if y.len() != rows {
        return Err(Error::Dimension(format!("{} labels for {rows} samples", y.len())));
    }
    if let Some((i, &bad)) = y.iter().enumerate().find(|(_, &v)| v >= classes) {
        return Err(Error::Domain(format!("label {bad} at index {i} out of range for {classes} classes")));
    }
    Ok(())
}

/// Batch mean of `−log softmax(logits)[i, y_i]`.
pub fn cross_entropy_loss<'g>(logits: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("cross_entropy: logits must be a matrix, got {shape:?}")));
    }
    validate_labels(y, shape[0], shape[1])?;
    Ok(logits.log_softmax_rows()?.gather(y)?.mean().neg())
}

/// `P[i, y_i]` for each row.
pub fn true_label_prob<'g>(probs: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("true_label_prob: expected a matrix, got {shape:?}")));
    }
    validate_labels(y, shape[0], shape[1])?;
    probs.gather(y)
}

/// Mean over rows of `KL_i · (1 − P_adv[i, y_i])`, with the KL argument order
/// set by `direction`.
pub fn confidence_aware_loss<'g>(
    p_adv: Var<'g>,
    p_clean: Var<'g>,
    y: &[usize],
    detach_weight: bool,
    direction: KlDirection,
) -> Result<Var<'g>> {
    let kl = match direction {
        KlDirection::AdvFirst => p_adv.kl_rows(p_clean)?,
        KlDirection::CleanFirst => p_clean.kl_rows(p_adv)?,
    };
    let weight = confidence_weight(p_adv, y, detach_weight)?;
    Ok(kl.mul(weight)?.mean())
}

fn confidence_weight<'g>(p_adv: Var<'g>, y: &[usize], detach: bool) -> Result<Var<'g>> {
    let w = true_label_prob(p_adv, y)?.affine(-1.0, 1.0);
    Ok(if detach { w.detach() } else { w })
}

/// Mean over samples of `‖tuned_i − frozen_i‖₂` (not squared).
pub fn feature_reg_loss<'g>(tuned_features: Var<'g>, frozen_features: Var<'g>) -> Result<Var<'g>> {
    Ok(tuned_features.sub(frozen_features)?.row_norms()?.mean())
}

/// `P_adv` (tuned encoder on `x_adv`) and `P_clean` (frozen encoder on
/// `x_clean`, recorded as a constant).
pub fn prediction_distributions<'g>(
    graph: &'g Graph,
    tuned: &BoundEncoder<'g>,
    model: &DualEncoderModel,
    x_clean: &Tensor,
    x_adv: &Tensor,
) -> Result<(Var<'g>, Var<'g>)> {
    check_aligned(x_clean, x_adv)?;
    let protos = graph.constant(model.prototypes().embeddings().clone());
    let f_adv = tuned.encode(graph.constant(x_adv.clone()))?;
    let p_adv = zero_shot_logits(f_adv, protos, model.temperature())?.softmax_rows()?;
    let p_clean = graph.constant(model.logits(x_clean, true)?.softmax_rows()?);
    Ok((p_adv, p_clean))
}

fn check_aligned(x_clean: &Tensor, x_adv: &Tensor) -> Result<()> {
    if x_clean.shape() != x_adv.shape() {
        return Err(Error::Dimension(format!(
            "clean batch {:?} and adversarial batch {:?} are not aligned",
            x_clean.shape(),
            x_adv.shape()
        )));
    }
    Ok(())
}

/// Graph handles for each term of the total objective.
pub struct LossTerms<'g> {
    pub ce: Var<'g>,
    pub ca: Var<'g>,
    pub reg: Var<'g>,
    pub total: Var<'g>,
    pub mean_weight: f64,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            l_ce: self.ce.item()?,
            l_ca: self.ca.item()?,
            l_reg: self.reg.item()?,
            l_total: self.total.item()?,
            mean_confidence_weight: self.mean_weight,
        })
    }
}

/// Records `ce + α·ca + β·reg` on `graph` with the tuned encoder bound as `tuned`.
pub fn loss_terms<'g>(
    graph: &'g Graph,
    tuned: &BoundEncoder<'g>,
    model: &DualEncoderModel,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    cfg: &CawConfig,
) -> Result<LossTerms<'g>> {
    cfg.validate()?;
    check_aligned(x_clean, x_adv)?;
    let rows = x_adv.rows();
    validate_labels(y, rows, model.classes())?;
    if rows == 0 {
        return Err(Error::Dimension("loss over an empty batch".into()));
    }
    let protos = graph.constant(model.prototypes().embeddings().clone());
    let tau = model.temperature();

    let f_adv_tuned = tuned.encode(graph.constant(x_adv.clone()))?;
    let logits_adv = zero_shot_logits(f_adv_tuned, protos, tau)?;
    let ce = match cfg.ce_input {
        CeInput::Adversarial => cross_entropy_loss(logits_adv, y)?,
        CeInput::Clean | CeInput::Mixed => {
            let f_clean = tuned.encode(graph.constant(x_clean.clone()))?;
            let clean_ce = cross_entropy_loss(zero_shot_logits(f_clean, protos, tau)?, y)?;
            if cfg.ce_input == CeInput::Clean {
                clean_ce
            } else {
                clean_ce.add(cross_entropy_loss(logits_adv, y)?)?.scale(0.5)
            }
        }
    };

    let p_adv = logits_adv.softmax_rows()?;
    let p_clean = graph.constant(model.logits(x_clean, true)?.softmax_rows()?);
    let ca = confidence_aware_loss(p_adv, p_clean, y, cfg.detach_weight, cfg.kl_direction)?;
    let weights = true_label_prob(p_adv, y)?.value();
    let mean_weight = weights.data().iter().map(|p| 1.0 - p).sum::<f64>() / rows as f64;

    let f_adv_frozen = graph.constant(model.frozen().encode(x_adv)?);
    let reg = feature_reg_loss(f_adv_tuned, f_adv_frozen)?;

    let total = ce.add(ca.scale(cfg.alpha))?.add(reg.scale(cfg.beta))?;
    Ok(LossTerms { ce, ca, reg, total, mean_weight })
}

/// Loss values only.
pub fn total_loss(
    model: &DualEncoderModel,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    cfg: &CawConfig,
) -> Result<LossBreakdown> {
    let g = Graph::new();
    let tuned = model.tuned().bind(&g, false);
    loss_terms(&g, &tuned, model, x_clean, x_adv, y, cfg)?.breakdown()
}

/// Loss values and the gradient of `total` for each tuned parameter tensor,
/// in [`crate::model::ImageEncoder::params`] order.
pub fn total_loss_with_grad(
    model: &DualEncoderModel,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    cfg: &CawConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let g = Graph::new();
    let tuned = model.tuned().bind(&g, true);
    let terms = loss_terms(&g, &tuned, model, x_clean, x_adv, y, cfg)?;
    let breakdown = terms.breakdown()?;
    let grads = terms.total.backward()?;
    Ok((breakdown, tuned.params().into_iter().map(|p| grads.wrt(p)).collect()))
}
