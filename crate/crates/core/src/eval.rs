//! Clean and robust accuracy, and the three-arm loss ablation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::CawConfig;
use crate::model::DualEncoderModel;
use crate::training::{fit, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracy {
    pub attack: String,
    pub config: AttackConfig,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub samples: usize,
    pub clean_accuracy: f64,
    pub robust: Vec<RobustAccuracy>,
    pub model_digest: String,
}

impl EvalReport {
    /// Accuracy under the first configured attack, or clean accuracy when none.
    pub fn primary_robust(&self) -> f64 {
        self.robust.first().map_or(self.clean_accuracy, |r| r.accuracy)
    }
}

/// Accuracy of `model` on `data`, classifying against the dataset's own
/// prototypes. Batches are attacked in parallel; batch `k` uses attack seed
/// `seed + k` so results do not depend on scheduling.
pub fn evaluate(model: &DualEncoderModel, data: &Dataset, attacks: &[AttackConfig], batch_size: usize) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("eval batch_size must be >= 1".into()));
    }
    for a in attacks {
        a.validate()?;
    }
    let view = if data.prototypes == *model.prototypes() {
        model.clone()
    } else {
        model.with_prototypes(data.prototypes.clone())?
    };
    if data.input_dim() != view.input_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            data.input_dim(),
            view.input_dim()
        )));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<&[usize]> = indices.chunks(batch_size).collect();

    let per_batch: Vec<Vec<usize>> = batches
        .par_iter()
        .enumerate()
        .map(|(k, idx)| -> Result<Vec<usize>> {
            let (x, y) = data.batch(idx);
            let mut correct = Vec::with_capacity(attacks.len() + 1);
            correct.push(count_correct(&view.predict(&x, false)?, &y));
            for a in attacks {
                let cfg = AttackConfig { seed: a.seed.wrapping_add(k as u64), ..a.clone() };
                let r = attack(&view, &x, &y, &cfg)?;
                correct.push(r.success_mask.iter().filter(|&&s| !s).count());
            }
            Ok(correct)
        })
        .collect::<Result<_>>()?;

    let mut totals = vec![0usize; attacks.len() + 1];
    for counts in &per_batch {
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    let frac = |c: usize| if data.is_empty() { 0.0 } else { c as f64 / data.len() as f64 };
    Ok(EvalReport {
        dataset: data.name.clone(),
        samples: data.len(),
        clean_accuracy: frac(totals[0]),
        robust: attacks
            .iter()
            .zip(&totals[1..])
            .map(|(a, &c)| RobustAccuracy { attack: a.label(), config: a.clone(), accuracy: frac(c) })
            .collect(),
        model_digest: model.digest(),
    })
}

fn count_correct(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(p, t)| p == t).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    pub robust_accuracy: f64,
    pub clean_accuracy: f64,
    pub average: f64,
    pub report: EvalReport,
}

impl AblationArm {
    fn new(name: &str, alpha: f64, beta: f64, report: EvalReport) -> Self {
        let robust_accuracy = report.primary_robust();
        let clean_accuracy = report.clean_accuracy;
        Self {
            name: name.into(),
            alpha,
            beta,
            robust_accuracy,
            clean_accuracy,
            average: 0.5 * (robust_accuracy + clean_accuracy),
            report,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// The snapshotted starting point, evaluated before any fine-tuning.
    pub reference: AblationArm,
    /// `L_CE`, `+L_CA`, `+L_Reg`, in that order.
    pub arms: Vec<AblationArm>,
}

/// Fine-tunes three copies of `base` (same snapshot, same seed) with
/// `(α, β) = (0, 0)`, `(α, 0)` and `(α, β)` taken from `cfg.loss`, and
/// evaluates each on `eval_data`.
pub fn run_ablation(
    base: &DualEncoderModel,
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
    attacks: &[AttackConfig],
    batch_size: usize,
) -> Result<AblationReport> {
    let reference = AblationArm::new("reference", 0.0, 0.0, evaluate(base, eval_data, attacks, batch_size)?);
    let (alpha, beta) = (cfg.loss.alpha, cfg.loss.beta);
    let mut arms = Vec::with_capacity(3);
    for (name, a, b) in [("L_CE", 0.0, 0.0), ("+L_CA", alpha, 0.0), ("+L_Reg", alpha, beta)] {
        let arm_cfg = TrainConfig { loss: CawConfig { alpha: a, beta: b, ..cfg.loss.clone() }, ..cfg.clone() };
        let mut model = base.clone();
        fit(&mut model, train_data, &arm_cfg)?;
        let report = evaluate(&model, eval_data, attacks, batch_size)?;
        log::info!("ablation arm {name}: clean {:.4} robust {:.4}", report.clean_accuracy, report.primary_robust());
        arms.push(AblationArm::new(name, a, b, report));
    }
    Ok(AblationReport { reference, arms })
}

/// `arm,alpha,beta,robust,clean,average` with a header row.
pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("arm,alpha,beta,robust,clean,average\n");
    for a in std::iter::once(&report.reference).chain(&report.arms) {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            a.name, a.alpha, a.beta, a.robust_accuracy, a.clean_accuracy, a.average
        ));
    }
    out
}
