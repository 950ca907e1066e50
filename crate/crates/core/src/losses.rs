//! Loss terms of the task objective and their weighted combination.

use migs_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::eval::FeatureExtractor;

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub box_l1: f64,
    pub gan_global: f64,
    pub gan_obj: f64,
    pub aux: f64,
    pub perceptual: f64,
    pub image_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_l1: 10.0,
            gan_global: 0.01,
            gan_obj: 0.01,
            aux: 0.1,
            perceptual: 1.0,
            image_l1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.box_l1,
            self.gan_global,
            self.gan_obj,
            self.aux,
            self.perceptual,
            self.image_l1,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MigsError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Which side the auxiliary classification loss trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTarget {
    #[default]
    Both,
    GeneratorOnly,
    DiscriminatorOnly,
}

impl AuxTarget {
    pub fn trains_generator(self) -> bool {
        self != AuxTarget::DiscriminatorOnly
    }

    pub fn trains_discriminator(self) -> bool {
        self != AuxTarget::GeneratorOnly
    }
}

/// Scalar values of every term. The adversarial entries hold the quantity
/// each side minimises: `gan_*_d` is the negated adversarial objective and
/// `gan_*_g` the non-saturating generator loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub box_l1: f64,
    pub gan_global_g: f64,
    pub gan_global_d: f64,
    pub gan_obj_g: f64,
    pub gan_obj_d: f64,
    pub aux: f64,
    pub aux_d: f64,
    pub perceptual: f64,
    pub image_l1: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.box_l1,
            self.gan_global_g,
            self.gan_global_d,
            self.gan_obj_g,
            self.gan_obj_d,
            self.aux,
            self.aux_d,
            self.perceptual,
            self.image_l1,
            self.total_g,
            self.total_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `(total_g, total_d)` from the components.
pub fn total_task_loss(b: &LossBreakdown, w: &LossWeights) -> (f64, f64) {
    let g = w.box_l1 * b.box_l1
        + w.gan_global * b.gan_global_g
        + w.gan_obj * b.gan_obj_g
        + w.aux * b.aux
        + w.perceptual * b.perceptual
        + w.image_l1 * b.image_l1;
    let d = w.gan_global * b.gan_global_d + w.gan_obj * b.gan_obj_d + w.aux * b.aux_d;
    (g, d)
}

/// Adversarial objective `E log D(real) + E log(1 − D(fake))` with
/// `D = σ(logit)`; never positive.
pub fn gan_value(tape: &Tape, real_logits: Var, fake_logits: Var) -> Var {
    let r = tape.mean(tape.log_sigmoid_clamped(real_logits, LOG_FLOOR));
    let f = tape.mean(tape.log_one_minus_sigmoid_clamped(fake_logits, LOG_FLOOR));
    tape.add(r, f)
}

/// Discriminator loss: the negated adversarial objective.
pub fn gan_loss_d(tape: &Tape, real_logits: Var, fake_logits: Var) -> Var {
    tape.scale(gan_value(tape, real_logits, fake_logits), -1.0)
}

/// Non-saturating generator loss `−E log D(fake)`.
pub fn gan_loss_g(tape: &Tape, fake_logits: Var) -> Var {
    tape.scale(
        tape.mean(tape.log_sigmoid_clamped(fake_logits, LOG_FLOOR)),
        -1.0,
    )
}

fn mean_abs_diff(tape: &Tape, a: Var, b: Var) -> Var {
    tape.mean(tape.abs(tape.sub(a, b)))
}

/// Mean absolute difference over all `4N` box coordinates.
pub fn box_loss(tape: &Tape, pred: Var, gt: Var) -> Result<Var> {
    let (sp, sg) = (tape.shape(pred), tape.shape(gt));
    if sp != sg || sp.len() != 2 || sp[1] != 4 {
        return Err(MigsError::Contract(format!(
            "box loss shapes {sp:?} vs {sg:?}"
        )));
    }
    Ok(mean_abs_diff(tape, pred, gt))
}

/// Mean absolute pixel difference.
pub fn image_l1(tape: &Tape, pred: Var, gt: Var) -> Result<Var> {
    let (sp, sg) = (tape.shape(pred), tape.shape(gt));
    if sp != sg {
        return Err(MigsError::Contract(format!(
            "image shapes {sp:?} vs {sg:?}"
        )));
    }
    Ok(mean_abs_diff(tape, pred, gt))
}

/// Sum over extractor levels of the mean absolute feature difference.
/// Images are `[B,3,H,W]` in `[-1,1]`.
pub fn perceptual_loss(
    tape: &Tape,
    pred: Var,
    gt: Var,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    let (sp, sg) = (tape.shape(pred), tape.shape(gt));
    if sp != sg {
        return Err(MigsError::Contract(format!(
            "image shapes {sp:?} vs {sg:?}"
        )));
    }
    let to01 = |x: Var| tape.add_scalar(tape.scale(x, 0.5), 0.5);
    let fp = extractor.levels(tape, to01(pred));
    let fg = extractor.levels(tape, to01(gt));
    let terms: Vec<Var> = fp
        .into_iter()
        .zip(fg)
        .map(|(a, b)| mean_abs_diff(tape, a, b))
        .collect();
    Ok(tape.add_n(&terms))
}

/// Mean softmax cross-entropy of `[N,K]` logits.
pub fn aux_obj_loss(tape: &Tape, class_logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(class_logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(MigsError::Contract(format!(
            "{} labels for logits {s:?}",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(MigsError::Contract(format!(
            "label {l} outside {} classes",
            s[1]
        )));
    }
    Ok(tape.cross_entropy(class_logits, labels))
}
