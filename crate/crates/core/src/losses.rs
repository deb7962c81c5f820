//! Segmentation losses with exact gradients w.r.t. predicted confidences.
//!
//! BCE is averaged over phrases and pixels while Dice is summed over
//! phrases; that asymmetry is intentional and matches the training
//! objective this crate reproduces.

use crate::domain::{ConfidenceMap, MaskGrid, PseudoLabel};
use crate::error::{Error, Result};

/// Clip applied to probabilities before taking logs.
pub const CLIP_EPS: f64 = 1e-7;

/// Additive smoothing in the Dice ratio; makes empty-vs-empty a zero loss.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Form of the pixelwise KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlVariant {
    /// `m ln(m/p)` only. Not a divergence: may be negative.
    Verbatim,
    /// Two-outcome KL between Bernoulli(m) and Bernoulli(p).
    #[default]
    Bernoulli,
}

impl KlVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            KlVariant::Verbatim => "verbatim",
            KlVariant::Bernoulli => "bernoulli",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "verbatim" => Some(KlVariant::Verbatim),
            "bernoulli" => Some(KlVariant::Bernoulli),
            _ => None,
        }
    }
}

/// λ coefficients of the supervised and unsupervised objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub sup_bce: f64,
    pub sup_dice: f64,
    pub unsup_bce: f64,
    pub unsup_dice: f64,
    pub unsup_kl: f64,
    /// Multiplier of the whole unsupervised objective in the total loss.
    pub unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sup_bce: 1.0,
            sup_dice: 1.0,
            unsup_bce: 1.0,
            unsup_dice: 1.0,
            unsup_kl: 1.0,
            unsup: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sup_bce,
            self.sup_dice,
            self.unsup_bce,
            self.unsup_dice,
            self.unsup_kl,
            self.unsup,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhraseLoss {
    pub bce: f64,
    pub dice: f64,
    pub kl: f64,
}

/// Reduced loss components. `total` is the λ-weighted sum of the three.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub kl: f64,
    pub total: f64,
    pub per_phrase: Vec<PhraseLoss>,
}

/// Objective value plus d total / d confidence for every phrase map.
#[derive(Clone, Debug, Default)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::spec(format!(
            "{what}: prediction is {}x{}, target is {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Clipped value and derivative of the clip (1 inside, 0 where clipped).
#[inline]
fn clip(p: f64) -> (f64, f64) {
    if p < CLIP_EPS {
        (CLIP_EPS, 0.0)
    } else if p > 1.0 - CLIP_EPS {
        (1.0 - CLIP_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

/// Pixel-averaged, optionally pixel-weighted binary cross-entropy.
pub fn bce_loss(
    pred: &ConfidenceMap,
    target: &MaskGrid,
    pixel_weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    check_dims(pred.dims(), target.dims(), "bce")?;
    let n = pred.len();
    if let Some(w) = pixel_weights {
        if w.len() != n {
            return Err(Error::spec(format!(
                "bce: {} pixel weights for {n} pixels",
                w.len()
            )));
        }
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (k, (&p_raw, &g)) in pred.as_slice().iter().zip(target.as_slice()).enumerate() {
        let w = pixel_weights.map_or(1.0, |w| w[k]);
        let (p, dclip) = clip(p_raw);
        let (loss, dloss) = if g {
            (-p.ln(), -1.0 / p)
        } else {
            (-(1.0 - p).ln(), 1.0 / (1.0 - p))
        };
        total += w * loss;
        grad.push(w * dloss * dclip * inv_n);
    }
    Ok((total * inv_n, grad))
}

/// Soft Dice loss of one phrase, optionally scaled by a mask weight.
pub fn dice_loss(
    pred: &ConfidenceMap,
    target: &MaskGrid,
    mask_weight: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    check_dims(pred.dims(), target.dims(), "dice")?;
    let w = mask_weight.unwrap_or(1.0);
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&p, &g) in pred.as_slice().iter().zip(target.as_slice()) {
        sum_p += p;
        if g {
            inter += p;
            sum_g += 1.0;
        }
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_g + DICE_SMOOTH;
    let value = w * (1.0 - num / den);
    let den2 = den * den;
    let grad = target
        .as_slice()
        .iter()
        .map(|&g| {
            let dnum = if g { 2.0 } else { 0.0 };
            -w * (dnum * den - num) / den2
        })
        .collect();
    Ok((value, grad))
}

/// Pixel-averaged KL of the student prediction from the teacher confidence.
pub fn kl_loss(
    pred: &ConfidenceMap,
    teacher: &ConfidenceMap,
    variant: KlVariant,
) -> Result<(f64, Vec<f64>)> {
    check_dims(pred.dims(), teacher.dims(), "kl")?;
    let n = pred.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&p_raw, &m_raw) in pred.as_slice().iter().zip(teacher.as_slice()) {
        let (p, dclip) = clip(p_raw);
        let (m, _) = clip(m_raw);
        let (loss, dloss) = match variant {
            KlVariant::Verbatim => (m * (m / p).ln(), -m / p),
            KlVariant::Bernoulli => (
                m * (m / p).ln() + (1.0 - m) * ((1.0 - m) / (1.0 - p)).ln(),
                -m / p + (1.0 - m) / (1.0 - p),
            ),
        };
        total += loss;
        grad.push(dloss * dclip * inv_n);
    }
    Ok((total * inv_n, grad))
}

fn check_count(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::spec(format!("{what}: {a} predictions for {b} targets")));
    }
    Ok(())
}

/// `λ1 · mean_j BCE_j + λ2 · Σ_j Dice_j` over the phrases of one sample.
pub fn supervised_objective(
    preds: &[ConfidenceMap],
    truths: &[MaskGrid],
    weights: &LossWeights,
) -> Result<Objective> {
    check_count(preds.len(), truths.len(), "supervised objective")?;
    let n = preds.len();
    let mut out = Objective::default();
    if n == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / n as f64;
    for (pred, truth) in preds.iter().zip(truths) {
        let (bce, gb) = bce_loss(pred, truth, None)?;
        let (dice, gd) = dice_loss(pred, truth, None)?;
        out.breakdown.bce += bce * inv_n;
        out.breakdown.dice += dice;
        out.breakdown.per_phrase.push(PhraseLoss { bce, dice, kl: 0.0 });
        out.grads.push(
            gb.iter()
                .zip(&gd)
                .map(|(b, d)| weights.sup_bce * inv_n * b + weights.sup_dice * d)
                .collect(),
        );
    }
    let b = &mut out.breakdown;
    b.total = weights.sup_bce * b.bce + weights.sup_dice * b.dice;
    Ok(out)
}

/// `λ1 · mean_j wBCE_j + λ2 · Σ_j wDice_j + λ3 · mean_j KL_j`.
///
/// BCE takes the pseudo-label's pixel weights, Dice its mask weight; the KL
/// term compares against the raw teacher confidences and is never weighted.
pub fn unsupervised_objective(
    preds: &[ConfidenceMap],
    pseudo: &[PseudoLabel],
    teacher: &[ConfidenceMap],
    weights: &LossWeights,
    variant: KlVariant,
) -> Result<Objective> {
    check_count(preds.len(), pseudo.len(), "unsupervised objective")?;
    check_count(preds.len(), teacher.len(), "unsupervised objective")?;
    let n = preds.len();
    let mut out = Objective::default();
    if n == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / n as f64;
    for ((pred, label), conf) in preds.iter().zip(pseudo).zip(teacher) {
        let (bce, gb) = bce_loss(pred, &label.mask, label.pixel_weights.as_deref())?;
        let (dice, gd) = dice_loss(pred, &label.mask, label.mask_weight)?;
        let (kl, gk) = kl_loss(pred, conf, variant)?;
        out.breakdown.bce += bce * inv_n;
        out.breakdown.dice += dice;
        out.breakdown.kl += kl * inv_n;
        out.breakdown.per_phrase.push(PhraseLoss { bce, dice, kl });
        out.grads.push(
            (0..pred.len())
                .map(|k| {
                    weights.unsup_bce * inv_n * gb[k]
                        + weights.unsup_dice * gd[k]
                        + weights.unsup_kl * inv_n * gk[k]
                })
                .collect(),
        );
    }
    let b = &mut out.breakdown;
    b.total = weights.unsup_bce * b.bce + weights.unsup_dice * b.dice + weights.unsup_kl * b.kl;
    Ok(out)
}
