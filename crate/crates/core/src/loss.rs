//! DiceCE objective and overlap metrics for binary segmentation.
//!
//! The network emits a single foreground logit channel; Dice is taken over
//! that channel only, with no background term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backward, Element, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_dice: 1.0,
            lambda_ce: 1.0,
            smooth: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_dice < 0.0 || self.lambda_ce < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_dice == 0.0 && self.lambda_ce == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        if self.smooth < 0.0 {
            return Err(Error::Config("dice smoothing must be non-negative".into()));
        }
        Ok(())
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct DiceCeBackward<T> {
    prob: Vec<T>,
    num: T,
    den: T,
    cfg: LossConfig,
}

impl<T: Element> Backward<T> for DiceCeBackward<T> {
    fn backward(&self, g: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let gt = inputs[1].data();
        let n = T::lit(self.prob.len() as f64);
        let (ld, lce) = (T::lit(self.cfg.lambda_dice), T::lit(self.cfg.lambda_ce));
        let two = T::lit(2.0);
        let den2 = self.den * self.den;
        let dz = self
            .prob
            .iter()
            .zip(gt)
            .map(|(&p, &y)| {
                let d_dice_dp = -(two * y * self.den - self.num) / den2;
                let d_dice = d_dice_dp * p * (T::one() - p);
                let d_ce = (p - y) / n;
                g[0] * (ld * d_dice + lce * d_ce)
            })
            .collect();
        vec![Some(dz), None]
    }

    fn saved_bytes(&self) -> usize {
        self.prob.len() * std::mem::size_of::<T>()
    }
}

/// Individual terms of the last evaluated loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub dice: f64,
    pub ce: f64,
}

fn terms<T: Element>(logits: &[T], gt: &[T], smooth: T) -> (Vec<T>, T, T, T) {
    let prob: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (mut spg, mut sp, mut sg, mut ce) = (T::zero(), T::zero(), T::zero(), T::zero());
    for ((&p, &y), &z) in prob.iter().zip(gt).zip(logits) {
        spg += p * y;
        sp += p;
        sg += y;
        // numerically stable BCE-with-logits
        ce += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
    }
    let num = T::lit(2.0) * spg + smooth;
    let den = sp + sg + smooth;
    (prob, num, den, ce / T::lit(logits.len() as f64))
}

/// `λ_D · (1 − (2Σpg + ε)/(Σp + Σg + ε)) + λ_CE · mean BCE`, with `p = σ(logits)`.
pub fn dice_ce_loss<T: Element>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    if logits.shape() != gt.shape() {
        return Err(Error::shape("dice_ce_loss", logits.shape(), gt.shape()));
    }
    let (prob, num, den, ce) = terms(logits.data(), gt.data(), T::lit(cfg.smooth));
    let dice = T::one() - num / den;
    let loss = T::lit(cfg.lambda_dice) * dice + T::lit(cfg.lambda_ce) * ce;
    if !tape.tracks(&[logits]) {
        return Ok(Tensor::scalar(loss));
    }
    Ok(tape.record(
        "dice_ce_loss",
        &[logits, gt],
        vec![loss],
        vec![1],
        DiceCeBackward {
            prob,
            num,
            den,
            cfg: *cfg,
        },
    ))
}

/// Dice and cross-entropy terms separately, for logging.
pub fn loss_terms<T: Element>(logits: &[T], gt: &[T], cfg: &LossConfig) -> LossTerms {
    let (_, num, den, ce) = terms(logits, gt, T::lit(cfg.smooth));
    LossTerms {
        dice: (T::one() - num / den).as_f64(),
        ce: ce.as_f64(),
    }
}

/// `σ(logit) > 0.5` per voxel.
pub fn binarize_logits<T: Element>(logits: &[T]) -> Vec<bool> {
    let half = T::lit(0.5);
    logits.iter().map(|&z| sigmoid(z) > half).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapCounts {
    pub pred: usize,
    pub gt: usize,
    pub intersection: usize,
}

impl OverlapCounts {
    pub fn new(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("metrics", &[pred.len()], &[gt.len()]));
        }
        let mut c = OverlapCounts {
            pred: 0,
            gt: 0,
            intersection: 0,
        };
        for (&a, &b) in pred.iter().zip(gt) {
            c.pred += a as usize;
            c.gt += b as usize;
            c.intersection += (a && b) as usize;
        }
        Ok(c)
    }

    pub fn dsc(&self) -> f64 {
        if self.pred + self.gt == 0 {
            return 1.0;
        }
        2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
    }

    pub fn iou(&self) -> f64 {
        let union = self.pred + self.gt - self.intersection;
        if union == 0 {
            return 1.0;
        }
        self.intersection as f64 / union as f64
    }

    /// `100 · | |pred| − |gt| | / |gt|`; undefined for an empty ground truth.
    pub fn vol_error_pct(&self) -> Option<f64> {
        (self.gt > 0).then(|| 100.0 * self.pred.abs_diff(self.gt) as f64 / self.gt as f64)
    }
}

pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(OverlapCounts::new(pred, gt)?.dsc())
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(OverlapCounts::new(pred, gt)?.iou())
}

pub fn vol_error_pct(pred: &[bool], gt: &[bool]) -> Result<Option<f64>> {
    Ok(OverlapCounts::new(pred, gt)?.vol_error_pct())
}
