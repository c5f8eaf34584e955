//! Training objectives of the two-stage model and their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

fn clamp_prob<S: Scalar>(p: S) -> S {
    let eps = S::of(PROB_EPS);
    p.max(eps).min(S::one() - eps)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    Ok(())
}

/// Penalty-reduced focal loss over a heatmap.
///
/// Cells with `y == 1` contribute `(1−ŷ)^α·log ŷ`, all others
/// `(1−y)^β·ŷ^α·log(1−ŷ)`; the sum is negated and divided by the number of
/// positive cells (at least one).
pub fn focal_loss<S: Scalar>(pred: &[S], target: &[S], alpha: S, beta: S) -> Result<S> {
    check_len(pred.len(), target.len())?;
    let one = S::one();
    let mut sum = S::zero();
    let mut positives = 0usize;
    for (&p, &y) in pred.iter().zip(target) {
        let p = clamp_prob(p);
        if y == one {
            positives += 1;
            sum = sum + (one - p).powf(alpha) * p.ln();
        } else {
            sum = sum + (one - y).powf(beta) * p.powf(alpha) * (one - p).ln();
        }
    }
    Ok(-sum / S::of(positives.max(1) as f64))
}

/// Gradient of [`focal_loss`] with respect to `pred` (zero where the clamp is active).
pub fn focal_loss_grad<S: Scalar>(pred: &[S], target: &[S], alpha: S, beta: S) -> Result<Vec<S>> {
    check_len(pred.len(), target.len())?;
    let one = S::one();
    let eps = S::of(PROB_EPS);
    let n = S::of(target.iter().filter(|&&y| y == one).count().max(1) as f64);
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            if p <= eps || p >= one - eps {
                return S::zero();
            }
            let g = if y == one {
                -alpha * (one - p).powf(alpha - one) * p.ln() + (one - p).powf(alpha) / p
            } else {
                (one - y).powf(beta)
                    * (alpha * p.powf(alpha - one) * (one - p).ln() - p.powf(alpha) / (one - p))
            };
            -g / n
        })
        .collect())
}

/// `−log probs[true_class]` on a probability vector.
pub fn cross_entropy_loss<S: Scalar>(probs: &[S], true_class: usize) -> Result<S> {
    let p = probs.get(true_class).ok_or_else(|| {
        Error::invalid(
            "class index",
            format!("{true_class} out of range for {} classes", probs.len()),
        )
    })?;
    Ok(-clamp_prob(*p).ln())
}

/// Softmax where `mask[i] == false` entries get probability exactly zero.
pub fn masked_softmax<S: Scalar>(logits: &[S], mask: &[bool]) -> Vec<S> {
    debug_assert_eq!(logits.len(), mask.len());
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return vec![S::zero(); logits.len()];
    }
    let exps: Vec<S> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { S::zero() })
        .collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    masked_softmax(logits, &vec![true; logits.len()])
}

/// Cross-entropy of a softmax over `logits`, computed through log-sum-exp.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], true_class: usize) -> Result<S> {
    if true_class >= logits.len() {
        return Err(Error::invalid(
            "class index",
            format!("{true_class} out of range for {} classes", logits.len()),
        ));
    }
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
    Ok(lse - logits[true_class])
}

/// `softmax(logits) − onehot(true_class)`.
pub fn softmax_cross_entropy_grad<S: Scalar>(logits: &[S], true_class: usize) -> Vec<S> {
    let mut g = softmax(logits);
    g[true_class] = g[true_class] - S::one();
    g
}

/// Sum over components of `0.5·e²` for `|e| < 1`, else `|e| − 0.5`.
pub fn smooth_l1_loss<S: Scalar>(pred: &[S], target: &[S]) -> Result<S> {
    check_len(pred.len(), target.len())?;
    let half = S::of(0.5);
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let e = p - t;
            if e.abs() < S::one() {
                half * e * e
            } else {
                e.abs() - half
            }
        })
        .sum())
}

pub fn smooth_l1_grad<S: Scalar>(pred: &[S], target: &[S]) -> Result<Vec<S>> {
    check_len(pred.len(), target.len())?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let e = p - t;
            if e.abs() < S::one() {
                e
            } else {
                e.signum()
            }
        })
        .collect())
}

/// Mean binary cross-entropy between a `[0,1]` prediction and a binary mask.
pub fn seg_loss<S: Scalar>(pred: &[S], target: &[S]) -> Result<S> {
    check_len(pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok(S::zero());
    }
    let one = S::one();
    let sum: S = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (one - y) * (one - p).ln())
        })
        .sum();
    Ok(sum / S::of(pred.len() as f64))
}

pub fn seg_loss_grad<S: Scalar>(pred: &[S], target: &[S]) -> Result<Vec<S>> {
    check_len(pred.len(), target.len())?;
    let (one, eps) = (S::one(), S::of(PROB_EPS));
    let n = S::of(pred.len().max(1) as f64);
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            if p <= eps || p >= one - eps {
                S::zero()
            } else {
                (p - y) / (p * (one - p)) / n
            }
        })
        .collect())
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts<S> {
    pub l_seg: S,
    pub l_det: S,
    pub l_cls: S,
    pub l_reg: S,
    pub l_offset: Option<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport<S> {
    pub l_seg: S,
    pub l_det: S,
    pub l_cls: S,
    pub l_reg: S,
    pub l_offset: Option<S>,
    pub total: S,
}

/// Weights of the multi-task objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_offset_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.01,
            use_offset_loss: false,
        }
    }
}

/// `L = L_seg + L_det + λ₁·L_cls + λ₂·L_reg`, plus `L_offset` (weight 1) when enabled.
pub fn total_loss<S: Scalar>(parts: LossParts<S>, weights: &LossWeights) -> Result<LossReport<S>> {
    let z = S::zero();
    let offset = if weights.use_offset_loss {
        parts.l_offset
    } else {
        None
    };
    let all = [
        parts.l_seg,
        parts.l_det,
        parts.l_cls,
        parts.l_reg,
        offset.unwrap_or(z),
    ];
    if all.iter().any(|v| !(*v >= z)) {
        return Err(Error::invalid(
            "loss parts",
            "components must be non-negative",
        ));
    }
    let mut total = parts.l_seg
        + parts.l_det
        + S::of(weights.lambda1) * parts.l_cls
        + S::of(weights.lambda2) * parts.l_reg;
    if let Some(o) = offset {
        total = total + o;
    }
    Ok(LossReport {
        l_seg: parts.l_seg,
        l_det: parts.l_det,
        l_cls: parts.l_cls,
        l_reg: parts.l_reg,
        l_offset: offset,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn parts(s: f64, d: f64, c: f64, r: f64) -> LossParts<f64> {
        LossParts {
            l_seg: s,
            l_det: d,
            l_cls: c,
            l_reg: r,
            l_offset: None,
        }
    }

    #[test]
    fn focal_closed_forms() {
        let (a, b) = (2.0, 4.0);
        assert!(focal_loss(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], a, b).unwrap() < 1e-12);
        let pos = focal_loss(&[0.5], &[1.0], a, b).unwrap();
        assert!((pos - 0.25 * LN2).abs() < 1e-12);
        assert!((pos - 0.17329).abs() < 5e-6);
        let neg = focal_loss(&[0.5], &[0.0], a, b).unwrap();
        assert!((neg - 0.25 * LN2).abs() < 1e-12);
        assert!(focal_loss(&[0.5], &[0.0, 1.0], a, b).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert!(cross_entropy_loss(&[0.0, 1.0, 0.0], 1).unwrap() < 1e-6);
        let u = cross_entropy_loss(&[0.25; 4], 3).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12 && (u - 1.38629).abs() < 5e-6);
        let t: f64 = cross_entropy_loss(&[0.1, 0.9], 0).unwrap();
        assert!((t - 2.30259).abs() < 5e-6);
        assert!(cross_entropy_loss(&[0.5, 0.5], 2).is_err());
        let via_logits = softmax_cross_entropy(&[0.0; 4], 2).unwrap();
        assert!((via_logits - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_closed_forms() {
        assert_eq!(smooth_l1_loss(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1_loss(&[0.5, 0.0], &[0.0, 0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1_loss(&[2.0, 0.0], &[0.0, 0.0]).unwrap(), 1.5);
    }

    #[test]
    fn seg_closed_forms() {
        assert!(seg_loss(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0]).unwrap() < 1e-6);
        for target in [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]] {
            assert!((seg_loss(&[0.5, 0.5], &target).unwrap() - LN2).abs() < 1e-12);
        }
        let worst = seg_loss(&[1.0; 3], &[0.0; 3]).unwrap();
        assert!((worst + (PROB_EPS).ln()).abs() < 1e-6);
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let p = masked_softmax(&[1.0, 5.0, 2.0], &[true, false, true]);
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(masked_softmax(&[1.0], &[false]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(
            total_loss(parts(1.0, 1.0, 1.0, 1.0), &w).unwrap().total,
            2.11
        );
        assert_eq!(
            total_loss(parts(0.0, 0.0, 0.0, 0.0), &w).unwrap().total,
            0.0
        );
        assert_eq!(
            total_loss(parts(0.0, 0.0, 1.0, 0.0), &w).unwrap().total,
            0.1
        );
        assert!(total_loss(parts(-1.0, 0.0, 0.0, 0.0), &w).is_err());

        let mut with_offset = parts(1.0, 0.0, 0.0, 0.0);
        with_offset.l_offset = Some(0.5);
        assert_eq!(total_loss(with_offset, &w).unwrap().total, 1.0);
        let w_on = LossWeights {
            use_offset_loss: true,
            ..w
        };
        assert_eq!(total_loss(with_offset, &w_on).unwrap().total, 1.5);
    }

    #[test]
    fn total_loss_is_linear() {
        let w = LossWeights::default();
        let base = total_loss(parts(0.3, 0.7, 1.9, 4.2), &w).unwrap().total;
        for (i, coeff) in [1.0, 1.0, 0.1, 0.01].into_iter().enumerate() {
            let mut p = [0.3, 0.7, 1.9, 4.2];
            p[i] += 1.0;
            let bumped = total_loss(parts(p[0], p[1], p[2], p[3]), &w).unwrap().total;
            assert!((bumped - base - coeff).abs() < 1e-12);
        }
    }
}
