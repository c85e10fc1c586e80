//! Training objectives and their derivatives.

use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, l2_norm, Embedding};
use crate::error::{Result, VlaadError};
use crate::mil::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sim: f64,
    pub l_cls: f64,
    pub s_sim: f64,
    pub s_cls: f64,
    pub l_total: f64,
}

/// Cosine embedding loss with zero margin: `1 - cos` for matched pairs,
/// `max(0, cos)` for unmatched ones.
pub fn cosine_alignment_loss(e_video: &Embedding, e_text: &Embedding, matched: bool) -> Result<f64> {
    let c = cosine(&e_video.values, &e_text.values)?;
    Ok(alignment_from_cosine(c, matched))
}

pub(crate) fn alignment_from_cosine(c: f64, matched: bool) -> f64 {
    if matched {
        1.0 - c
    } else {
        c.max(0.0)
    }
}

/// d(alignment)/d(cos).
pub(crate) fn alignment_cosine_grad(c: f64, matched: bool) -> f64 {
    if matched {
        -1.0
    } else if c > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Gradient of `cos(a, b)` with respect to `a`, plus the cosine itself.
pub(crate) fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > 0.0 && nb > 0.0) {
        return Err(VlaadError::Degenerate("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let c = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    Ok((c, grad))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit, `pos_weight` scaling the positive term.
pub fn binary_cross_entropy_from_logit(logit: f64, y: bool, pos_weight: f64) -> Result<f64> {
    if !logit.is_finite() {
        return Err(VlaadError::NonFinite("logit"));
    }
    if !(pos_weight > 0.0) || !pos_weight.is_finite() {
        return Err(VlaadError::invalid(format!("pos_weight must be positive, got {pos_weight}")));
    }
    Ok(if y {
        pos_weight * softplus(-logit)
    } else {
        softplus(logit)
    })
}

/// d(BCE)/d(logit).
pub(crate) fn bce_logit_grad(logit: f64, y: bool, pos_weight: f64) -> f64 {
    if y {
        -pos_weight * sigmoid(-logit)
    } else {
        sigmoid(logit)
    }
}

/// Snippet-level alignment aggregated per bag label: attention-weighted
/// matched loss for positives, uniform mean of unmatched loss for negatives.
pub fn mil_alignment_loss(
    adapted: &[Embedding],
    e_text: &Embedding,
    attention: &[f64],
    y: bool,
) -> Result<f64> {
    if adapted.is_empty() {
        return Err(VlaadError::Empty("snippets"));
    }
    let cosines = adapted
        .iter()
        .map(|e| cosine(&e.values, &e_text.values))
        .collect::<Result<Vec<_>>>()?;
    mil_alignment_from_cosines(&cosines, attention, y)
}

pub(crate) fn mil_alignment_from_cosines(cosines: &[f64], attention: &[f64], y: bool) -> Result<f64> {
    if y {
        if attention.len() != cosines.len() {
            return Err(VlaadError::DimensionMismatch {
                expected: cosines.len(),
                actual: attention.len(),
            });
        }
        let total: f64 = attention.iter().sum();
        if (total - 1.0).abs() > 1e-6 || attention.iter().any(|&a| a < 0.0) {
            return Err(VlaadError::invalid(format!(
                "attention must be a distribution (sums to {total})"
            )));
        }
        Ok(attention
            .iter()
            .zip(cosines)
            .map(|(a, &c)| a * alignment_from_cosine(c, true))
            .sum())
    } else {
        let t = cosines.len() as f64;
        Ok(cosines.iter().map(|&c| alignment_from_cosine(c, false)).sum::<f64>() / t)
    }
}

/// `exp(-s_sim)/2 * L_sim + exp(-s_cls)/2 * L_cls + s_sim + s_cls`,
/// where each `s` is a log-variance.
pub fn uncertainty_weighted_total(l_sim: f64, l_cls: f64, s_sim: f64, s_cls: f64) -> Result<LossBreakdown> {
    if [l_sim, l_cls, s_sim, s_cls].iter().any(|v| !v.is_finite()) {
        return Err(VlaadError::NonFinite("loss terms"));
    }
    if l_sim < 0.0 || l_cls < 0.0 {
        return Err(VlaadError::invalid("component losses must be non-negative"));
    }
    let l_total = 0.5 * (-s_sim).exp() * l_sim + 0.5 * (-s_cls).exp() * l_cls + s_sim + s_cls;
    Ok(LossBreakdown {
        l_sim,
        l_cls,
        s_sim,
        s_cls,
        l_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Source;

    fn emb(v: Vec<f64>) -> Embedding {
        Embedding::new(v, Source::Video).unwrap()
    }

    #[test]
    fn cosine_loss_cases() {
        let a = emb(vec![1.0, 0.0]);
        let b = emb(vec![0.0, 1.0]);
        assert_eq!(cosine_alignment_loss(&a, &a, true).unwrap(), 0.0);
        assert_eq!(cosine_alignment_loss(&a, &b, false).unwrap(), 0.0);
        // cos = 0.5
        let c = emb(vec![0.5, 3f64.sqrt() / 2.0]);
        assert!((cosine_alignment_loss(&a, &c, true).unwrap() - 0.5).abs() < 1e-12);
        assert!((cosine_alignment_loss(&a, &c, false).unwrap() - 0.5).abs() < 1e-12);
        // Opposite vectors: matched hits the top of its range, unmatched clamps.
        let neg = emb(vec![-1.0, 0.0]);
        assert!((cosine_alignment_loss(&a, &neg, true).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(cosine_alignment_loss(&a, &neg, false).unwrap(), 0.0);
    }

    #[test]
    fn cosine_loss_zero_norm() {
        let z = Embedding {
            values: vec![0.0, 0.0],
            source: Source::Video,
        };
        assert!(cosine_alignment_loss(&z, &emb(vec![1.0, 0.0]), true).is_err());
    }

    #[test]
    fn bce_reference_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((binary_cross_entropy_from_logit(0.0, true, 1.0).unwrap() - ln2).abs() < 1e-15);
        assert!((binary_cross_entropy_from_logit(0.0, false, 1.0).unwrap() - ln2).abs() < 1e-15);
        // 3 * log(1 + e^-2), evaluated naively in f64.
        let naive = 3.0 * (1.0 + (-2.0f64).exp()).ln();
        let got = binary_cross_entropy_from_logit(2.0, true, 3.0).unwrap();
        assert!((got - naive).abs() < 1e-12);
        assert!((got - 0.380_784_033).abs() < 1e-9);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        for x in [-1e3, 1e3] {
            for y in [true, false] {
                let v = binary_cross_entropy_from_logit(x, y, 2.0).unwrap();
                assert!(v.is_finite() && v >= 0.0);
            }
        }
        assert!(binary_cross_entropy_from_logit(f64::INFINITY, true, 1.0).is_err());
    }

    #[test]
    fn mil_alignment_cases() {
        let text = emb(vec![1.0, 0.0]);
        let same = emb(vec![2.0, 0.0]);
        let orth = emb(vec![0.0, 1.0]);
        // T = 1 reduces to the matched cosine loss.
        let c = emb(vec![1.0, 1.0]);
        let want = cosine_alignment_loss(&c, &text, true).unwrap();
        assert!((mil_alignment_loss(&[c], &text, &[1.0], true).unwrap() - want).abs() < 1e-15);
        assert_eq!(
            mil_alignment_loss(&[orth.clone(), orth.clone()], &text, &[0.5, 0.5], false).unwrap(),
            0.0
        );
        let got = mil_alignment_loss(&[same, orth], &text, &[0.25, 0.75], true).unwrap();
        assert!((got - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mil_alignment_rejects_unnormalized_attention() {
        let text = emb(vec![1.0, 0.0]);
        let s = [emb(vec![1.0, 0.0]), emb(vec![0.0, 1.0])];
        assert!(mil_alignment_loss(&s, &text, &[0.5, 0.6], true).is_err());
        // Negatives ignore attention entirely.
        assert!(mil_alignment_loss(&s, &text, &[0.5, 0.6], false).is_ok());
    }

    #[test]
    fn uncertainty_total_cases() {
        let b = uncertainty_weighted_total(0.4, 0.6, 0.0, 0.0).unwrap();
        assert!((b.l_total - 0.5).abs() < 1e-15);
        assert_eq!(uncertainty_weighted_total(0.0, 0.0, 0.0, 0.0).unwrap().l_total, 0.0);
        let b = uncertainty_weighted_total(1.0, 1.0, 2f64.ln(), 0.0).unwrap();
        assert!((b.l_total - (0.75 + 2f64.ln())).abs() < 1e-12);
        assert!((b.l_total - 1.443_147).abs() < 1e-6);
        // Negative totals are legitimate.
        assert!(uncertainty_weighted_total(0.0, 0.0, -1.0, -1.0).unwrap().l_total < 0.0);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.0, 0.5, -0.25];
        let (_, g) = cosine_with_grad(&a, &b).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut p = a;
            let mut m = a;
            p[i] += h;
            m[i] -= h;
            let fd = (cosine(&p, &b).unwrap() - cosine(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
