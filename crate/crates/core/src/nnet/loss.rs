//! Binary cross-entropy and margin-ranking losses with exact gradients.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::sigmoid;
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossOutput {
    pub value: f64,
    /// d(value)/d(input), one entry per input score.
    pub grad: Vec<f64>,
    /// Inputs clamped away from 0 or 1.
    pub clamped: usize,
    /// Number of (positive, negative) pairs used; 0 for pointwise losses.
    pub pairs: usize,
}

/// Mean binary cross-entropy over probabilities.
pub fn bce_loss(scores: &[f64], labels: &[bool]) -> Result<LossOutput> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "bce_loss: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len().max(1) as f64;
    let mut out = LossOutput {
        grad: Vec::with_capacity(scores.len()),
        ..LossOutput::default()
    };
    for (&s, &y) in scores.iter().zip(labels) {
        let p = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if p != s {
            out.clamped += 1;
        }
        if y {
            out.value -= p.ln() / n;
            out.grad.push(-1.0 / (p * n));
        } else {
            out.value -= (1.0 - p).ln() / n;
            out.grad.push(1.0 / ((1.0 - p) * n));
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy on logits; the gradient is w.r.t. the logits.
pub fn bce_with_logits(logits: &[f64], labels: &[bool]) -> Result<LossOutput> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "bce_with_logits: {} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len().max(1) as f64;
    let mut out = LossOutput {
        grad: Vec::with_capacity(logits.len()),
        ..LossOutput::default()
    };
    for (&z, &y) in logits.iter().zip(labels) {
        // log(1 + e^z) - y·z, computed without overflow.
        let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
        out.value += (softplus - if y { z } else { 0.0 }) / n;
        out.grad.push((sigmoid(z) - if y { 1.0 } else { 0.0 }) / n);
    }
    Ok(out)
}

/// Margin-ranking loss over explicit score lists: mean over all
/// (pos, neg) pairs of `max(0, margin - (s_pos - s_neg))`.
///
/// Returns the loss with gradients for the positive scores followed by the
/// negative scores. With an empty side the loss is 0 with no pairs.
pub fn margin_ranking_loss(pos_scores: &[f64], neg_scores: &[f64], margin: f64) -> LossOutput {
    let scores: Vec<f64> = pos_scores.iter().chain(neg_scores).copied().collect();
    let pairs: Vec<(usize, usize)> = (0..pos_scores.len())
        .flat_map(|p| (0..neg_scores.len()).map(move |n| (p, pos_scores.len() + n)))
        .collect();
    pairwise_margin_loss(&scores, &pairs, margin)
}

/// Hinge over index pairs `(pos, neg)` into `scores`. The subgradient at
/// the hinge point is 0.
pub fn pairwise_margin_loss(scores: &[f64], pairs: &[(usize, usize)], margin: f64) -> LossOutput {
    let mut out = LossOutput {
        grad: vec![0.0; scores.len()],
        pairs: pairs.len(),
        ..LossOutput::default()
    };
    if pairs.is_empty() {
        return out;
    }
    let n = pairs.len() as f64;
    for &(p, q) in pairs {
        let slack = margin - (scores[p] - scores[q]);
        if slack > 0.0 {
            out.value += slack / n;
            out.grad[p] -= 1.0 / n;
            out.grad[q] += 1.0 / n;
        }
    }
    out
}

/// All positive×negative index pairs when there are at most `cap`, else a
/// uniform sample of `cap` distinct pairs.
pub fn sample_pairs(labels: &[bool], cap: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let total = pos.len() * neg.len();
    if total <= cap {
        return pos
            .iter()
            .flat_map(|&p| neg.iter().map(move |&q| (p, q)))
            .collect();
    }
    let mut picks = sample(rng, total, cap).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|k| (pos[k / neg.len()], neg[k % neg.len()]))
        .collect()
}

/// Whether the ranking margin applies to logits or to sigmoid probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarginSpace {
    #[default]
    Logit,
    Probability,
}

/// Margin-ranking loss on logits, with the margin applied in `space`. The
/// returned gradient is always w.r.t. the logits.
pub fn margin_loss_on_logits(logits: &[f64], pairs: &[(usize, usize)], margin: f64, space: MarginSpace) -> LossOutput {
    match space {
        MarginSpace::Logit => pairwise_margin_loss(logits, pairs, margin),
        MarginSpace::Probability => {
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let mut out = pairwise_margin_loss(&probs, pairs, margin);
            for (g, p) in out.grad.iter_mut().zip(&probs) {
                *g *= p * (1.0 - p);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn bce_analytic_values() {
        let eps = 1e-9;
        let perfect = bce_loss(&[eps, 1.0 - eps], &[false, true]).unwrap();
        assert!(perfect.value < 1e-8);
        let half = bce_loss(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert!((half.value - std::f64::consts::LN_2).abs() < 1e-15);
        let clamped = bce_loss(&[0.0, 1.0], &[false, true]).unwrap();
        assert_eq!(clamped.clamped, 2);
        assert!(clamped.value.is_finite());
        assert!(bce_loss(&[0.5], &[true, false]).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let scores = [0.13, 0.71, 0.42, 0.96, 0.05];
        let labels = [true, false, true, true, false];
        let out = bce_loss(&scores, &labels).unwrap();
        let numeric = central_diff(&|s| bce_loss(s, &labels).unwrap().value, &scores);
        for (a, n) in out.grad.iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(n.abs()) <= 1e-6, "{a} vs {n}");
        }
        let logits = [-2.0, 0.3, 1.7, -0.4, 5.0];
        let out = bce_with_logits(&logits, &labels).unwrap();
        let numeric = central_diff(&|z| bce_with_logits(z, &labels).unwrap().value, &logits);
        for (a, n) in out.grad.iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(n.abs()) <= 1e-6, "{a} vs {n}");
        }
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let via_probs = bce_loss(&probs, &labels).unwrap().value;
        assert!((via_probs - bce_with_logits(&logits, &labels).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn hinge_values() {
        assert_eq!(margin_ranking_loss(&[0.9], &[0.2], 0.3).value, 0.0);
        let active = margin_ranking_loss(&[0.4], &[0.3], 0.3);
        assert!((active.value - 0.2).abs() < 1e-12);
        assert_eq!(active.grad, vec![-1.0, 1.0]);
        // Swapped scores: margin - (0.2 - 0.9) = 0.3 + 0.7.
        let swapped = margin_ranking_loss(&[0.2], &[0.9], 0.3);
        assert!((swapped.value - 1.0).abs() < 1e-12);
        // At the hinge point the subgradient is zero.
        let edge = margin_ranking_loss(&[1.0], &[0.5], 0.5);
        assert_eq!(edge.grad, vec![0.0, 0.0]);
        let empty = margin_ranking_loss(&[], &[0.1, 0.2], 1.0);
        assert_eq!((empty.value, empty.pairs), (0.0, 0));
    }

    #[test]
    fn margin_gradient_matches_finite_differences_off_the_hinge() {
        let logits = [0.3, -0.2, 1.4, 0.1, -1.0];
        let pairs = [(0, 1), (0, 3), (2, 1), (2, 4), (0, 4)];
        for space in [MarginSpace::Logit, MarginSpace::Probability] {
            let margin = 0.77;
            let out = margin_loss_on_logits(&logits, &pairs, margin, space);
            let numeric = central_diff(&|z| margin_loss_on_logits(z, &pairs, margin, space).value, &logits);
            for (a, n) in out.grad.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-8, "{space:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn pair_sampling_caps_and_covers() {
        let labels: Vec<bool> = (0..30).map(|i| i % 10 == 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = sample_pairs(&labels, 10_000, &mut rng);
        assert_eq!(all.len(), 3 * 27);
        let capped = sample_pairs(&labels, 20, &mut rng);
        assert_eq!(capped.len(), 20);
        assert!(capped.iter().all(|&(p, n)| labels[p] && !labels[n]));
        let mut dedup = capped.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 20);
        assert!(sample_pairs(&[false, false], 10, &mut rng).is_empty());
    }
}
