//! Oracle labels: greedy selection of units that maximizes weighted ROUGE
//! F-measure against the reference summary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{normalize, rouge_l, rouge_n};
use crate::segmenter::Chapter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeWeights {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl Default for RougeWeights {
    fn default() -> Self {
        RougeWeights {
            rouge1: 1.0 / 3.0,
            rouge2: 1.0 / 3.0,
            rouge_l: 1.0 / 3.0,
        }
    }
}

impl RougeWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rouge1, self.rouge2, self.rouge_l];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("alignment.weights", "weights must be nonnegative"));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("alignment.weights", "weights must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub weights: RougeWeights,
    pub max_units: Option<usize>,
    pub min_gain: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            weights: RougeWeights::default(),
            max_units: None,
            min_gain: 1e-6,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.max_units == Some(0) {
            return Err(Error::config("alignment.max_units", "must be at least 1 when set"));
        }
        if !(self.min_gain > 0.0) {
            return Err(Error::config("alignment.min_gain", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub chapter_id: String,
    pub labels: Vec<bool>,
    pub oracle_score: f64,
    /// Selection score after each greedy round.
    #[serde(default)]
    pub round_scores: Vec<f64>,
}

impl OracleLabels {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i)
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// `w1·R1_F + w2·R2_F + wL·RL_F`.
pub fn weighted_rouge<S: AsRef<str>>(candidate: &[S], reference: &[S], weights: &RougeWeights) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::data("weighted ROUGE needs a nonempty reference"));
    }
    let mut score = 0.0;
    if weights.rouge1 > 0.0 {
        score += weights.rouge1 * rouge_n(candidate, reference, 1).f1;
    }
    if weights.rouge2 > 0.0 {
        score += weights.rouge2 * rouge_n(candidate, reference, 2).f1;
    }
    if weights.rouge_l > 0.0 {
        score += weights.rouge_l * rouge_l(candidate, reference).f1;
    }
    Ok(score)
}

/// Tokens of the selected units concatenated in positional order, lowercased.
pub fn selection_tokens(chapter: &Chapter, selected: &[usize]) -> Vec<String> {
    let mut ids = selected.to_vec();
    ids.sort_unstable();
    let tokens: Vec<&str> = ids
        .iter()
        .flat_map(|&i| chapter.units[i].tokens.iter().map(String::as_str))
        .collect();
    normalize(&tokens)
}

/// Greedy oracle selection.
///
/// Each round adds the unit whose inclusion yields the highest weighted
/// ROUGE of the positionally ordered selection; ties go to the lowest unit
/// id. Stops when the best gain falls below `min_gain` or `max_units` is hit.
pub fn greedy_align(chapter: &Chapter, config: &AlignmentConfig) -> Result<OracleLabels> {
    if chapter.reference_summary.is_empty() {
        return Err(Error::data(format!(
            "chapter {}: missing reference summary",
            chapter.chapter_id
        )));
    }
    if chapter.units.is_empty() {
        return Err(Error::data(format!("chapter {}: no units", chapter.chapter_id)));
    }
    let reference = normalize(&chapter.reference_summary);
    let n = chapter.units.len();
    let cap = config.max_units.unwrap_or(n).min(n);

    let mut selected: Vec<usize> = Vec::new();
    let mut labels = vec![false; n];
    let mut current = 0.0;
    let mut round_scores = Vec::new();

    while selected.len() < cap {
        let candidates: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .filter(|&i| !labels[i])
            .map(|i| {
                let mut trial = selected.clone();
                trial.push(i);
                let tokens = selection_tokens(chapter, &trial);
                let score = weighted_rouge(&tokens, &reference, &config.weights).expect("nonempty reference");
                (i, score)
            })
            .collect();
        let best = candidates
            .into_iter()
            .fold(None::<(usize, f64)>, |best, (i, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((i, s)),
            });
        let Some((unit, score)) = best else { break };
        if score - current < config.min_gain {
            break;
        }
        if score < current {
            return Err(Error::Invariant(format!(
                "chapter {}: greedy score decreased from {current} to {score}",
                chapter.chapter_id
            )));
        }
        selected.push(unit);
        labels[unit] = true;
        current = score;
        round_scores.push(score);
    }

    Ok(OracleLabels {
        chapter_id: chapter.chapter_id.clone(),
        labels,
        oracle_score: current,
        round_scores,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synthetic::text_chapter;

    pub(crate) fn toy_chapter(units: &[&str], reference: &str) -> Chapter {
        text_chapter("toy", units, reference)
    }

    #[test]
    fn weighted_rouge_fixtures() {
        let w = RougeWeights {
            rouge1: 1.0,
            rouge2: 0.0,
            rouge_l: 0.0,
        };
        let cand: Vec<&str> = "the cat sat on the mat".split(' ').collect();
        let refr: Vec<&str> = "the cat was on the mat".split(' ').collect();
        assert!((weighted_rouge(&cand, &refr, &w).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let eq = RougeWeights::default();
        assert!((weighted_rouge(&refr, &refr, &eq).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(weighted_rouge(&[] as &[&str], &refr, &eq).unwrap(), 0.0);
        assert!(weighted_rouge(&refr, &[] as &[&str], &eq).is_err());
    }

    #[test]
    fn single_unit_equal_to_reference() {
        let chapter = toy_chapter(&["tess went home"], "tess went home");
        let labels = greedy_align(&chapter, &AlignmentConfig::default()).unwrap();
        assert_eq!(labels.labels, vec![true]);
        assert!((labels.oracle_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_covering_units_are_selected() {
        let chapter = toy_chapter(
            &["tess went down the hill", "the weather was cold that day", "she waited for the van"],
            "tess went down the hill she waited for the van",
        );
        let labels = greedy_align(&chapter, &AlignmentConfig::default()).unwrap();
        assert_eq!(labels.labels, vec![true, false, true]);
        assert!((labels.oracle_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_self_consistent_and_monotone() {
        let chapter = toy_chapter(
            &["a b c", "c d e", "x y", "a b", "e f g h"],
            "a b c d e f",
        );
        let cfg = AlignmentConfig::default();
        let labels = greedy_align(&chapter, &cfg).unwrap();
        let picked: Vec<usize> = labels.positives().collect();
        let tokens = selection_tokens(&chapter, &picked);
        let recomputed = weighted_rouge(&tokens, &normalize(&chapter.reference_summary), &cfg.weights).unwrap();
        assert_eq!(recomputed, labels.oracle_score);
        assert!(labels.round_scores.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(labels.round_scores.len(), picked.len());
    }

    #[test]
    fn max_units_caps_selection() {
        let chapter = toy_chapter(&["a", "b", "c"], "a b c");
        let cfg = AlignmentConfig {
            max_units: Some(1),
            ..AlignmentConfig::default()
        };
        assert_eq!(greedy_align(&chapter, &cfg).unwrap().positive_count(), 1);
    }

    #[test]
    fn ties_resolve_to_lowest_unit() {
        let chapter = toy_chapter(&["q", "a", "a"], "a");
        let labels = greedy_align(&chapter, &AlignmentConfig::default()).unwrap();
        assert_eq!(labels.labels, vec![false, true, false]);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let chapter = toy_chapter(&["a"], "");
        assert!(greedy_align(&chapter, &AlignmentConfig::default()).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let cfg = AlignmentConfig {
            weights: RougeWeights {
                rouge1: 0.5,
                rouge2: 0.5,
                rouge_l: 0.5,
            },
            ..AlignmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AlignmentConfig::default().validate().is_ok());
    }
}
