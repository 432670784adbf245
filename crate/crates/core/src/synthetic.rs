//! Generated corpora with a known decision rule, for training checks and
//! demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::OracleLabels;
use crate::segmenter::{Chapter, Split, Unit};
use crate::treebank::{Span, Spine};

/// Token that every positive unit contains.
pub const MARKER: &str = "lantern";

const SPINES: &[&[&str]] = &[
    &["NN", "NP"],
    &["NNS", "NP"],
    &["DT"],
    &["JJ"],
    &["VBD", "VP", "S"],
    &["VBZ", "VP", "S"],
    &["IN", "PP"],
    &["RB", "ADVP"],
    &["PRP", "NP"],
    &["CC"],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerCorpusConfig {
    pub chapters: usize,
    pub dev_chapters: usize,
    pub units_per_chapter: usize,
    pub positives_per_chapter: usize,
    pub min_unit_tokens: usize,
    pub max_unit_tokens: usize,
    pub vocabulary: usize,
    pub seed: u64,
}

impl Default for MarkerCorpusConfig {
    /// 200 chapters at one positive per 50 negatives.
    fn default() -> Self {
        MarkerCorpusConfig {
            chapters: 200,
            dev_chapters: 40,
            units_per_chapter: 51,
            positives_per_chapter: 1,
            min_unit_tokens: 3,
            max_unit_tokens: 7,
            vocabulary: 60,
            seed: 2024,
        }
    }
}

fn unit(rng: &mut impl Rng, cfg: &MarkerCorpusConfig, id: usize, start: usize, positive: bool) -> Unit {
    let len = rng.random_range(cfg.min_unit_tokens..=cfg.max_unit_tokens);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| format!("w{}", rng.random_range(0..cfg.vocabulary)))
        .collect();
    if positive {
        let at = rng.random_range(0..len);
        tokens[at] = MARKER.to_string();
    }
    let spines = (0..len)
        .map(|i| {
            let labels = SPINES.choose(rng).expect("nonempty");
            Spine {
                token_index: i,
                labels: labels.iter().map(|s| s.to_string()).collect(),
            }
        })
        .collect();
    Unit {
        unit_id: id,
        sentence_id: id,
        token_span: Span::new(start, start + len),
        tokens,
        spines,
    }
}

/// Chapters whose positive units carry [`MARKER`]; labels mark exactly
/// those units. The first `dev_chapters` chapters are the dev split.
pub fn marker_corpus(cfg: &MarkerCorpusConfig) -> Vec<(Chapter, OracleLabels)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.chapters)
        .map(|c| {
            let n = cfg.units_per_chapter;
            let positives = rand::seq::index::sample(&mut rng, n, cfg.positives_per_chapter.min(n)).into_vec();
            let mut labels = vec![false; n];
            for p in positives {
                labels[p] = true;
            }
            let mut units = Vec::with_capacity(n);
            let mut cursor = 0;
            for (i, &positive) in labels.iter().enumerate() {
                let u = unit(&mut rng, cfg, i, cursor, positive);
                cursor = u.token_span.end;
                units.push(u);
            }
            let reference_summary = labels
                .iter()
                .zip(&units)
                .filter(|(&l, _)| l)
                .flat_map(|(_, u)| u.tokens.clone())
                .collect();
            let chapter = Chapter {
                chapter_id: format!("synthetic-{c:03}"),
                split: if c < cfg.dev_chapters { Split::Dev } else { Split::Train },
                units,
                reference_summary,
            };
            let oracle = OracleLabels {
                chapter_id: chapter.chapter_id.clone(),
                labels,
                oracle_score: 1.0,
                round_scores: vec![1.0],
            };
            (chapter, oracle)
        })
        .collect()
}

/// One long chapter of `units` units of `unit_tokens` tokens each.
pub fn long_chapter(units: usize, unit_tokens: usize, seed: u64) -> Chapter {
    let cfg = MarkerCorpusConfig {
        min_unit_tokens: unit_tokens,
        max_unit_tokens: unit_tokens,
        seed,
        ..MarkerCorpusConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units: Vec<Unit> = (0..units)
        .map(|i| unit(&mut rng, &cfg, i, i * unit_tokens, false))
        .collect();
    Chapter {
        chapter_id: format!("long-{}", units.len() * unit_tokens),
        split: Split::Test,
        units,
        reference_summary: vec!["w1".into(), "w2".into()],
    }
}

/// A training-split chapter from whitespace-tokenized unit texts, one unit
/// per sentence, with placeholder `NN` spines.
pub fn text_chapter(id: &str, units: &[&str], reference: &str) -> Chapter {
    let mut start = 0;
    let units = units
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
            let n = tokens.len();
            let unit = Unit {
                unit_id: i,
                sentence_id: i,
                token_span: Span::new(start, start + n),
                spines: (0..n)
                    .map(|t| Spine {
                        token_index: t,
                        labels: vec!["NN".into()],
                    })
                    .collect(),
                tokens,
            };
            start += n;
            unit
        })
        .collect();
    Chapter {
        chapter_id: id.to_string(),
        split: Split::Train,
        units,
        reference_summary: reference.split_whitespace().map(String::from).collect(),
    }
}
