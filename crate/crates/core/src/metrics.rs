//! Evaluation metrics over whitespace-tokenized text.
//!
//! ROUGE-N and ROUGE-L follow the usual clipped-count definitions without
//! stemming or stopword removal. Word Mover's Distance is the relaxed lower
//! bound (each word's mass travels to its nearest counterpart), and the
//! embedding F-score is the greedy cosine matching used by BERTScore, over
//! whatever embedding table is plugged in.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    pub fn zero() -> Self {
        Prf::default()
    }
}

/// Lowercased copies of the tokens; the metric-side normalization.
pub fn normalize<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-N with clipped n-gram counts.
///
/// A reference shorter than `n` has no n-grams; the result is all zeros and
/// a warning is logged.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Prf {
    if n == 0 || reference.len() < n {
        warn!("rouge_n: reference of {} tokens has no {n}-grams", reference.len());
        return Prf::zero();
    }
    if candidate.len() < n {
        return Prf::zero();
    }
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refs: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let cand_counts = ngram_counts(&cand, n);
    let ref_counts = ngram_counts(&refs, n);
    let overlap: usize = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total = cand.len() + 1 - n;
    let ref_total = refs.len() + 1 - n;
    Prf::new(overlap as f64 / cand_total as f64, overlap as f64 / ref_total as f64)
}

/// Length of the longest common subsequence, in O(|a|·|b|) time and
/// O(|b|) space.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() {
                diag + 1
            } else {
                up.max(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::zero();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    Prf::new(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    /// Out-of-vocabulary tokens are ignored.
    #[default]
    Skip,
    /// Out-of-vocabulary tokens get a deterministic pseudo-random vector
    /// derived from the token string.
    Hash,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    oov: OovPolicy,
}

impl EmbeddingTable {
    pub fn new(dim: usize, oov: OovPolicy) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            oov,
        }
    }

    /// An empty table that hashes every token; used when no embedding file
    /// is configured.
    pub fn hashed(dim: usize) -> Self {
        EmbeddingTable::new(dim, OovPolicy::Hash)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let token = token.into();
        if vector.len() != self.dim {
            return Err(Error::data(format!(
                "embedding for `{token}` has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token, vector);
        Ok(())
    }

    /// Reads `token v1 ... vd` lines. The dimension is fixed by the first line.
    pub fn parse(text: &str, oov: OovPolicy) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let vector = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::data(format!("embedding line {}: {e}", lineno + 1)))?;
            if vector.is_empty() {
                return Err(Error::data(format!("embedding line {}: no values", lineno + 1)));
            }
            let table = table.get_or_insert_with(|| EmbeddingTable::new(vector.len(), oov));
            table
                .insert(token, vector)
                .map_err(|e| Error::data(format!("embedding line {}: {e}", lineno + 1)))?;
        }
        table.ok_or_else(|| Error::data("embedding file is empty"))
    }

    pub fn load(path: &Path, oov: OovPolicy) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading embeddings {}", path.display()), e))?;
        Self::parse(&text, oov)
    }

    pub fn get(&self, token: &str) -> Option<Cow<'_, [f64]>> {
        match self.vectors.get(token) {
            Some(v) => Some(Cow::Borrowed(v)),
            None => match self.oov {
                OovPolicy::Skip => None,
                OovPolicy::Hash => Some(Cow::Owned(hashed_vector(token, self.dim))),
            },
        }
    }

    /// Identifies the table for report fingerprints.
    pub fn describe(&self) -> String {
        format!(
            "dim={} vocab={} oov={:?}",
            self.dim,
            self.vectors.len(),
            self.oov
        )
    }

    fn lookup_all<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<(String, Cow<'_, [f64]>)>> {
        let found: Vec<_> = tokens
            .iter()
            .filter_map(|t| self.get(t.as_ref()).map(|v| (t.as_ref().to_string(), v)))
            .collect();
        if found.is_empty() {
            let names: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
            return Err(Error::data(format!(
                "no in-vocabulary tokens among [{}]",
                names.join(", ")
            )));
        }
        Ok(found)
    }
}

fn hashed_vector(token: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Normalized bag of words over in-vocabulary tokens, in first-seen order.
pub fn nbow<'t, S: AsRef<str>>(tokens: &[S], emb: &'t EmbeddingTable) -> Result<Vec<(Cow<'t, [f64]>, f64)>> {
    let found = emb.lookup_all(tokens)?;
    let total = found.len() as f64;
    let mut order: Vec<String> = Vec::new();
    let mut bag: HashMap<String, (Cow<'t, [f64]>, f64)> = HashMap::new();
    for (token, vector) in found {
        match bag.get_mut(&token) {
            Some(entry) => entry.1 += 1.0 / total,
            None => {
                order.push(token.clone());
                bag.insert(token, (vector, 1.0 / total));
            }
        }
    }
    Ok(order.into_iter().map(|t| bag.remove(&t).expect("present")).collect())
}

/// Relaxed Word Mover's Distance: the larger of the two one-sided
/// nearest-neighbour transport costs, with Euclidean ground distance.
pub fn relaxed_wmd<S: AsRef<str>>(a: &[S], b: &[S], emb: &EmbeddingTable) -> Result<f64> {
    let bag_a = nbow(a, emb)?;
    let bag_b = nbow(b, emb)?;
    let one_side = |from: &[(Cow<[f64]>, f64)], to: &[(Cow<[f64]>, f64)]| -> f64 {
        from.iter()
            .map(|(x, mass)| {
                let nearest = to
                    .iter()
                    .map(|(y, _)| euclidean(x, y))
                    .fold(f64::INFINITY, f64::min);
                mass * nearest
            })
            .sum()
    };
    Ok(one_side(&bag_a, &bag_b).max(one_side(&bag_b, &bag_a)))
}

/// Greedy-matching F-score: recall averages, over reference tokens, the best
/// cosine to any candidate token; precision is the mirror image. Per-token
/// maxima are floored at zero so all three values stay in [0, 1].
pub fn greedy_match_fscore<S: AsRef<str>>(candidate: &[S], reference: &[S], emb: &EmbeddingTable) -> Result<Prf> {
    let cand = emb.lookup_all(candidate)?;
    let refs = emb.lookup_all(reference)?;
    let mean_best = |from: &[(String, Cow<[f64]>)], to: &[(String, Cow<[f64]>)]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|(_, x)| {
                to.iter()
                    .map(|(_, y)| cosine(x, y))
                    .fold(f64::NEG_INFINITY, f64::max)
                    .clamp(0.0, 1.0)
            })
            .sum();
        total / from.len() as f64
    };
    Ok(Prf::new(mean_best(&cand, &refs), mean_best(&refs, &cand)))
}

/// Options that affect metric values; they feed the report fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub lowercase: bool,
    /// Dimension of the hashed fallback table when no embedding file is given.
    pub hashed_dim: usize,
    pub oov: OovPolicy,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            lowercase: true,
            hashed_dim: 32,
            oov: OovPolicy::Hash,
        }
    }
}

impl MetricsConfig {
    pub fn fingerprint(&self, emb: &EmbeddingTable) -> String {
        format!(
            "rouge[n=1,2,L stem=no stopwords=kept lowercase={}] wmd[relaxed euclidean] embf[greedy cosine] emb[{}]",
            self.lowercase,
            emb.describe()
        )
    }

    pub fn prepare<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        if self.lowercase {
            normalize(tokens)
        } else {
            tokens.iter().map(|t| t.as_ref().to_string()).collect()
        }
    }
}

/// One system's scores, laid out like a results table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "RL")]
    pub rl: f64,
    #[serde(rename = "WMD")]
    pub wmd: f64,
    #[serde(rename = "EmbF")]
    pub emb_f: f64,
    pub chapters: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics_fingerprint: String,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn row(&self, system: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    /// Markdown table; ROUGE in points (×100), WMD and EmbF as raw values.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.system.len())
            .max()
            .unwrap_or(0)
            .max("Model".len());
        let _ = writeln!(out, "| {:<width$} | R1    | R2    | RL    | WMD   | EmbF  |", "Model");
        let _ = writeln!(out, "|{}|-------|-------|-------|-------|-------|", "-".repeat(width + 2));
        for row in &self.rows {
            let _ = writeln!(
                out,
                "| {:<width$} | {:>5.2} | {:>5.2} | {:>5.2} | {:.3} | {:.3} |",
                row.system,
                row.r1 * 100.0,
                row.r2 * 100.0,
                row.rl * 100.0,
                row.wmd,
                row.emb_f
            );
        }
        let _ = writeln!(out, "\nmetrics: {}", self.metrics_fingerprint);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    const CAND: &str = "the cat sat on the mat";
    const REF: &str = "the cat was on the mat";

    #[test]
    fn rouge_fixture_values() {
        let r1 = rouge_n(&toks(CAND), &toks(REF), 1);
        assert!((r1.precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((r1.recall - 5.0 / 6.0).abs() < 1e-12);
        assert!((r1.f1 - 5.0 / 6.0).abs() < 1e-12);
        let r2 = rouge_n(&toks(CAND), &toks(REF), 2);
        assert!((r2.f1 - 3.0 / 5.0).abs() < 1e-12);
        let rl = rouge_l(&toks(CAND), &toks(REF));
        assert_eq!(lcs_len(&toks(CAND), &toks(REF)), 5);
        assert!((rl.precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((rl.recall - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_disjoint() {
        let a = toks("tess went down the hill");
        for n in 1..=3 {
            assert_eq!(rouge_n(&a, &a, n), Prf::new(1.0, 1.0));
        }
        assert_eq!(rouge_l(&a, &a), Prf::new(1.0, 1.0));
        let b = toks("completely other words here");
        assert_eq!(rouge_n(&a, &b, 1), Prf::zero());
        assert_eq!(rouge_l(&a, &b), Prf::zero());
    }

    #[test]
    fn short_reference_gives_zeros() {
        assert_eq!(rouge_n(&toks("a b c"), &toks("a"), 2), Prf::zero());
        assert_eq!(rouge_n(&toks(""), &toks("a b"), 1), Prf::zero());
    }

    #[test]
    fn reversed_distinct_tokens_have_lcs_one() {
        assert_eq!(lcs_len(&toks("a b c"), &toks("c b a")), 1);
    }

    #[test]
    fn f1_rule() {
        assert_eq!(Prf::new(0.0, 0.0).f1, 0.0);
        let p = Prf::new(0.5, 0.25);
        assert!((p.f1 - 2.0 * 0.5 * 0.25 / 0.75).abs() < 1e-12);
    }

    fn toy_table() -> EmbeddingTable {
        let mut emb = EmbeddingTable::new(2, OovPolicy::Skip);
        emb.insert("king", vec![1.0, 2.0]).unwrap();
        emb.insert("queen", vec![4.0, 6.0]).unwrap();
        emb.insert("x", vec![1.0, 0.0]).unwrap();
        emb.insert("y", vec![0.0, 1.0]).unwrap();
        emb
    }

    #[test]
    fn wmd_single_tokens_is_euclidean() {
        let emb = toy_table();
        assert!((relaxed_wmd(&["king"], &["queen"], &emb).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(relaxed_wmd(&["king", "queen"], &["queen", "king"], &emb).unwrap(), 0.0);
    }

    #[test]
    fn all_oov_is_an_error_naming_tokens() {
        let emb = toy_table();
        let err = relaxed_wmd(&["zzz", "qqq"], &["king"], &emb).unwrap_err();
        assert!(err.to_string().contains("zzz"));
        assert!(greedy_match_fscore(&["king"], &["qqq"], &emb).is_err());
    }

    #[test]
    fn greedy_match_cases() {
        let emb = toy_table();
        assert_eq!(greedy_match_fscore(&["x", "y"], &["x", "y"], &emb).unwrap(), Prf::new(1.0, 1.0));
        assert_eq!(greedy_match_fscore(&["x"], &["y"], &emb).unwrap(), Prf::zero());
        // Candidate {x, king}, reference {y, queen}: enumerate all four cosines.
        let cos = |a: [f64; 2], b: [f64; 2]| {
            (a[0] * b[0] + a[1] * b[1]) / ((a[0].hypot(a[1])) * (b[0].hypot(b[1])))
        };
        let (x, king, y, queen) = ([1.0, 0.0], [1.0, 2.0], [0.0, 1.0], [4.0, 6.0]);
        let precision = (cos(x, y).max(cos(x, queen)) + cos(king, y).max(cos(king, queen))) / 2.0;
        let recall = (cos(y, x).max(cos(y, king)) + cos(queen, x).max(cos(queen, king))) / 2.0;
        let got = greedy_match_fscore(&["x", "king"], &["y", "queen"], &emb).unwrap();
        assert!((got.precision - precision).abs() < 1e-12);
        assert!((got.recall - recall).abs() < 1e-12);
    }

    #[test]
    fn hashed_vectors_are_stable() {
        let emb = EmbeddingTable::hashed(8);
        assert_eq!(emb.get("tess").unwrap(), emb.get("tess").unwrap());
        assert_ne!(emb.get("tess").unwrap(), emb.get("hill").unwrap());
    }

    #[test]
    fn embedding_file_parsing() {
        let emb = EmbeddingTable::parse("a 1 0\nb 0 1\n\n", OovPolicy::Skip).unwrap();
        assert_eq!(emb.dim(), 2);
        assert_eq!(emb.len(), 2);
        assert!(EmbeddingTable::parse("a 1 0\nb 0\n", OovPolicy::Skip).is_err());
        assert!(EmbeddingTable::parse("a 1 x\n", OovPolicy::Skip).is_err());
        assert!(EmbeddingTable::parse("", OovPolicy::Skip).is_err());
    }

    #[test]
    fn report_renders_rows() {
        let report = MetricReport {
            metrics_fingerprint: "fp".into(),
            rows: vec![ReportRow {
                system: "Oracle Ext".into(),
                r1: 0.4675,
                r2: 0.1427,
                rl: 0.4564,
                wmd: 0.633,
                emb_f: 0.823,
                chapters: 1,
                skipped: 0,
            }],
        };
        let text = report.render();
        assert!(text.contains("| Oracle Ext | 46.75 | 14.27 | 45.64 | 0.633 | 0.823 |"), "{text}");
        let json = serde_json::to_string(&report.rows[0]).unwrap();
        assert!(json.contains("\"R1\"") && json.contains("\"EmbF\""));
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..12)
    }

    proptest! {
        #[test]
        fn precision_recall_swap(a in words(), b in words(), n in 1usize..4) {
            let ab = rouge_n(&a, &b, n);
            let ba = rouge_n(&b, &a, n);
            if a.len() >= n && b.len() >= n {
                prop_assert!((ab.precision - ba.recall).abs() < 1e-12);
                prop_assert!((ab.recall - ba.precision).abs() < 1e-12);
            }
            for s in [ab.precision, ab.recall, ab.f1] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn wmd_is_nonnegative_and_zero_on_self(a in prop::collection::vec(prop::sample::select(vec!["king", "queen", "x", "y"]), 1..6),
                                               b in prop::collection::vec(prop::sample::select(vec!["king", "queen", "x", "y"]), 1..6)) {
            let emb = toy_table();
            prop_assert!(relaxed_wmd(&a, &b, &emb).unwrap() >= 0.0);
            prop_assert_eq!(relaxed_wmd(&a, &a, &emb).unwrap(), 0.0);
        }
    }
}
