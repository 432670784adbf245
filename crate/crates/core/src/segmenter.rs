//! Sub-sentential units: clause-level constituents carrying per-token spines.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::treebank::{base_label, derive_spines, HeadTable, ParseNode, Span, Spine};

pub const DEFAULT_TOKEN_LIMIT: usize = 30_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub clause_labels: Vec<String>,
    pub min_tokens: usize,
    /// Chapter truncation limit in tokens.
    pub max_chapter_tokens: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            clause_labels: ["S", "SBAR", "SINV", "SQ", "SBARQ"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            min_tokens: 5,
            max_chapter_tokens: DEFAULT_TOKEN_LIMIT,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 {
            return Err(Error::config("segment.min_tokens", "must be at least 1"));
        }
        if self.max_chapter_tokens == 0 {
            return Err(Error::config("segment.max_chapter_tokens", "must be at least 1"));
        }
        Ok(())
    }

    fn is_clause(&self, label: &str) -> bool {
        let label = base_label(label);
        self.clause_labels.iter().any(|c| c == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub unit_id: usize,
    pub sentence_id: usize,
    /// Interval into the chapter token stream.
    pub token_span: Span,
    pub tokens: Vec<String>,
    /// One spine per token; `token_index` is relative to the sentence.
    pub spines: Vec<Spine>,
}

impl Unit {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chapter {
    pub chapter_id: String,
    #[serde(default)]
    pub split: Split,
    pub units: Vec<Unit>,
    pub reference_summary: Vec<String>,
}

impl Chapter {
    pub fn token_count(&self) -> usize {
        self.units.iter().map(Unit::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.units.iter().flat_map(|u| u.tokens.iter().map(String::as_str))
    }

    /// Unit ids are `0..n`, spans are contiguous and every token has a spine.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = self.units.first().map_or(0, |u| u.token_span.start);
        for (i, unit) in self.units.iter().enumerate() {
            if unit.unit_id != i {
                return Err(Error::Invariant(format!(
                    "chapter {}: unit at position {i} has id {}",
                    self.chapter_id, unit.unit_id
                )));
            }
            if unit.tokens.is_empty()
                || unit.tokens.len() != unit.spines.len()
                || unit.token_span.len() != unit.tokens.len()
                || unit.token_span.start != cursor
            {
                return Err(Error::Invariant(format!(
                    "chapter {}: unit {i} has inconsistent tokens, spines or span",
                    self.chapter_id
                )));
            }
            cursor = unit.token_span.end;
        }
        Ok(())
    }
}

/// Splits one parsed sentence into units.
///
/// Units are the outermost clause-labelled proper descendants with at least
/// `min_tokens` tokens. Tokens not covered by any of them join the preceding
/// unit, or the following one at the start of the sentence. Without any
/// qualifying clause the whole sentence is a single unit. Returned units have
/// sentence-local spans, `unit_id` numbered from 0 and `sentence_id` 0.
pub fn segment_sentence(tree: &ParseNode, table: &HeadTable, config: &SegmentConfig) -> Result<Vec<Unit>> {
    if tree.span.is_empty() {
        return Err(Error::data("cannot segment an empty tree"));
    }
    let min_tokens = config.min_tokens.max(1);
    let mut clauses = Vec::new();
    collect_clauses(tree, config, min_tokens, &mut clauses);

    let sentence = tree.span;
    let starts: Vec<usize> = if clauses.is_empty() {
        vec![sentence.start]
    } else {
        let mut starts: Vec<usize> = clauses.iter().map(|s| s.start).collect();
        starts[0] = sentence.start;
        starts
    };

    let tokens = tree.tokens();
    let spines = derive_spines(tree, table);
    let units = starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let end = starts.get(i + 1).copied().unwrap_or(sentence.end);
            let (lo, hi) = (start - sentence.start, end - sentence.start);
            Unit {
                unit_id: i,
                sentence_id: 0,
                token_span: Span::new(lo, hi),
                tokens: tokens[lo..hi].iter().map(|t| t.to_string()).collect(),
                spines: spines[lo..hi].to_vec(),
            }
        })
        .collect();
    Ok(units)
}

fn collect_clauses(node: &ParseNode, config: &SegmentConfig, min_tokens: usize, out: &mut Vec<Span>) {
    for child in &node.children {
        if !child.is_leaf() && config.is_clause(&child.label) && child.span.len() >= min_tokens {
            out.push(child.span);
        } else {
            collect_clauses(child, config, min_tokens, out);
        }
    }
}

/// Segments every sentence of a chapter and numbers units in reading order.
pub fn build_chapter(
    chapter_id: impl Into<String>,
    split: Split,
    sentences: &[ParseNode],
    reference_summary: Vec<String>,
    table: &HeadTable,
    config: &SegmentConfig,
) -> Result<Chapter> {
    let mut units = Vec::new();
    let mut offset = 0;
    for (sentence_id, tree) in sentences.iter().enumerate() {
        for mut unit in segment_sentence(tree, table, config)? {
            unit.unit_id = units.len();
            unit.sentence_id = sentence_id;
            unit.token_span = Span::new(offset + unit.token_span.start, offset + unit.token_span.end);
            units.push(unit);
        }
        offset += tree.span.len();
    }
    Ok(Chapter {
        chapter_id: chapter_id.into(),
        split,
        units,
        reference_summary,
    })
}

/// Drops whole trailing units until the chapter has at most `limit` tokens.
pub fn truncate_chapter(chapter: &Chapter, limit: usize) -> Result<Chapter> {
    if limit == 0 {
        return Err(Error::config("segment.max_chapter_tokens", "must be at least 1"));
    }
    let mut total = 0;
    let mut keep = 0;
    for unit in &chapter.units {
        if total + unit.len() > limit {
            break;
        }
        total += unit.len();
        keep += 1;
    }
    if keep == 0 && !chapter.units.is_empty() {
        return Err(Error::data(format!(
            "chapter {}: first unit has {} tokens, over the {limit}-token limit",
            chapter.chapter_id,
            chapter.units[0].len()
        )));
    }
    Ok(Chapter {
        units: chapter.units[..keep].to_vec(),
        ..chapter.clone()
    })
}

/// Corpus-level counts echoed by the segmentation stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub units: usize,
    pub tokens: usize,
    pub truncated: usize,
}

impl DatasetStats {
    pub fn chapters(&self) -> usize {
        self.train + self.dev + self.test
    }

    pub fn mean_chapter_tokens(&self) -> f64 {
        if self.chapters() == 0 {
            0.0
        } else {
            self.tokens as f64 / self.chapters() as f64
        }
    }

    pub fn add(&mut self, chapter: &Chapter) {
        match chapter.split {
            Split::Train => self.train += 1,
            Split::Dev => self.dev += 1,
            Split::Test => self.test += 1,
        }
        self.units += chapter.units.len();
        self.tokens += chapter.token_count();
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "chapters {} (train/dev/test = {}/{}/{}), units {}, tokens {}, mean chapter length {:.1} tokens, truncated {}",
            self.chapters(),
            self.train,
            self.dev,
            self.test,
            self.units,
            self.tokens,
            self.mean_chapter_tokens(),
            self.truncated
        )
    }
}
