//! Oracles and generators shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;

use spinalsum::aligner::{selection_tokens, weighted_rouge, AlignmentConfig};
use spinalsum::metrics::normalize;
use spinalsum::pipeline::ExperimentConfig;
use spinalsum::segmenter::Chapter;
use spinalsum::treebank::{find_head, HeadTable, ParseNode};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// The bundled mini-corpus config, writing to `out_dir`.
pub fn mini_config(out_dir: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&data_dir().join("mini/config.toml")).expect("mini config");
    cfg.paths.out_dir = out_dir;
    cfg
}

/// One fixture block: the parse and the expected `token spine` pairs.
pub struct SpineFixture {
    pub parse: String,
    pub expected: Vec<(String, String)>,
}

pub fn spine_fixtures() -> Vec<SpineFixture> {
    let text = std::fs::read_to_string(data_dir().join("spine_fixtures.txt")).expect("fixture file");
    let mut out: Vec<SpineFixture> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('(') {
            out.push(SpineFixture {
                parse: line.to_string(),
                expected: Vec::new(),
            });
        } else {
            let (token, spine) = line.split_once(' ').expect("`token spine` line");
            out.last_mut()
                .expect("parse before spines")
                .expected
                .push((token.to_string(), spine.to_string()));
        }
    }
    out
}

const PHRASES: &[&str] = &["S", "NP", "VP", "PP", "SBAR", "ADJP", "ADVP", "WHNP", "SINV", "QP", "FRAG", "NX"];
const TAGS: &[&str] = &["NN", "NNS", "NNP", "VBD", "VB", "IN", "TO", "DT", "JJ", "CC", "RB", "PRP", ",", "POS", "CD"];

/// Bracketed random tree with `w0 w1 ..` leaves.
pub fn random_tree(rng: &mut impl Rng, depth: usize) -> String {
    let mut next = 0;
    random_node(rng, depth, &mut next)
}

fn random_node(rng: &mut impl Rng, depth: usize, next: &mut usize) -> String {
    if depth == 0 || rng.random_bool(0.3) {
        let tag = TAGS[rng.random_range(0..TAGS.len())];
        *next += 1;
        return format!("({tag} w{})", *next - 1);
    }
    let label = PHRASES[rng.random_range(0..PHRASES.len())];
    let kids: Vec<String> = (0..rng.random_range(1..=3))
        .map(|_| random_node(rng, depth - 1, next))
        .collect();
    format!("({label} {})", kids.join(" "))
}

/// Spines rebuilt top-down: a node belongs to the spine of the leaf reached
/// by following head children from it.
pub fn spines_by_head_walk(root: &ParseNode, table: &HeadTable) -> Vec<Vec<String>> {
    let mut by_token: BTreeMap<usize, Vec<(usize, String)>> = BTreeMap::new();
    walk(root, table, 0, &mut by_token);
    (0..root.span.len())
        .map(|t| {
            let mut chain = by_token.remove(&(root.span.start + t)).unwrap_or_default();
            // Deeper nodes first.
            chain.sort_by_key(|c| std::cmp::Reverse(c.0));
            chain.into_iter().map(|(_, l)| l).collect()
        })
        .collect()
}

fn walk(node: &ParseNode, table: &HeadTable, depth: usize, out: &mut BTreeMap<usize, Vec<(usize, String)>>) {
    let mut head = node;
    while !head.is_leaf() {
        head = &head.children[find_head(head, table)];
    }
    out.entry(head.span.start).or_default().push((depth, node.label.clone()));
    for child in &node.children {
        walk(child, table, depth + 1, out);
    }
}

/// Quadratic LCS table.
pub fn lcs_dp(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

/// Exact transport cost between uniform-mass point sets by enumeration:
/// both sides are replicated to a common count, where an optimal plan is
/// a permutation.
pub fn brute_force_emd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let l = lcm(a.len(), b.len());
    let left: Vec<&Vec<f64>> = a.iter().flat_map(|x| std::iter::repeat_n(x, l / a.len())).collect();
    let right: Vec<&Vec<f64>> = b.iter().flat_map(|x| std::iter::repeat_n(x, l / b.len())).collect();
    let mut perm: Vec<usize> = (0..l).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let cost: f64 = p.iter().enumerate().map(|(i, &j)| dist(left[i], right[j])).sum::<f64>() / l as f64;
        best = best.min(cost);
    });
    best
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Best weighted ROUGE over all nonempty unit subsets, and the best single unit.
pub fn exhaustive_alignment(chapter: &Chapter, config: &AlignmentConfig) -> (f64, f64) {
    let reference = normalize(&chapter.reference_summary);
    let n = chapter.units.len();
    let mut best = 0.0f64;
    let mut single = 0.0f64;
    for mask in 1u32..(1 << n) {
        let ids: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let score = weighted_rouge(&selection_tokens(chapter, &ids), &reference, &config.weights).expect("reference");
        best = best.max(score);
        if ids.len() == 1 {
            single = single.max(score);
        }
    }
    (best, single)
}

/// Random unit texts over a small vocabulary and a reference drawn from it.
pub fn random_text_chapter(rng: &mut impl Rng, units: usize) -> (Vec<String>, String) {
    let word = |rng: &mut dyn rand::RngCore| format!("w{}", rng.random_range(0..8));
    let texts = (0..units)
        .map(|_| (0..rng.random_range(1..=5)).map(|_| word(rng)).collect::<Vec<_>>().join(" "))
        .collect();
    let reference = (0..rng.random_range(2..=8)).map(|_| word(rng)).collect::<Vec<_>>().join(" ");
    (texts, reference)
}
