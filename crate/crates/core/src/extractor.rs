//! Two-phase training of the unit scorer, top-k / budgeted selection with
//! positional re-ordering, and system evaluation.

use std::collections::HashMap;
use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aligner::OracleLabels;
use crate::error::{Error, Result};
use crate::metrics::{greedy_match_fscore, relaxed_wmd, rouge_l, rouge_n, EmbeddingTable, MetricsConfig, ReportRow};
use crate::nnet::loss::{bce_with_logits, margin_loss_on_logits, sample_pairs, LossOutput};
use crate::nnet::model::{build_input, Vocabularies};
use crate::nnet::tape::sigmoid;
use crate::nnet::{Adam, AdamConfig, MarginSpace, ModelConfig, ParamStore, Scorer, UnitSequenceInput};
use crate::segmenter::Chapter;

/// Delimiter between units in a rendered extract.
pub const UNIT_DELIMITER: &str = "<q>";
pub const ORACLE_SYSTEM: &str = "Oracle Ext";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub ce_max_epochs: usize,
    /// Epochs without dev-BCE improvement before phase 1 stops.
    pub ce_patience: usize,
    pub ce_lr: f64,
    pub mr_max_epochs: usize,
    /// Epochs without dev-AUC improvement before phase 2 stops.
    pub mr_patience: usize,
    pub mr_lr: f64,
    pub margin: f64,
    pub margin_space: MarginSpace,
    pub pair_cap: usize,
    /// Chapters per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            ce_max_epochs: 20,
            ce_patience: 3,
            ce_lr: 3e-3,
            mr_max_epochs: 10,
            mr_patience: 3,
            mr_lr: 1e-3,
            margin: 1.0,
            margin_space: MarginSpace::Logit,
            pair_cap: 10_000,
            batch_size: 8,
            clip_norm: 5.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.ce_patience == 0 {
            return Err(Error::config("schedule.ce_patience", "must be at least 1"));
        }
        if self.mr_patience == 0 {
            return Err(Error::config("schedule.mr_patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be at least 1"));
        }
        if self.pair_cap == 0 {
            return Err(Error::config("schedule.pair_cap", "must be at least 1"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("schedule.margin", "must be positive"));
        }
        for (field, lr) in [("schedule.ce_lr", self.ce_lr), ("schedule.mr_lr", self.mr_lr)] {
            if !(lr > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("schedule.clip_norm", "must be non-negative"));
        }
        Ok(())
    }
}

/// A chapter's model input together with its oracle labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub chapter_id: String,
    pub input: UnitSequenceInput,
    pub labels: Vec<bool>,
}

impl TrainingExample {
    pub fn new(chapter: &Chapter, labels: &OracleLabels, vocab: &Vocabularies, max_position: usize) -> Result<Self> {
        if labels.chapter_id != chapter.chapter_id || labels.labels.len() != chapter.units.len() {
            return Err(Error::data(format!(
                "labels for `{}` do not match chapter `{}` ({} labels, {} units)",
                labels.chapter_id,
                chapter.chapter_id,
                labels.labels.len(),
                chapter.units.len()
            )));
        }
        Ok(TrainingExample {
            chapter_id: chapter.chapter_id.clone(),
            input: build_input(&chapter.units, vocab, max_position)?,
            labels: labels.labels.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ce,
    Mr,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ce => "ce",
            Phase::Mr => "mr",
        })
    }
}

/// One line of the training log. Epoch 0 of each phase is an evaluation of
/// the phase's starting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub dev_bce: f64,
    pub dev_auc: f64,
    pub dev_margin: f64,
    pub pairs: usize,
    /// Training chapters that contributed no ranking pairs.
    pub pairless_chapters: usize,
    pub grad_norm: Option<f64>,
    pub params_sha256: String,
    pub best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevMetrics {
    pub bce: f64,
    pub auc: f64,
    /// Mean over chapters of the mean `p_pos - p_neg` over pairs.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scorer: Scorer,
    /// Best phase-1 parameters, the starting point of phase 2.
    pub ce_best: ParamStore,
    pub ce_metrics: DevMetrics,
    pub final_metrics: DevMetrics,
    pub log: Vec<EpochRecord>,
}

/// Area under the ROC curve for one chapter; ties count one half.
/// `None` when either class is absent.
pub fn ranking_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Mean `s_pos - s_neg` over all pairs of one chapter.
pub fn mean_pair_margin(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(mean(&pos) - mean(&neg))
}

/// Logits for every example, scored in parallel.
pub fn score_examples(scorer: &Scorer, examples: &[TrainingExample]) -> Result<Vec<Vec<f64>>> {
    examples.par_iter().map(|ex| scorer.logits(&ex.input)).collect()
}

pub fn dev_metrics(scorer: &Scorer, dev: &[TrainingExample]) -> Result<DevMetrics> {
    let logits = score_examples(scorer, dev)?;
    let mut bce = 0.0;
    let (mut auc, mut margin, mut ranked) = (0.0, 0.0, 0usize);
    for (ex, z) in dev.iter().zip(&logits) {
        bce += bce_with_logits(z, &ex.labels)?.value;
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        if let (Some(a), Some(m)) = (ranking_auc(z, &ex.labels), mean_pair_margin(&p, &ex.labels)) {
            auc += a;
            margin += m;
            ranked += 1;
        }
    }
    let n = dev.len().max(1) as f64;
    let r = ranked.max(1) as f64;
    Ok(DevMetrics {
        bce: bce / n,
        auc: if ranked == 0 { 0.5 } else { auc / r },
        margin: margin / r,
    })
}

struct EpochStats {
    loss: f64,
    pairs: usize,
    pairless: usize,
    grad_norm: f64,
}

fn run_epoch(
    scorer: &mut Scorer,
    adam: &mut Adam,
    train: &[TrainingExample],
    schedule: &TrainSchedule,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut stats = EpochStats {
        loss: 0.0,
        pairs: 0,
        pairless: 0,
        grad_norm: 0.0,
    };
    for batch in order.chunks(schedule.batch_size) {
        // Pairs are drawn sequentially so the stream does not depend on
        // thread scheduling.
        let pairs: Vec<Vec<(usize, usize)>> = batch
            .iter()
            .map(|&i| match phase {
                Phase::Ce => Vec::new(),
                Phase::Mr => sample_pairs(&train[i].labels, schedule.pair_cap, rng),
            })
            .collect();
        let results: Vec<(LossOutput, ParamStore)> = batch
            .par_iter()
            .zip(&pairs)
            .map(|(&i, pairs)| {
                let ex = &train[i];
                scorer.loss_and_grads(&ex.input, |z| match phase {
                    Phase::Ce => bce_with_logits(z, &ex.labels),
                    Phase::Mr => Ok(margin_loss_on_logits(z, pairs, schedule.margin, schedule.margin_space)),
                })
            })
            .collect::<Result<_>>()?;
        let mut grads = scorer.params.zeros_like();
        for (out, g) in &results {
            stats.loss += out.value;
            stats.pairs += out.pairs;
            if phase == Phase::Mr && out.pairs == 0 {
                stats.pairless += 1;
            }
            grads.accumulate(g);
        }
        grads.scale(1.0 / batch.len() as f64);
        let norm = if schedule.clip_norm > 0.0 {
            grads.clip_global_norm(schedule.clip_norm)
        } else {
            grads.global_norm()
        };
        stats.grad_norm = stats.grad_norm.max(norm);
        adam.step(&mut scorer.params, &grads);
    }
    stats.loss /= train.len().max(1) as f64;
    Ok(stats)
}

fn record(phase: Phase, epoch: usize, stats: Option<&EpochStats>, m: DevMetrics, params: &ParamStore, best: bool) -> EpochRecord {
    EpochRecord {
        phase,
        epoch,
        train_loss: stats.map(|s| s.loss),
        dev_bce: m.bce,
        dev_auc: m.auc,
        dev_margin: m.margin,
        pairs: stats.map_or(0, |s| s.pairs),
        pairless_chapters: stats.map_or(0, |s| s.pairless),
        grad_norm: stats.map(|s| s.grad_norm),
        params_sha256: params.digest(),
        best,
    }
}

/// Cross-entropy until dev BCE stops improving, then margin ranking from
/// the best cross-entropy parameters until dev AUC stops improving.
pub fn train(
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    config: &ModelConfig,
    vocab: &Vocabularies,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    if dev_set.is_empty() {
        return Err(Error::data("dev split is empty; early stopping needs it"));
    }
    if !train_set.iter().any(|ex| ex.labels.iter().any(|&l| l)) {
        return Err(Error::data(
            "no positive oracle label in the training split; check the alignment stage output",
        ));
    }
    let mut scorer = Scorer::init(config.clone(), vocab.tokens.len(), vocab.labels.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005E_ED0F_7EA1);
    let mut log = Vec::new();

    let start = dev_metrics(&scorer, dev_set)?;
    log.push(record(Phase::Ce, 0, None, start, &scorer.params, true));
    let mut best = (start, scorer.params.clone());
    let mut adam = Adam::new(AdamConfig {
        lr: schedule.ce_lr,
        ..AdamConfig::default()
    });
    let mut stale = 0;
    for epoch in 1..=schedule.ce_max_epochs {
        let stats = run_epoch(&mut scorer, &mut adam, train_set, schedule, Phase::Ce, &mut rng)?;
        let m = dev_metrics(&scorer, dev_set)?;
        let improved = m.bce < best.0.bce;
        if improved {
            best = (m, scorer.params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        info!(
            "ce epoch {epoch}: train {:.5} dev bce {:.5} auc {:.4} margin {:.4}",
            stats.loss, m.bce, m.auc, m.margin
        );
        log.push(record(Phase::Ce, epoch, Some(&stats), m, &scorer.params, improved));
        if stale >= schedule.ce_patience {
            break;
        }
    }

    let (ce_metrics, ce_best) = best;
    scorer.params = ce_best.clone();
    info!("phase 2 starts from ce checkpoint {}", ce_best.digest());
    log.push(record(Phase::Mr, 0, None, ce_metrics, &scorer.params, true));
    let mut best = (ce_metrics, ce_best.clone());
    let mut adam = Adam::new(AdamConfig {
        lr: schedule.mr_lr,
        ..AdamConfig::default()
    });
    let mut stale = 0;
    for epoch in 1..=schedule.mr_max_epochs {
        let stats = run_epoch(&mut scorer, &mut adam, train_set, schedule, Phase::Mr, &mut rng)?;
        if stats.pairless > 0 {
            warn!("mr epoch {epoch}: {} chapters had no ranking pairs", stats.pairless);
        }
        let m = dev_metrics(&scorer, dev_set)?;
        let improved = m.auc > best.0.auc || (m.auc == best.0.auc && m.margin > best.0.margin);
        if improved {
            best = (m, scorer.params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        info!(
            "mr epoch {epoch}: train {:.5} dev bce {:.5} auc {:.4} margin {:.4}",
            stats.loss, m.bce, m.auc, m.margin
        );
        log.push(record(Phase::Mr, epoch, Some(&stats), m, &scorer.params, improved));
        if stale >= schedule.mr_patience {
            break;
        }
    }
    let (final_metrics, params) = best;
    scorer.params = params;
    Ok(TrainOutcome {
        scorer,
        ce_best,
        ce_metrics,
        final_metrics,
        log,
    })
}

/// How many units an extract may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    TopK(usize),
    TokenBudget(usize),
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            SelectionPolicy::TopK(0) => Err(Error::config("selection.k", "must be at least 1")),
            SelectionPolicy::TokenBudget(0) => Err(Error::config("selection.token_budget", "must be at least 1")),
            _ => Ok(()),
        }
    }
}

/// Configuration form of [`SelectionPolicy`]: at most one field set; with
/// neither, the token budget is derived from the training oracle extracts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: Option<usize>,
    pub token_budget: Option<usize>,
}

impl SelectionConfig {
    pub fn resolve(&self, auto_budget: impl FnOnce() -> usize) -> Result<SelectionPolicy> {
        let policy = match (self.k, self.token_budget) {
            (Some(_), Some(_)) => {
                return Err(Error::config("selection", "set either `k` or `token_budget`, not both"));
            }
            (Some(k), None) => SelectionPolicy::TopK(k),
            (None, Some(b)) => SelectionPolicy::TokenBudget(b),
            (None, None) => SelectionPolicy::TokenBudget(auto_budget().max(1)),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Mean token length of oracle extracts, rounded to the nearest token.
pub fn mean_oracle_tokens<'a>(pairs: impl IntoIterator<Item = (&'a Chapter, &'a OracleLabels)>) -> usize {
    let (mut total, mut n) = (0usize, 0usize);
    for (chapter, labels) in pairs {
        total += labels.positives().map(|i| chapter.units[i].len()).sum::<usize>();
        n += 1;
    }
    if n == 0 {
        0
    } else {
        (total as f64 / n as f64).round() as usize
    }
}

/// Unit ids in selection order: by score descending, ties to the lower id.
pub fn select_units(scores: &[f64], unit_lengths: &[usize], policy: SelectionPolicy) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::data("cannot select from zero units"));
    }
    if scores.len() != unit_lengths.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} units",
            scores.len(),
            unit_lengths.len()
        )));
    }
    policy.validate()?;
    let mut ranked: Vec<usize> = (0..scores.len()).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(match policy {
        SelectionPolicy::TopK(k) => {
            if k > scores.len() {
                warn!("k = {k} exceeds {} units; selecting all", scores.len());
            }
            ranked.truncate(k);
            ranked
        }
        SelectionPolicy::TokenBudget(budget) => {
            let mut used = 0;
            let mut chosen = Vec::new();
            for &i in &ranked {
                if used + unit_lengths[i] <= budget {
                    used += unit_lengths[i];
                    chosen.push(i);
                }
            }
            if chosen.is_empty() {
                chosen.push(ranked[0]);
            }
            chosen
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extract {
    pub chapter_id: String,
    /// Strictly increasing.
    pub unit_ids: Vec<usize>,
    pub text: String,
}

impl Extract {
    /// Selected units rendered in source order.
    pub fn new(chapter: &Chapter, unit_ids: Vec<usize>) -> Result<Extract> {
        Extract::render(chapter, unit_ids, true)
    }

    /// `selection` is in selection order. With `reorder` the text follows
    /// source order; without it the text keeps selection order. `unit_ids`
    /// is ascending either way.
    pub fn render(chapter: &Chapter, selection: Vec<usize>, reorder: bool) -> Result<Extract> {
        let mut order = selection;
        let mut seen = vec![false; chapter.units.len()];
        for &i in &order {
            if i >= chapter.units.len() {
                return Err(Error::data(format!(
                    "unit {i} out of range for chapter `{}`",
                    chapter.chapter_id
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::data(format!("unit {i} selected twice")));
            }
        }
        let mut unit_ids = order.clone();
        unit_ids.sort_unstable();
        if reorder {
            order.clone_from(&unit_ids);
        }
        let text = order
            .iter()
            .map(|&i| chapter.units[i].text())
            .collect::<Vec<_>>()
            .join(UNIT_DELIMITER);
        Ok(Extract {
            chapter_id: chapter.chapter_id.clone(),
            unit_ids,
            text,
        })
    }

    /// Whitespace tokens of the rendered text, delimiters removed.
    pub fn tokens(&self) -> Vec<&str> {
        self.text
            .split(UNIT_DELIMITER)
            .flat_map(str::split_whitespace)
            .collect()
    }
}

pub fn select_and_order(chapter: &Chapter, scores: &[f64], policy: SelectionPolicy) -> Result<Extract> {
    let lengths: Vec<usize> = chapter.units.iter().map(|u| u.len()).collect();
    Extract::new(chapter, select_units(scores, &lengths, policy)?)
}

/// The first units of the chapter that fit `policy`.
pub fn lead_extract(chapter: &Chapter, policy: SelectionPolicy) -> Result<Extract> {
    let scores: Vec<f64> = (0..chapter.units.len()).map(|i| -(i as f64)).collect();
    select_and_order(chapter, &scores, policy)
}

/// Uniformly random units that fit `policy`.
pub fn random_extract(chapter: &Chapter, policy: SelectionPolicy, rng: &mut impl rand::Rng) -> Result<Extract> {
    let scores: Vec<f64> = (0..chapter.units.len()).map(|_| rng.random()).collect();
    select_and_order(chapter, &scores, policy)
}

pub fn oracle_extract(chapter: &Chapter, labels: &OracleLabels) -> Result<Extract> {
    Extract::new(chapter, labels.positives().collect())
}

/// Mean metric values of `extracts` against their chapters' references.
/// Extracts whose chapter or reference is missing are skipped and counted.
/// Candidate tokens come from the rendered text, so unit order matters for
/// ROUGE-L.
pub fn evaluate_system(
    system: &str,
    extracts: &[Extract],
    chapters: &HashMap<String, &Chapter>,
    config: &MetricsConfig,
    emb: &EmbeddingTable,
) -> Result<ReportRow> {
    if extracts.is_empty() {
        return Err(Error::data(format!("system `{system}` has no extracts to evaluate")));
    }
    let scored: Vec<Option<[f64; 5]>> = extracts
        .par_iter()
        .map(|ex| {
            let Some(chapter) = chapters.get(&ex.chapter_id) else {
                return Ok(None);
            };
            if chapter.reference_summary.is_empty() {
                return Ok(None);
            }
            let cand = config.prepare(&ex.tokens());
            let reference = config.prepare(&chapter.reference_summary);
            Ok(Some([
                rouge_n(&cand, &reference, 1).f1,
                rouge_n(&cand, &reference, 2).f1,
                rouge_l(&cand, &reference).f1,
                relaxed_wmd(&cand, &reference, emb)?,
                greedy_match_fscore(&cand, &reference, emb)?.f1,
            ]))
        })
        .collect::<Result<_>>()?;
    let mut sums = [0.0; 5];
    let mut n = 0;
    for s in scored.iter().flatten() {
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
        n += 1;
    }
    let skipped = extracts.len() - n;
    if skipped > 0 {
        warn!("{system}: skipped {skipped} extracts without a chapter or reference");
    }
    if n == 0 {
        return Err(Error::data(format!("system `{system}`: no extract has a reference summary")));
    }
    let mean = |i: usize| sums[i] / n as f64;
    Ok(ReportRow {
        system: system.to_string(),
        r1: mean(0),
        r2: mean(1),
        rl: mean(2),
        wmd: mean(3),
        emb_f: mean(4),
        chapters: n,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::tests::toy_chapter;
    use proptest::prelude::*;

    #[test]
    fn top_k_examples() {
        let lens = [1; 4];
        assert_eq!(select_units(&[0.2, 0.9, 0.1, 0.8], &lens, SelectionPolicy::TopK(2)).unwrap(), vec![1, 3]);
        assert_eq!(select_units(&[0.5; 4], &lens, SelectionPolicy::TopK(2)).unwrap(), vec![0, 1]);
        let mut all = select_units(&[0.3, 0.1, 0.7, 0.2], &lens, SelectionPolicy::TopK(4)).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(select_units(&[0.3, 0.1], &[1, 1], SelectionPolicy::TopK(9)).unwrap().len(), 2);
        assert!(select_units(&[], &[], SelectionPolicy::TopK(1)).is_err());
    }

    #[test]
    fn budget_skips_units_that_do_not_fit() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let lens = [5, 10, 4, 1];
        assert_eq!(select_units(&scores, &lens, SelectionPolicy::TokenBudget(10)).unwrap(), vec![0, 2, 3]);
        // Nothing fits: the top unit is still returned.
        assert_eq!(select_units(&scores, &[20; 4], SelectionPolicy::TokenBudget(3)).unwrap(), vec![0]);
    }

    #[test]
    fn extract_renders_in_source_order() {
        let chapter = toy_chapter(&["a b", "c d", "e f"], "a");
        let ex = select_and_order(&chapter, &[0.1, 0.5, 0.9], SelectionPolicy::TopK(2)).unwrap();
        assert_eq!(ex.unit_ids, vec![1, 2]);
        assert_eq!(ex.text, "c d<q>e f");
        assert_eq!(ex.tokens(), vec!["c", "d", "e", "f"]);
        let kept = Extract::render(&chapter, vec![2, 0], false).unwrap();
        assert_eq!((kept.unit_ids.clone(), kept.text.as_str()), (vec![0, 2], "e f<q>a b"));
        assert!(Extract::render(&chapter, vec![1, 1], true).is_err());
    }

    #[test]
    fn auc_and_margin() {
        let labels = [true, false, false, true];
        assert_eq!(ranking_auc(&[0.9, 0.1, 0.2, 0.8], &labels), Some(1.0));
        assert_eq!(ranking_auc(&[0.1, 0.9, 0.8, 0.2], &labels), Some(0.0));
        assert_eq!(ranking_auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(ranking_auc(&[0.5, 0.5], &[false, false]), None);
        let m = mean_pair_margin(&[0.9, 0.1, 0.3, 0.7], &labels).unwrap();
        assert!((m - 0.6).abs() < 1e-12);
    }

    #[test]
    fn evaluation_of_reference_copy_is_perfect() {
        let chapter = toy_chapter(&["the cat sat", "on the mat", "far away"], "the cat sat on the mat");
        let mut chapters = HashMap::new();
        chapters.insert(chapter.chapter_id.clone(), &chapter);
        let ex = Extract::new(&chapter, vec![0, 1]).unwrap();
        let emb = EmbeddingTable::hashed(8);
        let row = evaluate_system("copy", &[ex], &chapters, &MetricsConfig::default(), &emb).unwrap();
        assert!((row.r1 - 1.0).abs() < 1e-12 && (row.rl - 1.0).abs() < 1e-12);
        assert!(row.wmd.abs() < 1e-12);
        assert!(evaluate_system("none", &[], &chapters, &MetricsConfig::default(), &emb).is_err());
        let orphan = Extract {
            chapter_id: "missing".into(),
            unit_ids: vec![0],
            text: String::new(),
        };
        let row = evaluate_system(
            "mixed",
            &[Extract::new(&chapter, vec![2]).unwrap(), orphan],
            &chapters,
            &MetricsConfig::default(),
            &emb,
        )
        .unwrap();
        assert_eq!((row.chapters, row.skipped), (1, 1));
    }

    #[test]
    fn selection_config_resolution() {
        let auto = SelectionConfig::default().resolve(|| 42).unwrap();
        assert_eq!(auto, SelectionPolicy::TokenBudget(42));
        let k = SelectionConfig { k: Some(3), token_budget: None }.resolve(|| 0).unwrap();
        assert_eq!(k, SelectionPolicy::TopK(3));
        assert!(SelectionConfig { k: Some(3), token_budget: Some(5) }.resolve(|| 0).is_err());
        assert!(SelectionConfig { k: Some(0), token_budget: None }.resolve(|| 0).is_err());
    }

    proptest! {
        #[test]
        fn raising_a_selected_score_keeps_it_selected(
            scores in prop::collection::vec(0.0f64..1.0, 1..20),
            k in 1usize..8,
            pick in any::<prop::sample::Index>(),
            bump in 0.0f64..2.0,
        ) {
            let lens = vec![1; scores.len()];
            let chosen = select_units(&scores, &lens, SelectionPolicy::TopK(k)).unwrap();
            let u = chosen[pick.index(chosen.len())];
            let mut raised = scores.clone();
            raised[u] += bump;
            let again = select_units(&raised, &lens, SelectionPolicy::TopK(k)).unwrap();
            prop_assert!(again.contains(&u));
        }

        #[test]
        fn ordering_preserves_the_selected_multiset(
            scores in prop::collection::vec(0.0f64..1.0, 1..20),
            budget in 1usize..40,
            lens_seed in prop::collection::vec(1usize..6, 20),
        ) {
            let lens = &lens_seed[..scores.len()];
            let chosen = select_units(&scores, lens, SelectionPolicy::TokenBudget(budget)).unwrap();
            let texts: Vec<String> = lens.iter().enumerate().map(|(i, &n)| vec![format!("w{i}"); n].join(" ")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let chapter = toy_chapter(&refs, "w0");
            let ex = Extract::new(&chapter, chosen.clone()).unwrap();
            let mut sorted = chosen;
            sorted.sort();
            prop_assert_eq!(&ex.unit_ids, &sorted);
            prop_assert!(ex.unit_ids.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(ex.text.matches(UNIT_DELIMITER).count(), sorted.len() - 1);
        }
    }
}
