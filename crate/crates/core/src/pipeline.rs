//! Staged file pipeline behind the command-line tool.
//!
//! Every stage reads the artifacts of earlier stages plus the experiment
//! config and writes its own artifacts under `paths.out_dir`:
//!
//! | stage    | reads                          | writes                          |
//! |----------|--------------------------------|---------------------------------|
//! | segment  | corpus, parse sidecar          | `segmented.jsonl`               |
//! | align    | segmented                      | `labels.jsonl`                  |
//! | train    | segmented, labels              | `model.ckpt`, `train_log.jsonl` |
//! | extract  | segmented, checkpoint          | `extracts.jsonl`                |
//! | evaluate | segmented, labels, extracts    | `metrics.jsonl`                 |
//! | report   | metrics, extracts              | `report.md`                     |
//!
//! JSONL artifacts start with an [`ArtifactHeader`] line that embeds the
//! full config and the fingerprint of the stage that wrote it. A stage
//! recomputes the fingerprints it expects from its own config and refuses
//! upstream artifacts that do not match.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aligner::{greedy_align, AlignmentConfig, OracleLabels};
use crate::error::{Error, Result};
use crate::extractor::{
    evaluate_system, lead_extract, mean_oracle_tokens, oracle_extract, random_extract, select_units, train, Extract,
    SelectionConfig, SelectionPolicy, TrainSchedule, TrainingExample, ORACLE_SYSTEM,
};
use crate::metrics::{EmbeddingTable, MetricReport, MetricsConfig, ReportRow};
use crate::nnet::model::build_input;
use crate::nnet::{Checkpoint, ModelConfig, Scorer, Vocabularies};
use crate::segmenter::{build_chapter, truncate_chapter, Chapter, DatasetStats, SegmentConfig, Split};
use crate::treebank::{parse_ptb, HeadTable, ParseNode};

pub const SEGMENTED: &str = "segmented.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EXTRACTS: &str = "extracts.jsonl";
pub const METRICS: &str = "metrics.jsonl";
pub const REPORT: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segment,
    Align,
    Train,
    Extract,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Segment,
        Stage::Align,
        Stage::Train,
        Stage::Extract,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::Align => "align",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn model(self) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(),
            Profile::Paper => ModelConfig::paper(),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config("profile", format!("unknown profile `{other}` (desk or paper)"))),
        }
    }
}

/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// JSONL, one [`CorpusRecord`] per line.
    pub corpus: PathBuf,
    /// One bracketed parse per corpus sentence, in corpus order.
    pub parses: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub head_table: Option<PathBuf>,
    /// `token v1 .. vd` lines; hashed vectors are used when absent.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Splits to extract from and evaluate on.
    pub splits: Vec<Split>,
    /// Render extracts in source order. Off only for ablations.
    pub reorder: bool,
    /// Row name of the trained system in the report.
    pub system: String,
    /// Add lead and random rows to the report.
    pub baselines: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            splits: vec![Split::Test],
            reorder: true,
            system: "Spinal Ext".to_string(),
            baselines: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub profile: Profile,
    pub paths: Paths,
    #[serde(default)]
    pub segment: SegmentConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    /// Overrides applied on top of the profile's model config.
    #[serde(default)]
    pub model: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    13
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config("<toml>", e.message().to_string()))?;
        let mut config: ExperimentConfig =
            serde_path_to_error::deserialize(value).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        config.base_dir = base_dir.into();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.segment.validate()?;
        self.alignment.validate()?;
        self.schedule.validate()?;
        self.model_config()?;
        if self.extract.splits.is_empty() {
            return Err(Error::config("extract.splits", "at least one split is required"));
        }
        if let Some(k) = self.selection.k {
            SelectionPolicy::TopK(k).validate()?;
        }
        if let Some(b) = self.selection.token_budget {
            SelectionPolicy::TokenBudget(b).validate()?;
        }
        if self.selection.k.is_some() && self.selection.token_budget.is_some() {
            return Err(Error::config("selection", "set either `k` or `token_budget`, not both"));
        }
        Ok(())
    }

    /// The profile's model config with `[model]` overrides and the
    /// experiment seed applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut value = serde_json::to_value(self.profile.model())?;
        let object = value.as_object_mut().expect("struct serializes to an object");
        for (k, v) in &self.model {
            object.insert(k.clone(), v.clone());
        }
        let mut config: ModelConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::config(format!("model.{}", e.path()), e.inner().to_string()))?;
        config.seed = self.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.resolve(&self.paths.out_dir).join(name)
    }

    /// SHA-256 over every config section that can change `stage`'s output,
    /// including those of earlier stages.
    pub fn fingerprint(&self, stage: Stage) -> Result<String> {
        let mut parts: Vec<(&str, serde_json::Value)> = vec![
            ("corpus", serde_json::to_value(&self.paths.corpus)?),
            ("parses", serde_json::to_value(&self.paths.parses)?),
            ("head_table", serde_json::to_value(&self.paths.head_table)?),
            ("segment", serde_json::to_value(&self.segment)?),
        ];
        if stage >= Stage::Align {
            parts.push(("alignment", serde_json::to_value(&self.alignment)?));
        }
        if stage >= Stage::Train {
            parts.push(("model", serde_json::to_value(self.model_config()?)?));
            parts.push(("schedule", serde_json::to_value(&self.schedule)?));
        }
        if stage >= Stage::Extract {
            parts.push(("selection", serde_json::to_value(self.selection)?));
            parts.push(("extract", serde_json::to_value(&self.extract)?));
        }
        if stage >= Stage::Evaluate {
            parts.push(("metrics", serde_json::to_value(&self.metrics)?));
            parts.push(("embeddings", serde_json::to_value(&self.paths.embeddings)?));
        }
        let mut hasher = Sha256::new();
        hasher.update(stage.name().as_bytes());
        hasher.update(serde_json::to_vec(&parts)?);
        Ok(hex::encode(hasher.finalize()))
    }

    fn header(&self, artifact: &str, stage: Stage, details: serde_json::Value) -> Result<ArtifactHeader> {
        Ok(ArtifactHeader {
            artifact: artifact.to_string(),
            stage,
            fingerprint: self.fingerprint(stage)?,
            seed: self.seed,
            config: serde_json::to_value(self)?,
            details,
        })
    }
}

/// First line of every JSONL artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub artifact: String,
    pub stage: Stage,
    pub fingerprint: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub details: serde_json::Value,
}

/// Input corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub chapter_id: String,
    pub split: Split,
    /// Tokenized sentences.
    pub sentences: Vec<Vec<String>>,
    #[serde(default)]
    pub reference_summary: Vec<String>,
}

/// Checkpoint metadata written by the train stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub fingerprint: String,
    pub vocab: Vocabularies,
    /// Mean oracle-extract length on the training split.
    pub token_budget: usize,
    pub ce_best_sha256: String,
    pub params_sha256: String,
    pub dev_auc: f64,
    pub dev_margin: f64,
}

pub type ModelCheckpoint = Checkpoint<ModelConfig, ModelMeta>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(BufWriter::new(file))
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    header: &ArtifactHeader,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n").map_err(io)?;
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    producer: Stage,
    expected: &str,
) -> Result<(ArtifactHeader, Vec<T>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: producer.name(),
        });
    }
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
        .ok_or_else(|| Error::data(format!("{} is empty", path.display())))?;
    let header: ArtifactHeader = serde_json::from_str(&first)
        .map_err(|e| Error::data(format!("{} line 1: bad artifact header: {e}", path.display())))?;
    if header.stage != producer {
        return Err(Error::data(format!(
            "{} was written by the `{}` stage, expected `{producer}`",
            path.display(),
            header.stage
        )));
    }
    if header.fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: header.fingerprint,
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let record =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 2)))?;
        records.push(record);
    }
    Ok((header, records))
}

fn read_lines(path: &Path, what: &str) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {what} {}", path.display()), e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(format!("reading {what} {}", path.display()), e))
}

/// Pairs corpus sentences with sidecar parses, checking that the parse
/// leaves equal the sentence tokens.
pub fn attach_parses(records: &[CorpusRecord], parse_lines: &[String]) -> Result<Vec<Vec<ParseNode>>> {
    let mut line = 0;
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let mut trees = Vec::with_capacity(record.sentences.len());
        for (s, sentence) in record.sentences.iter().enumerate() {
            let Some(text) = parse_lines.get(line) else {
                return Err(Error::data(format!(
                    "parse sidecar ends at line {}, but chapter `{}` sentence {s} has no parse",
                    parse_lines.len(),
                    record.chapter_id
                )));
            };
            let tree = parse_ptb(text)
                .map_err(|e| Error::data(format!("parse sidecar line {}: {e}", line + 1)))?
                .strip_root();
            if tree.tokens() != sentence.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::data(format!(
                    "parse sidecar line {}: leaves do not match chapter `{}` sentence {s}",
                    line + 1,
                    record.chapter_id
                )));
            }
            trees.push(tree);
            line += 1;
        }
        out.push(trees);
    }
    if line < parse_lines.len() {
        return Err(Error::data(format!(
            "parse sidecar line {}: no corpus sentence left for this parse",
            line + 1
        )));
    }
    Ok(out)
}

/// Reads, parses, segments and truncates the corpus without writing anything.
pub fn segment_corpus(cfg: &ExperimentConfig) -> Result<(Vec<Chapter>, DatasetStats)> {
    let corpus_path = cfg.resolve(&cfg.paths.corpus);
    let mut records = Vec::new();
    for (i, line) in read_lines(&corpus_path, "corpus")?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", corpus_path.display(), i + 1)))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::data(format!("corpus {} has no chapters", corpus_path.display())));
    }
    let parse_lines = read_lines(&cfg.resolve(&cfg.paths.parses), "parse sidecar")?;
    let trees = attach_parses(&records, &parse_lines)?;
    let table = match &cfg.paths.head_table {
        Some(p) => HeadTable::load(&cfg.resolve(p))?,
        None => HeadTable::collins(),
    };
    let chapters: Vec<(Chapter, bool)> = records
        .par_iter()
        .zip(&trees)
        .map(|(record, trees)| {
            if trees.is_empty() {
                return Err(Error::data(format!("chapter `{}` has no sentences", record.chapter_id)));
            }
            let full = build_chapter(
                record.chapter_id.clone(),
                record.split,
                trees,
                record.reference_summary.clone(),
                &table,
                &cfg.segment,
            )?;
            full.validate()?;
            let cut = truncate_chapter(&full, cfg.segment.max_chapter_tokens)?;
            let truncated = cut.units.len() < full.units.len();
            Ok((cut, truncated))
        })
        .collect::<Result<_>>()?;
    let mut stats = DatasetStats::default();
    for (chapter, truncated) in &chapters {
        stats.add(chapter);
        stats.truncated += usize::from(*truncated);
    }
    Ok((chapters.into_iter().map(|(c, _)| c).collect(), stats))
}

pub fn cmd_segment(cfg: &ExperimentConfig) -> Result<DatasetStats> {
    let (chapters, stats) = segment_corpus(cfg)?;
    let header = cfg.header(SEGMENTED, Stage::Segment, serde_json::to_value(&stats)?)?;
    write_jsonl(&cfg.artifact(SEGMENTED), &header, &chapters)?;
    Ok(stats)
}

fn load_segmented(cfg: &ExperimentConfig) -> Result<Vec<Chapter>> {
    Ok(read_jsonl(&cfg.artifact(SEGMENTED), Stage::Segment, &cfg.fingerprint(Stage::Segment)?)?.1)
}

fn load_labels(cfg: &ExperimentConfig, chapters: &[Chapter]) -> Result<Vec<OracleLabels>> {
    let (_, labels): (_, Vec<OracleLabels>) =
        read_jsonl(&cfg.artifact(LABELS), Stage::Align, &cfg.fingerprint(Stage::Align)?)?;
    if labels.len() != chapters.len()
        || labels
            .iter()
            .zip(chapters)
            .any(|(l, c)| l.chapter_id != c.chapter_id || l.labels.len() != c.units.len())
    {
        return Err(Error::data("labels do not line up with the segmented chapters; rerun `align`"));
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub chapters: usize,
    pub positives: usize,
    pub units: usize,
    pub mean_oracle_score: f64,
}

impl fmt::Display for AlignSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "aligned {} chapters: {} of {} units positive, mean oracle score {:.4}",
            self.chapters, self.positives, self.units, self.mean_oracle_score
        )
    }
}

pub fn cmd_align(cfg: &ExperimentConfig) -> Result<AlignSummary> {
    let chapters = load_segmented(cfg)?;
    let labels: Vec<OracleLabels> = chapters
        .par_iter()
        .map(|c| greedy_align(c, &cfg.alignment))
        .collect::<Result<_>>()?;
    let summary = AlignSummary {
        chapters: labels.len(),
        positives: labels.iter().map(OracleLabels::positive_count).sum(),
        units: labels.iter().map(|l| l.labels.len()).sum(),
        mean_oracle_score: labels.iter().map(|l| l.oracle_score).sum::<f64>() / labels.len().max(1) as f64,
    };
    let header = cfg.header(LABELS, Stage::Align, serde_json::to_value(&summary)?)?;
    write_jsonl(&cfg.artifact(LABELS), &header, &labels)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_chapters: usize,
    pub dev_chapters: usize,
    pub epochs: usize,
    pub ce_dev_auc: f64,
    pub ce_dev_margin: f64,
    pub dev_auc: f64,
    pub dev_margin: f64,
    pub token_budget: usize,
    pub params_sha256: String,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trained on {} chapters ({} dev) for {} epochs: dev AUC {:.4} -> {:.4}, margin {:.4} -> {:.4}; \
             token budget {}; params {}",
            self.train_chapters,
            self.dev_chapters,
            self.epochs,
            self.ce_dev_auc,
            self.dev_auc,
            self.ce_dev_margin,
            self.dev_margin,
            self.token_budget,
            &self.params_sha256[..12]
        )
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let chapters = load_segmented(cfg)?;
    let labels = load_labels(cfg, &chapters)?;
    let model = cfg.model_config()?;
    let vocab = Vocabularies::build(chapters.iter().filter(|c| c.split == Split::Train));
    let mut train_set = Vec::new();
    let mut dev_set = Vec::new();
    for (chapter, l) in chapters.iter().zip(&labels) {
        match chapter.split {
            Split::Train => train_set.push(TrainingExample::new(chapter, l, &vocab, model.max_position)?),
            Split::Dev => dev_set.push(TrainingExample::new(chapter, l, &vocab, model.max_position)?),
            Split::Test => {}
        }
    }
    let token_budget = mean_oracle_tokens(
        chapters
            .iter()
            .zip(&labels)
            .filter(|(c, _)| c.split == Split::Train),
    );
    let outcome = train(&train_set, &dev_set, &model, &vocab, &cfg.schedule)?;
    let params_sha256 = outcome.scorer.params.digest();
    let summary = TrainSummary {
        train_chapters: train_set.len(),
        dev_chapters: dev_set.len(),
        epochs: outcome.log.iter().filter(|r| r.train_loss.is_some()).count(),
        ce_dev_auc: outcome.ce_metrics.auc,
        ce_dev_margin: outcome.ce_metrics.margin,
        dev_auc: outcome.final_metrics.auc,
        dev_margin: outcome.final_metrics.margin,
        token_budget,
        params_sha256: params_sha256.clone(),
    };
    let checkpoint = ModelCheckpoint {
        config: model,
        seed: cfg.seed,
        metadata: ModelMeta {
            fingerprint: cfg.fingerprint(Stage::Train)?,
            vocab,
            token_budget,
            ce_best_sha256: outcome.ce_best.digest(),
            params_sha256,
            dev_auc: outcome.final_metrics.auc,
            dev_margin: outcome.final_metrics.margin,
        },
        params: outcome.scorer.params,
    };
    let path = cfg.artifact(CHECKPOINT);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    checkpoint.save(&path)?;
    let header = cfg.header(TRAIN_LOG, Stage::Train, serde_json::to_value(&summary)?)?;
    write_jsonl(&cfg.artifact(TRAIN_LOG), &header, &outcome.log)?;
    Ok(summary)
}

pub fn load_checkpoint(cfg: &ExperimentConfig) -> Result<ModelCheckpoint> {
    let path = cfg.artifact(CHECKPOINT);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            stage: Stage::Train.name(),
        });
    }
    let checkpoint = ModelCheckpoint::load(&path)?;
    let expected = cfg.fingerprint(Stage::Train)?;
    if checkpoint.metadata.fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            path,
            expected,
            found: checkpoint.metadata.fingerprint,
        });
    }
    if checkpoint.params.digest() != checkpoint.metadata.params_sha256 {
        return Err(Error::data(format!("{}: parameter digest does not match metadata", path.display())));
    }
    Ok(checkpoint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExtractDetails {
    system: String,
    policy: SelectionPolicy,
    reorder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub chapters: usize,
    pub units: usize,
    pub policy: SelectionPolicy,
}

impl fmt::Display for ExtractSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "extracted {} units from {} chapters with {:?}",
            self.units, self.chapters, self.policy
        )
    }
}

pub fn cmd_extract(cfg: &ExperimentConfig) -> Result<ExtractSummary> {
    let chapters = load_segmented(cfg)?;
    let checkpoint = load_checkpoint(cfg)?;
    let policy = cfg.selection.resolve(|| checkpoint.metadata.token_budget)?;
    let vocab = &checkpoint.metadata.vocab;
    let scorer = Scorer::from_params(checkpoint.config.clone(), checkpoint.params.clone())?;
    let targets: Vec<&Chapter> = chapters
        .iter()
        .filter(|c| cfg.extract.splits.contains(&c.split))
        .collect();
    if targets.is_empty() {
        return Err(Error::data(format!(
            "no chapters in splits {:?} to extract from",
            cfg.extract.splits
        )));
    }
    let extracts: Vec<Extract> = targets
        .par_iter()
        .map(|chapter| {
            let input = build_input(&chapter.units, vocab, scorer.config.max_position)?;
            let scores = scorer.forward(&input)?;
            let lengths: Vec<usize> = chapter.units.iter().map(|u| u.len()).collect();
            Extract::render(chapter, select_units(&scores, &lengths, policy)?, cfg.extract.reorder)
        })
        .collect::<Result<_>>()?;
    let details = ExtractDetails {
        system: cfg.extract.system.clone(),
        policy,
        reorder: cfg.extract.reorder,
    };
    let header = cfg.header(EXTRACTS, Stage::Extract, serde_json::to_value(&details)?)?;
    write_jsonl(&cfg.artifact(EXTRACTS), &header, &extracts)?;
    Ok(ExtractSummary {
        chapters: extracts.len(),
        units: extracts.iter().map(|e| e.unit_ids.len()).sum(),
        policy,
    })
}

pub fn embeddings(cfg: &ExperimentConfig) -> Result<EmbeddingTable> {
    match &cfg.paths.embeddings {
        Some(p) => EmbeddingTable::load(&cfg.resolve(p), cfg.metrics.oov),
        None => Ok(EmbeddingTable::hashed(cfg.metrics.hashed_dim)),
    }
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let chapters = load_segmented(cfg)?;
    let labels = load_labels(cfg, &chapters)?;
    let (header, extracts): (_, Vec<Extract>) =
        read_jsonl(&cfg.artifact(EXTRACTS), Stage::Extract, &cfg.fingerprint(Stage::Extract)?)?;
    let details: ExtractDetails = serde_json::from_value(header.details)?;
    let emb = embeddings(cfg)?;
    let by_id: HashMap<String, &Chapter> = chapters.iter().map(|c| (c.chapter_id.clone(), c)).collect();
    let labels_by_id: HashMap<&str, &OracleLabels> = labels.iter().map(|l| (l.chapter_id.as_str(), l)).collect();

    let mut oracle = Vec::new();
    let mut lead = Vec::new();
    let mut random = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for ex in &extracts {
        let chapter = by_id
            .get(&ex.chapter_id)
            .ok_or_else(|| Error::data(format!("extract for unknown chapter `{}`", ex.chapter_id)))?;
        let l = labels_by_id[ex.chapter_id.as_str()];
        if l.positive_count() > 0 {
            oracle.push(oracle_extract(chapter, l)?);
        }
        lead.push(lead_extract(chapter, details.policy)?);
        random.push(random_extract(chapter, details.policy, &mut rng)?);
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    if !oracle.is_empty() {
        rows.push(evaluate_system(ORACLE_SYSTEM, &oracle, &by_id, &cfg.metrics, &emb)?);
    }
    if cfg.extract.baselines {
        rows.push(evaluate_system("Lead Ext", &lead, &by_id, &cfg.metrics, &emb)?);
        rows.push(evaluate_system("Random Ext", &random, &by_id, &cfg.metrics, &emb)?);
    }
    rows.push(evaluate_system(&details.system, &extracts, &by_id, &cfg.metrics, &emb)?);
    let report = MetricReport {
        metrics_fingerprint: cfg.metrics.fingerprint(&emb),
        rows,
    };
    let header = cfg.header(
        METRICS,
        Stage::Evaluate,
        serde_json::json!({ "metrics_fingerprint": report.metrics_fingerprint }),
    )?;
    write_jsonl(&cfg.artifact(METRICS), &header, &report.rows)?;
    Ok(report)
}

/// Renders the results table followed by every extract.
pub fn render_report(report: &MetricReport, extracts: &[Extract], fingerprint: &str) -> String {
    let mut out = String::from("# Extractive summarization results\n\n");
    out.push_str(&report.render());
    out.push_str(&format!("run: {fingerprint}\n\n## Extracts\n"));
    for ex in extracts {
        out.push_str(&format!("\n### {} (units {:?})\n\n{}\n", ex.chapter_id, ex.unit_ids, ex.text));
    }
    out
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let (header, rows): (_, Vec<ReportRow>) =
        read_jsonl(&cfg.artifact(METRICS), Stage::Evaluate, &cfg.fingerprint(Stage::Evaluate)?)?;
    let (_, extracts): (_, Vec<Extract>) =
        read_jsonl(&cfg.artifact(EXTRACTS), Stage::Extract, &cfg.fingerprint(Stage::Extract)?)?;
    let metrics_fingerprint = header.details["metrics_fingerprint"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let report = MetricReport {
        metrics_fingerprint,
        rows,
    };
    let text = render_report(&report, &extracts, &header.fingerprint);
    let path = cfg.artifact(REPORT);
    let mut out = create(&path)?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(text)
}

/// Runs one stage and returns its console summary.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<String> {
    info!("stage {stage}: fingerprint {}", cfg.fingerprint(stage)?);
    Ok(match stage {
        Stage::Segment => cmd_segment(cfg)?.to_string(),
        Stage::Align => cmd_align(cfg)?.to_string(),
        Stage::Train => cmd_train(cfg)?.to_string(),
        Stage::Extract => cmd_extract(cfg)?.to_string(),
        Stage::Evaluate => cmd_evaluate(cfg)?.render(),
        Stage::Report => cmd_report(cfg)?,
    })
}

/// All stages in order; returns the report text.
pub fn run_all(cfg: &ExperimentConfig) -> Result<String> {
    let mut last = String::new();
    for stage in Stage::ALL {
        last = run_stage(cfg, stage)?;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [paths]
        corpus = "c.jsonl"
        parses = "p.txt"
        out_dir = "out"
    "#;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, "/tmp/x").unwrap();
        assert_eq!(cfg.seed, 13);
        assert_eq!(cfg.model_config().unwrap().token_emb_dim, 16);
        assert_eq!(cfg.artifact(SEGMENTED), PathBuf::from("/tmp/x/out/segmented.jsonl"));
        let text = format!("seed = 4\nprofile = \"paper\"\n{MINIMAL}\n[model]\nnum_layers = 2\n");
        let cfg = ExperimentConfig::from_toml(&text, "").unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!((model.token_emb_dim, model.num_layers, model.seed), (768, 2, 4));
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = format!("{MINIMAL}\n[segment]\nmin_tokens = \"five\"\n");
        let err = ExperimentConfig::from_toml(&bad, "").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "segment.min_tokens"), "{err}");
        assert_eq!(err.exit_code(), 1);
        let bad = format!("{MINIMAL}\n[model]\nnum_heads = 3\n");
        assert!(ExperimentConfig::from_toml(&bad, "").is_err());
        let bad = format!("{MINIMAL}\n[selection]\nk = 2\ntoken_budget = 9\n");
        assert!(ExperimentConfig::from_toml(&bad, "").is_err());
    }

    #[test]
    fn fingerprints_are_scoped_by_stage() {
        let a = ExperimentConfig::from_toml(MINIMAL, "").unwrap();
        let mut b = a.clone();
        b.metrics.hashed_dim = 7;
        assert_eq!(a.fingerprint(Stage::Train).unwrap(), b.fingerprint(Stage::Train).unwrap());
        assert_ne!(a.fingerprint(Stage::Evaluate).unwrap(), b.fingerprint(Stage::Evaluate).unwrap());
        let mut c = a.clone();
        c.seed = 99;
        assert_eq!(a.fingerprint(Stage::Align).unwrap(), c.fingerprint(Stage::Align).unwrap());
        assert_ne!(a.fingerprint(Stage::Train).unwrap(), c.fingerprint(Stage::Train).unwrap());
    }

    #[test]
    fn sidecar_alignment_errors_point_at_lines() {
        let records = vec![CorpusRecord {
            chapter_id: "c".into(),
            split: Split::Train,
            sentences: vec![vec!["a".into(), "b".into()], vec!["c".into()]],
            reference_summary: vec![],
        }];
        let good = vec!["(S (X a) (Y b))".to_string(), "(S (Z c))".to_string()];
        assert_eq!(attach_parses(&records, &good).unwrap()[0].len(), 2);
        let short = good[..1].to_vec();
        assert!(attach_parses(&records, &short).unwrap_err().to_string().contains("ends at line 1"));
        let wrong = vec![good[0].clone(), "(S (Z d))".to_string()];
        assert!(attach_parses(&records, &wrong).unwrap_err().to_string().contains("line 2"));
        let extra = vec![good[0].clone(), good[1].clone(), good[1].clone()];
        assert!(attach_parses(&records, &extra).unwrap_err().to_string().contains("line 3"));
    }
}
