//! Trains the scorer on the synthetic 1:50 marker corpus and prints the
//! per-epoch log.
//!
//! ```text
//! cargo run --release --example train_scorer [-- --global-cls]
//! ```

use std::time::Instant;

use spinalsum::extractor::{train, TrainSchedule, TrainingExample};
use spinalsum::nnet::{ModelConfig, Vocabularies};
use spinalsum::segmenter::Split;
use spinalsum::synthetic::{marker_corpus, MarkerCorpusConfig};

fn main() -> spinalsum::Result<()> {
    env_logger::init();
    let corpus = marker_corpus(&MarkerCorpusConfig::default());
    let vocab = Vocabularies::build(corpus.iter().map(|(c, _)| c));
    // `--global-cls` lets every CLS attend to the whole chapter.
    let config = ModelConfig {
        global_cls: std::env::args().any(|a| a == "--global-cls"),
        ..ModelConfig::desk()
    };
    let mut train_set = Vec::new();
    let mut dev_set = Vec::new();
    for (chapter, labels) in &corpus {
        let ex = TrainingExample::new(chapter, labels, &vocab, config.max_position)?;
        match chapter.split {
            Split::Dev => dev_set.push(ex),
            _ => train_set.push(ex),
        }
    }
    let started = Instant::now();
    let outcome = train(&train_set, &dev_set, &config, &vocab, &TrainSchedule::default())?;
    for r in &outcome.log {
        println!(
            "{} {:>2}  loss {:>8}  dev bce {:.4}  auc {:.4}  margin {:.4}{}",
            r.phase,
            r.epoch,
            r.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
            r.dev_bce,
            r.dev_auc,
            r.dev_margin,
            if r.best { "  *" } else { "" }
        );
    }
    println!(
        "ce best: auc {:.4} margin {:.4}; final: auc {:.4} margin {:.4}; {:.1}s",
        outcome.ce_metrics.auc,
        outcome.ce_metrics.margin,
        outcome.final_metrics.auc,
        outcome.final_metrics.margin,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
