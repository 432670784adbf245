//! Greedy oracle labels for the mini-corpus, with the score after each round.
//!
//! ```text
//! cargo run --example oracle_labels
//! ```

use std::path::Path;

use spinalsum::aligner::{greedy_align, AlignmentConfig};
use spinalsum::pipeline::{segment_corpus, ExperimentConfig};

fn main() -> spinalsum::Result<()> {
    let cfg = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mini/config.toml"))?;
    let (chapters, _) = segment_corpus(&cfg)?;
    for chapter in &chapters {
        let oracle = greedy_align(chapter, &AlignmentConfig::default())?;
        println!("{}  reference: {}", chapter.chapter_id, chapter.reference_summary.join(" "));
        for id in oracle.positives() {
            println!("  + {}", chapter.units[id].text());
        }
        let rounds: Vec<String> = oracle.round_scores.iter().map(|s| format!("{s:.4}")).collect();
        println!("  rounds: {}", rounds.join(" -> "));
    }
    Ok(())
}
