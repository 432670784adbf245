//! Segments the bundled mini-corpus into clause-level units and prints them.
//!
//! ```text
//! cargo run --example segment_corpus
//! ```

use std::path::Path;

use spinalsum::pipeline::{segment_corpus, ExperimentConfig};

fn main() -> spinalsum::Result<()> {
    let cfg = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mini/config.toml"))?;
    let (chapters, stats) = segment_corpus(&cfg)?;
    for chapter in &chapters {
        println!("{} [{}] {} units", chapter.chapter_id, chapter.split, chapter.units.len());
        for unit in &chapter.units {
            let heads: Vec<String> = unit.spines.iter().filter(|s| s.len() > 2).map(|s| s.to_string()).collect();
            println!("  {:>2} s{} {}  {{{}}}", unit.unit_id, unit.sentence_id, unit.text(), heads.join(" "));
        }
    }
    println!("{stats}");
    Ok(())
}
