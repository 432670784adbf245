//! Every pipeline stage on the bundled mini-corpus; prints the report.
//!
//! ```text
//! cargo run --release --example mini_pipeline [-- OUT_DIR]
//! ```

use std::path::{Path, PathBuf};

use spinalsum::pipeline::{run_stage, ExperimentConfig, Stage};

fn main() -> spinalsum::Result<()> {
    env_logger::init();
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut cfg = ExperimentConfig::load(&root.join("data/mini/config.toml"))?;
    cfg.paths.out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("../../target/mini-pipeline"));
    for stage in Stage::ALL {
        let summary = run_stage(&cfg, stage)?;
        if stage == Stage::Report {
            println!("{summary}");
        } else {
            println!("[{stage}] {}", summary.lines().next().unwrap_or_default());
        }
    }
    println!("artifacts in {}", cfg.resolve(&cfg.paths.out_dir).display());
    Ok(())
}
