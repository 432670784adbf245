//! Ablation rows on the mini-corpus: spines, the ranking phase, and
//! source-order rendering are switched on one at a time.
//!
//! ```text
//! cargo run --release --example ablation
//! ```
//!
//! Five chapters are far too few for the differences to mean anything;
//! this shows the mechanics. Point the config at a real corpus for numbers.

use std::path::Path;

use spinalsum::metrics::{MetricReport, ReportRow};
use spinalsum::pipeline::{cmd_align, cmd_evaluate, cmd_extract, cmd_segment, cmd_train, ExperimentConfig};

fn main() -> spinalsum::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let base = ExperimentConfig::load(&root.join("data/mini/config.toml"))?;
    let rows: [(&str, bool, bool, bool); 4] = [
        ("Ext (CE)", false, false, false),
        ("+ Spinal", true, false, false),
        ("+ Ranking", true, true, false),
        ("+ Re-ordering", true, true, true),
    ];
    let mut table = Vec::new();
    let mut last: Option<MetricReport> = None;
    for (name, spines, ranking, reorder) in rows {
        let mut cfg = base.clone();
        cfg.paths.out_dir = root.join("../../target/ablation").join(name.replace([' ', '+', '(', ')'], ""));
        cfg.model.insert("use_spines".into(), spines.into());
        if !ranking {
            cfg.schedule.mr_max_epochs = 0;
        }
        cfg.extract.reorder = reorder;
        cfg.extract.system = name.to_string();
        cfg.extract.baselines = false;
        cmd_segment(&cfg)?;
        cmd_align(&cfg)?;
        cmd_train(&cfg)?;
        cmd_extract(&cfg)?;
        let report = cmd_evaluate(&cfg)?;
        table.push(report.row(name).cloned().expect("system row"));
        last = Some(report);
    }
    let last = last.expect("at least one row");
    let oracle: Vec<ReportRow> = last.rows.iter().filter(|r| !table.iter().any(|t| t.system == r.system)).cloned().collect();
    let report = MetricReport {
        metrics_fingerprint: last.metrics_fingerprint,
        rows: oracle.into_iter().chain(table).collect(),
    };
    print!("{}", report.render());
    Ok(())
}
