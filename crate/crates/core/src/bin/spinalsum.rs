use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spinalsum::pipeline::{run_all, run_stage, ExperimentConfig, Profile, Stage};

#[derive(Parser)]
#[command(version, about = "Constituent-level extractive summarization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "spinalsum.toml")]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Model size profile: desk or paper.
    #[arg(long, global = true)]
    profile: Option<Profile>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Parse sidecar + corpus -> units with spines.
    Segment,
    /// Greedy oracle labels.
    Align,
    /// Two-phase scorer training.
    Train,
    /// Score and select units.
    Extract,
    /// Metrics for the extracts and baselines.
    Evaluate,
    /// Results table and extracts as markdown.
    Report,
    /// All stages in order.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on usage errors; 2 is reserved for data errors here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = ExperimentConfig::load(&cli.config).and_then(|mut cfg| {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(profile) = cli.profile {
            cfg.profile = profile;
        }
        cfg.validate()?;
        match cli.command {
            Command::Segment => run_stage(&cfg, Stage::Segment),
            Command::Align => run_stage(&cfg, Stage::Align),
            Command::Train => run_stage(&cfg, Stage::Train),
            Command::Extract => run_stage(&cfg, Stage::Extract),
            Command::Evaluate => run_stage(&cfg, Stage::Evaluate),
            Command::Report => run_stage(&cfg, Stage::Report),
            Command::Run => run_all(&cfg),
        }
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
