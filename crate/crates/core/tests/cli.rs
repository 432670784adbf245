use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spinalsum"))
}

fn mini_config(dir: &std::path::Path) -> PathBuf {
    let src = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/mini");
    for name in ["corpus.jsonl", "parses.txt", "config.toml"] {
        std::fs::copy(src.join(name), dir.join(name)).unwrap();
    }
    dir.join("config.toml")
}

#[test]
fn stages_run_in_order_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = mini_config(dir.path());
    for stage in ["segment", "align", "train", "extract", "evaluate", "report"] {
        let out = bin().args(["--config", config.to_str().unwrap(), "--threads", "2", stage]).output().unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report = std::fs::read_to_string(dir.path().join("out/report.md")).unwrap();
    assert!(report.contains("Oracle Ext"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let config = mini_config(dir.path());
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["--config", config.to_str().unwrap(), "--bogus", "segment"]), Some(1));
    assert_eq!(code(&["--config", "/nonexistent/spinalsum.toml", "segment"]), Some(2));
    // Extract before train: missing checkpoint.
    assert_eq!(code(&["--config", config.to_str().unwrap(), "segment"]), Some(0));
    assert_eq!(code(&["--config", config.to_str().unwrap(), "extract"]), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[paths]\ncorpus = 3\n").unwrap();
    let bad = dir.path().join("bad.toml");
    assert_eq!(code(&["--config", bad.to_str().unwrap(), "segment"]), Some(1));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = mini_config(dir.path());
    let run = |seed: &str| {
        let out = bin()
            .args(["--config", config.to_str().unwrap(), "--seed", seed, "run"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let a = run("1");
    assert_eq!(a, run("1"));
    assert_ne!(a, run("2"));
}
