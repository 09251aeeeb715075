//! The `zipper-lora` binary: exit codes and artifacts.

use std::path::Path;
use std::process::{Command, Output};

use zipper_lora::experiment::{cell_dir, RunManifest, CELL_FILES};
use zipper_lora::report::REPORT_FILES;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zipper-lora"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn zipper-lora")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TWO_LANGUAGES: &str = r#"
name = "cli"
seeds = [0, 1]
variants = ["ZipperSoft"]
eval_per_language = 4
stage1_per_language = 16

[model]
languages = ["ja", "ko"]
source_languages = ["en"]
d_lid = 4

[tiers]
ja = "high"
ko = "low"

[profile]
high = 32
mid = 8
low = 2

[stage1]
steps = 10

[stage2]
steps = 10
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn invalid_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seeds = [0]\n[stage2]\nstpes = 3\n");
    let o = run(&["run", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stpes"));
    assert_eq!(code(&run(&["run", "/nonexistent/run.toml"])), 3);
}

#[test]
fn report_on_an_incomplete_directory_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report", &tmp.path().display().to_string()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
}

#[test]
fn gradcheck_passes_and_a_corrupted_rule_fails() {
    let o = run(&["gradcheck", "--scope", "ops"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["gradcheck", "--scope", "ops", "--fault", "matmul"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("matmul"));
    assert_eq!(code(&run(&["gradcheck", "--scope", "nope"])), 2);
}

#[test]
fn equiv_passes_and_only_zip_depends_on_polarity() {
    assert_eq!(code(&run(&["equiv", "--seeds", "3"])), 0);
    let o = run(&["equiv", "--seeds", "3", "--hard-polarity", "shared_on_one"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("zip"));
}

#[test]
fn minimal_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TWO_LANGUAGES);
    let out = tmp.path().join("out");
    let o = run(&["run", &cfg, "--out", &out.display().to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "manifest.json", "stage1/metrics.csv", "stage1/checkpoint.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    for seed in [0, 1] {
        for f in CELL_FILES {
            assert!(out.join(cell_dir("ZipperSoft", seed)).join(f).is_file(), "{f}");
        }
    }
    for f in REPORT_FILES {
        assert!(out.join(f).is_file(), "{f}");
    }

    // Rebuilding the report from disk gives the same files.
    let before = std::fs::read(out.join("comparison.csv")).unwrap();
    assert_eq!(code(&run(&["report", &out.display().to_string()])), 0);
    assert_eq!(std::fs::read(out.join("comparison.csv")).unwrap(), before);

    assert_eq!(code(&run(&["export-embeddings", &out.display().to_string()])), 0);
    assert!(out.join("separation.csv").is_file());
    assert!(out.join(cell_dir("ZipperSoft", 1)).join("embeddings.csv").is_file());

    // A removed cell makes the directory incomplete.
    std::fs::remove_file(out.join(cell_dir("ZipperSoft", 1)).join("summary.json")).unwrap();
    assert_eq!(code(&run(&["report", &out.display().to_string()])), 4);
}

#[test]
fn seed_flag_restricts_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TWO_LANGUAGES);
    let out = tmp.path().join("out");
    let o = run(&["run", &cfg, "--seed", "7", "--chunked", "--out", &out.display().to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.cells.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![7]);
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    let saved = zipper_lora::config::RunConfig::from_toml_str(&saved).unwrap();
    assert!(saved.stage2.chunked);
    assert_eq!(saved.seeds, vec![7]);
}
