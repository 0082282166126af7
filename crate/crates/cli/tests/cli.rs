use std::path::Path;
use std::process::{Command, Output};

fn symlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SYMLAB_SEED")
        .output()
        .expect("binary runs")
}

fn run_dir(o: &Output) -> std::path::PathBuf {
    let stdout = String::from_utf8_lossy(&o.stdout);
    stdout.lines().next().expect("run directory on stdout").into()
}

#[test]
fn cma_on_the_oracle_flags_the_wired_head() {
    let out = tempfile::tempdir().unwrap();
    let o = symlab(out.path(), &["cma", "--target", "abstraction", "--pairs", "20", "--perms", "500", "--alpha", "0.05", "--svg", "false"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let mask = std::fs::read_to_string(dir.join("cma_abstraction_mask.csv")).unwrap();
    let ones: Vec<&str> = mask.lines().skip(1).flat_map(|l| l.split(',').skip(1)).filter(|v| *v == "1").collect();
    assert_eq!(ones.len(), 1, "{mask}");
    assert!(mask.lines().nth(1).unwrap().starts_with("0,1,"), "{mask}");
    assert!(dir.join("cma_abstraction_scores.csv").is_file());
    assert!(!dir.join("cma_abstraction.svg").exists());
    assert!(dir.join("manifest.json").is_file());
}

#[test]
fn report_on_empty_results_fails_with_a_hint() {
    let out = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let o = symlab(out.path(), &["report", "--results", empty.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run an analysis first"));
}

#[test]
fn missing_checkpoint_and_unknown_flags_fail() {
    let out = tempfile::tempdir().unwrap();
    let o = symlab(out.path(), &["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert!(!o.status.success());
    let o = symlab(out.path(), &["eval", "--no-such-flag", "1"]);
    assert!(!o.status.success());
    let o = symlab(out.path(), &["eval", "--shots", "-1"]);
    assert!(!o.status.success());
    assert_eq!(std::fs::read_dir(out.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn eval_with_seed_from_the_environment() {
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_symlab"))
        .args(["eval", "--task", "identity", "--shots", "2", "--n", "40", "--seed", "3", "--out"])
        .arg(out.path())
        .env("SYMLAB_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(run_dir(&o).join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["config"]["seed"], "11");
    assert_eq!(v["seeds"], serde_json::json!([11]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("eval.accuracy = 1.0"));
}

#[test]
fn prefix_run_replays() {
    let out = tempfile::tempdir().unwrap();
    let o = symlab(out.path(), &["prefix-match", "--model", "literal"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = run_dir(&o).join("manifest.json");
    let r = symlab(out.path(), &["replay", manifest.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("reproduced byte for byte"));
}

#[test]
fn config_files_feed_the_run() {
    let out = tempfile::tempdir().unwrap();
    let conf = out.path().join("run.conf");
    std::fs::write(&conf, "# quick\nn = 10\nname = from file\n").unwrap();
    let o = symlab(out.path(), &["eval", "--config", conf.to_str().unwrap(), "--print-config"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout), "analysis = eval\nn = 10\nname = from file\n");
}

