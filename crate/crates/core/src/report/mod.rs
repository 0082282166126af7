//! Run orchestration: configuration, analysis dispatch, manifests,
//! heatmaps and replay.
//!
//! A run reads a [`Config`] and writes into its own directory
//! `<runs_root>/<timestamp>-<name>/`: the analysis outputs, `summary.json`
//! and `manifest.json`. Everything but the manifest depends only on the
//! config, its seed and the input files it names, so [`replay`] reproduces
//! those outputs byte for byte.

mod analyses;
pub mod config;
pub mod manifest;
pub mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

pub use analyses::{load_model, parse_heads, read_head_csv, weighted_from_scores, LoadedModel, ModelKind};
pub use config::{schema_text, Config, ANALYSES, SCHEMA, SEED_ENV};
pub use manifest::{to_sorted_json, OutputFile, RunManifest, MANIFEST_FILE, TOOL_VERSION};
pub use svg::{colormap, render_heatmap, Heatmap};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Output sink of one run.
pub(crate) struct Ctx {
    dir: PathBuf,
    outputs: BTreeSet<String>,
    summary: BTreeMap<String, Value>,
    seeds: BTreeSet<u64>,
    exec: Exec,
    svg: bool,
    checkpoint_sha256: Option<String>,
}

impl Ctx {
    fn file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if !self.outputs.insert(name.to_string()) {
            return Err(Error::Config(format!("output `{name}` written twice")));
        }
        std::fs::write(self.dir.join(name), bytes)?;
        Ok(())
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.file(name, &buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.file(name, to_sorted_json(value)?.as_bytes())
    }

    fn heatmap(&mut self, name: &str, h: &Heatmap) -> Result<()> {
        if self.svg {
            self.file(name, render_heatmap(h)?.as_bytes())?;
        }
        Ok(())
    }

    fn note<T: Serialize>(&mut self, key: impl Into<String>, value: T) -> Result<()> {
        self.summary.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' }).collect()
}

fn create_run_dir(root: &Path, stamp: &str, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let base = format!("{stamp}-{}", sanitize(name));
    for k in 1.. {
        let dir = if k == 1 { root.join(&base) } else { root.join(format!("{base}-{k}")) };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded suffix search")
}

/// Runs the configured analysis into a fresh directory under `runs_root`.
/// A failed run leaves no directory behind.
pub fn run(cfg: &Config, runs_root: &Path, exec: Exec) -> Result<RunOutcome> {
    cfg.validate()?;
    let cfg = cfg.absolutized()?;
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let dir = create_run_dir(runs_root, &started.format("%Y%m%dT%H%M%SZ").to_string(), cfg.name()?)?;
    let mut ctx = Ctx {
        dir: dir.clone(),
        outputs: BTreeSet::new(),
        summary: BTreeMap::new(),
        seeds: BTreeSet::from([cfg.seed()?]),
        exec,
        svg: cfg.flag("svg")?,
        checkpoint_sha256: None,
    };
    let result = analyses::dispatch(&mut ctx, &cfg).and_then(|()| {
        let summary = ctx.summary.clone();
        ctx.json("summary.json", &summary)
    });
    if let Err(e) = result {
        let _ = std::fs::remove_dir_all(&dir);
        return Err(e);
    }
    let outputs = ctx.outputs.iter().map(|p| manifest::describe_output(&dir, p)).collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        name: cfg.name()?.to_string(),
        analysis: cfg.analysis()?.to_string(),
        config: cfg.entries().clone(),
        seeds: ctx.seeds.into_iter().collect(),
        checkpoint_sha256: ctx.checkpoint_sha256,
        outputs,
        summary: ctx.summary,
        tool_version: TOOL_VERSION.to_string(),
        started_at: started.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    manifest.write(&dir)?;
    Ok(RunOutcome { dir, manifest })
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub original: RunManifest,
    pub replay: RunOutcome,
    /// Empty when every output was reproduced byte for byte.
    pub mismatches: Vec<String>,
}

/// Re-runs the configuration recorded in a manifest and compares output
/// hashes.
pub fn replay(manifest_path: &Path, runs_root: &Path, exec: Exec) -> Result<ReplayOutcome> {
    let original = RunManifest::load(manifest_path)?;
    let cfg = Config::from_entries(original.config.clone())?;
    let replay = run(&cfg, runs_root, exec)?;
    let mut mismatches = Vec::new();
    if original.checkpoint_sha256 != replay.manifest.checkpoint_sha256 {
        mismatches.push("model checkpoint hash differs".to_string());
    }
    let new: BTreeMap<&str, &str> = replay.manifest.outputs.iter().map(|o| (o.path.as_str(), o.sha256.as_str())).collect();
    let old: BTreeMap<&str, &str> = original.outputs.iter().map(|o| (o.path.as_str(), o.sha256.as_str())).collect();
    for (path, hash) in &old {
        match new.get(path) {
            None => mismatches.push(format!("{path}: not produced by the replay")),
            Some(h) if h != hash => mismatches.push(format!("{path}: contents differ")),
            _ => {}
        }
    }
    for path in new.keys().filter(|p| !old.contains_key(*p)) {
        mismatches.push(format!("{path}: not in the original run"));
    }
    Ok(ReplayOutcome { original, replay, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Config {
        Config::parse(text).unwrap()
    }

    #[test]
    fn failed_runs_leave_nothing() {
        let root = tempfile::tempdir().unwrap();
        let c = cfg("analysis = eval\nmodel = checkpoint\ncheckpoint = /nonexistent/model.ckpt\n");
        assert!(matches!(run(&c, root.path(), Exec::Sequential), Err(Error::Checkpoint(_))));
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
    }

    #[test]
    fn report_on_empty_results_is_an_actionable_error() {
        let root = tempfile::tempdir().unwrap();
        let results = tempfile::tempdir().unwrap();
        let c = cfg(&format!("analysis = report\nresults = {}\n", results.path().display()));
        match run(&c, root.path(), Exec::Sequential) {
            Err(Error::Empty(msg)) => assert!(msg.contains("run an analysis first"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prefix_run_replays_byte_identically() {
        let root = tempfile::tempdir().unwrap();
        let c = cfg("analysis = prefix-match\nmodel = literal\nname = pm test\n");
        let out = run(&c, root.path(), Exec::Parallel).unwrap();
        assert!(out.dir.file_name().unwrap().to_string_lossy().ends_with("-pm-test"));
        let paths: Vec<&str> = out.manifest.outputs.iter().map(|o| o.path.as_str()).collect();
        assert_eq!(paths, ["prefix_match.csv", "prefix_match.svg", "summary.json"]);
        assert_eq!(out.manifest.seeds, vec![0, 1, 2, 3]);
        assert!(out.manifest.verify(&out.dir).is_empty());
        let r = replay(&out.dir.join(MANIFEST_FILE), root.path(), Exec::Sequential).unwrap();
        assert!(r.mismatches.is_empty(), "{:?}", r.mismatches);
        assert_ne!(r.replay.dir, out.dir);
    }

    #[test]
    fn oracle_build_round_trips_through_a_checkpoint_run() {
        let root = tempfile::tempdir().unwrap();
        let built = run(&cfg("analysis = oracle-build\n"), root.path(), Exec::Parallel).unwrap();
        let ckpt = built.dir.join("oracle.ckpt");
        let c = cfg(&format!("analysis = eval\ncheckpoint = {}\nn = 50\n", ckpt.display()));
        let out = run(&c, root.path(), Exec::Parallel).unwrap();
        assert_eq!(out.manifest.checkpoint_sha256, built.manifest.checkpoint_sha256);
        assert_eq!(out.manifest.summary["eval.accuracy"], serde_json::json!(1.0));
        let report = run(&cfg(&format!("analysis = report\nresults = {}\n", root.path().display())), root.path(), Exec::Parallel).unwrap();
        assert_eq!(report.manifest.summary["report.runs"], serde_json::json!(2));
        let index = std::fs::read_to_string(report.dir.join("index.html")).unwrap();
        assert!(index.contains("eval.accuracy"));
    }
}
