//! `symlab` command line: one subcommand per analysis plus `replay`.
//!
//! Every schema key is a flag with dashes for underscores, e.g.
//! `symlab cma --target abstraction --pairs 200`. Flags override
//! `--config` entries; `SYMLAB_SEED` overrides both.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use symlab::report::{self, config::KeyKind, schema_text, Config, ANALYSES, SCHEMA};
use symlab::Exec;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn about(analysis: &str) -> &'static str {
    match analysis {
        "oracle-build" => "Write the hand-wired oracle (or literal-induction) checkpoint",
        "train" => "Train the toy transformer on identity rules",
        "eval" => "Held-out accuracy on identity-rule prompts",
        "cma" => "Causal mediation scans over heads, layers x positions or MLPs",
        "attn" => "Aggregated attention maps and prediction scores",
        "rsa" => "Representational similarity against hypothesis matrices",
        "ablate" => "Cumulative ranked, control and random head ablation",
        "prefix-match" => "Prefix-matching scores of every head",
        "fv" => "Function-vector average indirect effects",
        "probe" => "Linear probe for abstract variables",
        "correlate" => "Permutation-tested correlation of two head score CSVs",
        "pipeline" => "Every analysis on one model, with an HTML index",
        "report" => "Bundle heatmaps and an index over a results directory",
        _ => "",
    }
}

fn common(cmd: Command) -> Command {
    cmd.arg(Arg::new("out").long("out").value_name("DIR").default_value("runs").help("directory that receives the run directory"))
        .arg(Arg::new("sequential").long("sequential").action(ArgAction::SetTrue).help("run without the thread pool"))
}

fn analysis_command(analysis: &'static str) -> Command {
    let mut cmd = Command::new(analysis)
        .about(about(analysis))
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file"))
        .arg(Arg::new("print-config").long("print-config").action(ArgAction::SetTrue).help("print the effective config and exit"));
    for spec in SCHEMA.iter().filter(|s| s.key != "analysis") {
        let mut arg = Arg::new(spec.key).long(flag_name(spec.key)).help(spec.doc);
        arg = match spec.kind {
            KeyKind::Bool => arg.value_name("BOOL").num_args(0..=1).default_missing_value("true"),
            KeyKind::OneOf(options) => arg.value_parser(options.to_vec()),
            KeyKind::Path => arg.value_name("PATH"),
            _ => arg.value_name("VALUE"),
        };
        cmd = cmd.arg(arg);
    }
    common(cmd)
}

fn cli() -> Command {
    let mut cmd = Command::new("symlab")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Mechanistic-interpretability lab for symbolic in-context rules")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_long_help(format!("Config keys:\n{}", schema_text()));
    for &a in ANALYSES {
        cmd = cmd.subcommand(analysis_command(a));
    }
    cmd.subcommand(common(
        Command::new("replay")
            .about("Re-run a manifest and compare output hashes")
            .arg(Arg::new("manifest").required(true).value_name("MANIFEST").help("manifest.json of the run to replay")),
    ))
}

fn exec(m: &ArgMatches) -> Exec {
    if m.get_flag("sequential") {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn build_config(analysis: &str, m: &ArgMatches) -> anyhow::Result<Config> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {path}"))?;
            let names_analysis = text.lines().any(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == "analysis"));
            if names_analysis {
                Config::parse(&text)?
            } else {
                Config::parse(&format!("analysis = {analysis}\n{text}"))?
            }
        }
        None => Config::new(analysis)?,
    };
    if cfg.analysis()? != analysis {
        bail!("config file is for `{}`, not `{analysis}`", cfg.analysis()?);
    }
    for spec in SCHEMA.iter().filter(|s| s.key != "analysis") {
        if let Some(v) = m.get_one::<String>(spec.key) {
            cfg.set(spec.key, v).with_context(|| format!("--{}", flag_name(spec.key)))?;
        }
    }
    cfg.apply_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(matches: &ArgMatches) -> anyhow::Result<()> {
    let (sub, m) = matches.subcommand().context("missing subcommand")?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    if sub == "replay" {
        let manifest = PathBuf::from(m.get_one::<String>("manifest").expect("required"));
        let r = report::replay(&manifest, &out, exec(m))?;
        println!("{}", r.replay.dir.display());
        if !r.mismatches.is_empty() {
            for mm in &r.mismatches {
                eprintln!("mismatch: {mm}");
            }
            bail!("replay differs from the original run in {} file(s)", r.mismatches.len());
        }
        println!("all {} outputs reproduced byte for byte", r.original.outputs.len());
        return Ok(());
    }
    let cfg = build_config(sub, m)?;
    if m.get_flag("print-config") {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let outcome = report::run(&cfg, &out, exec(m))?;
    println!("{}", outcome.dir.display());
    for (k, v) in &outcome.manifest.summary {
        println!("  {k} = {v}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "analysis = cma\npairs = 50\nperms = 100\n").unwrap();
        let m = cli().try_get_matches_from(["symlab", "cma", "--config", path.to_str().unwrap(), "--pairs", "20", "--target", "retrieval"]).unwrap();
        let (sub, m) = m.subcommand().unwrap();
        let cfg = build_config(sub, m).unwrap();
        assert_eq!(cfg.uint("pairs").unwrap(), 20);
        assert_eq!(cfg.uint("perms").unwrap(), 100);
        assert_eq!(cfg.text("target").unwrap(), "retrieval");
    }

    #[test]
    fn bad_flags_are_rejected() {
        assert!(cli().try_get_matches_from(["symlab", "cma", "--bogus", "1"]).is_err());
        assert!(cli().try_get_matches_from(["symlab", "cma", "--target", "nowhere"]).is_err());
        let m = cli().try_get_matches_from(["symlab", "eval", "--n", "many"]).unwrap();
        let (sub, m) = m.subcommand().unwrap();
        assert!(build_config(sub, m).is_err());
    }

    #[test]
    fn bool_flags_take_an_optional_value() {
        for (args, want) in [(vec!["symlab", "train", "--full-lm"], true), (vec!["symlab", "train", "--full-lm", "false"], false)] {
            let m = cli().try_get_matches_from(args).unwrap();
            let (sub, m) = m.subcommand().unwrap();
            assert_eq!(build_config(sub, m).unwrap().flag("full_lm").unwrap(), want);
        }
    }

    #[test]
    fn mismatched_config_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "analysis = eval\n").unwrap();
        let m = cli().try_get_matches_from(["symlab", "cma", "--config", path.to_str().unwrap()]).unwrap();
        let (sub, m) = m.subcommand().unwrap();
        assert!(build_config(sub, m).is_err());
    }
}
