//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment line, keys are case-sensitive
//! and may appear once. Every key must be listed in [`SCHEMA`], which also
//! holds its type and default.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the `seed` key.
pub const SEED_ENV: &str = "SYMLAB_SEED";

pub const ANALYSES: &[&str] = &[
    "oracle-build",
    "train",
    "eval",
    "cma",
    "attn",
    "rsa",
    "ablate",
    "prefix-match",
    "fv",
    "probe",
    "correlate",
    "pipeline",
    "report",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Uint,
    Float,
    Bool,
    Text,
    /// A filesystem path, stored absolute in manifests.
    Path,
    OneOf(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: KeyKind,
    pub default: Option<&'static str>,
    pub doc: &'static str,
}

const fn key(key: &'static str, kind: KeyKind, default: Option<&'static str>, doc: &'static str) -> KeySpec {
    KeySpec { key, kind, default, doc }
}

use KeyKind::*;

pub const SCHEMA: &[KeySpec] = &[
    key("analysis", OneOf(ANALYSES), None, "analysis to run"),
    key("name", Text, None, "run name used in the output directory; defaults to the analysis"),
    key("seed", Uint, Some("0"), "master seed; overridden by SYMLAB_SEED"),
    key("model", OneOf(&["auto", "oracle", "literal", "checkpoint"]), Some("auto"), "model source; auto means checkpoint if one is given, else oracle"),
    key("checkpoint", Path, None, "model checkpoint file"),
    key("alphabet", Uint, Some("64"), "content tokens of built or trained models"),
    key("task", OneOf(&["identity"]), Some("identity"), "prompt family of eval and the mediation analyses"),
    key("shots", Uint, Some("2"), "in-context examples per prompt"),
    key("n", Uint, None, "prompts (eval: total, default 2000; attn: per rule, 100; ablate and fv: per rule, 50)"),
    key("rules", Text, Some("aba,abb"), "comma-separated identity rules for eval"),
    key("target", OneOf(&["all", "abstraction", "induction", "retrieval", "layer-position", "mlp"]), Some("all"), "cma target; ablate ranking target"),
    key("condition", OneOf(&["abstract", "token"]), Some("abstract"), "pair condition of layer-position and mlp scans"),
    key("pairs", Uint, Some("200"), "cma pairs per direction"),
    key("perms", Uint, Some("5000"), "permutations for significance tests"),
    key("alpha", Float, Some("0.05"), "family-wise error rate"),
    key("head_type", OneOf(&["all", "abstraction", "induction", "retrieval"]), Some("all"), "head type of attn, rsa and probe"),
    key("rule", OneOf(&["both", "aba", "abb"]), Some("both"), "rule of attention maps"),
    key("heads", Text, None, "explicit heads as layer:head[:weight], comma-separated"),
    key("component", OneOf(&["output", "query", "key", "value"]), Some("output"), "head component compared by rsa"),
    key("sets", Uint, Some("10"), "token sets of the rsa design"),
    key("ranking", Path, None, "head score CSV ranking heads for ablation; computed by cma when absent"),
    key("max_h", Uint, None, "largest number of ablated heads; defaults to all"),
    key("random_runs", Uint, Some("10"), "runs of the random ablation condition"),
    key("ablation", OneOf(&["zero", "mean"]), Some("zero"), "ablation replacement"),
    key("position_mode", OneOf(&["both", "final", "third-item"]), Some("both"), "function-vector patch positions"),
    key("a", Path, None, "first head score CSV of correlate"),
    key("b", Path, None, "second head score CSV of correlate"),
    key("results", Path, Some("runs"), "directory of runs bundled by report"),
    key("steps", Uint, Some("20000"), "training steps"),
    key("batch_size", Uint, Some("32"), "training batch size"),
    key("lr", Float, Some("0.001"), "peak learning rate"),
    key("warmup", Uint, Some("200"), "linear warmup steps"),
    key("weight_decay", Float, Some("0.01"), "decoupled weight decay on matrices"),
    key("full_lm", Bool, Some("false"), "next-token loss at every position"),
    key("target_accuracy", Float, Some("0.95"), "held-out accuracy that stops training"),
    key("eval_every", Uint, Some("250"), "steps between held-out evaluations"),
    key("eval_prompts", Uint, Some("400"), "prompts per held-out evaluation"),
    key("pos_encoding", OneOf(&["rotary", "learned"]), Some("rotary"), "position encoding of trained models"),
    key("init_std", Float, Some("0.02"), "standard deviation of initial weight matrices"),
    key("svg", Bool, Some("true"), "emit SVG heatmaps"),
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|k| k.key == key)
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("`{}` must be {what}, got {value:?}", spec.key));
    match spec.kind {
        Uint => value.parse::<u64>().map(|_| ()).map_err(|_| bad("a non-negative integer")),
        Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(bad("true or false")),
        },
        Text | Path if value.is_empty() => Err(bad("non-empty")),
        Text | Path => Ok(()),
        OneOf(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                Err(bad(&format!("one of {}", options.join("|"))))
            }
        }
    }
}

/// A validated run configuration. Absent keys read as their schema default.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new(analysis: &str) -> Result<Self> {
        let mut c = Self::default();
        c.set("analysis", analysis)?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if c.entries.contains_key(k) {
                return Err(Error::Config(format!("config line {}: duplicate key `{k}`", i + 1)));
            }
            c.set(k, v.trim()).map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Rebuilds a config from manifest entries.
    pub fn from_entries(entries: BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in entries {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        if value.contains('\n') {
            return Err(Error::Config(format!("`{key}` must fit on one line")));
        }
        check_value(spec, value)?;
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.entries.contains_key("analysis") {
            return Err(Error::Config("missing required key `analysis`".into()));
        }
        Ok(())
    }

    /// Applies `value` as the seed when present, e.g. from [`SEED_ENV`].
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        match value {
            Some(v) => self.set("seed", v.trim()).map_err(|_| Error::Config(format!("{SEED_ENV} must be a non-negative integer, got {v:?}"))),
            None => Ok(()),
        }
    }

    pub fn apply_env_seed(&mut self) -> Result<()> {
        self.override_seed(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// The value of `key`, falling back to its default.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str).or_else(|| key_spec(key).and_then(|k| k.default))
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        self.required(key)
    }

    pub fn uint(&self, key: &str) -> Result<usize> {
        self.required(key)?.parse().map_err(|_| Error::Config(format!("`{key}` is not an integer")))
    }

    pub fn uint_or(&self, key: &str, default: usize) -> Result<usize> {
        if self.get(key).is_some() {
            self.uint(key)
        } else {
            Ok(default)
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.required("seed")?.parse().map_err(|_| Error::Config("`seed` is not an integer".into()))
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        self.required(key)?.parse().map_err(|_| Error::Config(format!("`{key}` is not a number")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        Ok(self.required(key)? == "true")
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn analysis(&self) -> Result<&str> {
        self.required("analysis")
    }

    pub fn name(&self) -> Result<&str> {
        match self.get("name") {
            Some(n) => Ok(n),
            None => self.analysis(),
        }
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Copy with every path-valued key made absolute against the working
    /// directory, so a manifest can be replayed from anywhere.
    pub fn absolutized(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.analysis()? == "report" && !c.contains("results") {
            let default = c.text("results")?.to_string();
            c.set("results", &default)?;
        }
        for (k, v) in c.entries.iter_mut() {
            if key_spec(k).map(|s| s.kind) == Some(Path) {
                *v = std::path::absolute(&*v)?.to_string_lossy().into_owned();
            }
        }
        Ok(c)
    }
}

/// `key = value` documentation of every key, for `--help` output.
pub fn schema_text() -> String {
    SCHEMA
        .iter()
        .map(|k| {
            let kind = match k.kind {
                Uint => "uint".to_string(),
                Float => "float".to_string(),
                Bool => "bool".to_string(),
                Text => "text".to_string(),
                Path => "path".to_string(),
                OneOf(o) => o.join("|"),
            };
            let default = k.default.map(|d| format!(" [default {d}]")).unwrap_or_default();
            format!("{:<16} {kind}{default}\n{:<16} {}\n", k.key, "", k.doc)
        })
        .collect()
}
