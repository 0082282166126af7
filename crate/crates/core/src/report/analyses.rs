//! The work behind each `analysis` value.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::manifest::{RunManifest, MANIFEST_FILE};
use super::svg::Heatmap;
use super::{Config, Ctx};
use crate::causal_aux::{
    cumulative_ablation, function_vector_aie, prefix_matching_score, score_correlation, AblationCondition, AblationConfig, AblationMode,
    PositionMode, RulePrompt,
};
use crate::checkpoint;
use crate::cma::{filter_correct, identity_pairs, permutation_test, scan_heads, scan_layer_position, write_head_csv, HeadScoreMatrix, ScanMetadata, SiteKind};
use crate::error::{Error, Result};
use crate::exec::try_map_indexed;
use crate::model::{Model, ModelConfig, PosEncoding};
use crate::oracle::{build_literal_induction_oracle, build_oracle, LiteralSpec, OracleSpec, ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD};
use crate::repr::{
    aggregate_attention, attention_prediction_score, build_hypothesis_matrix, empirical_similarity, four_context_design, linear_probe,
    probe_samples, rsa_correlation, sample_design_sets, shuffle_labels, template_label, HeadComponent, SimilarityKind, WeightedHead,
};
use crate::stats::wilson_ci;
use crate::tasks::{HeadType, IdentityTask, Rule, Vocab, N_RESERVED};
use crate::train::{heldout_items, is_correct, train, write_metrics, AccuracyReport, Scoring, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Oracle,
    Literal,
    Checkpoint,
}

/// A model with the vocabulary its prompts are drawn from.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Model,
    pub vocab: Vocab,
    pub kind: ModelKind,
    pub sha256: String,
}

/// Builds or loads the model named by `model`/`checkpoint`. Checkpointed
/// models use the synthetic vocabulary matching their `vocab_size`.
pub fn load_model(cfg: &Config) -> Result<LoadedModel> {
    let alphabet = cfg.uint("alphabet")?;
    let kind = match cfg.text("model")? {
        "oracle" => ModelKind::Oracle,
        "literal" => ModelKind::Literal,
        "checkpoint" => ModelKind::Checkpoint,
        _ if cfg.contains("checkpoint") => ModelKind::Checkpoint,
        _ => ModelKind::Oracle,
    };
    let (model, vocab) = match kind {
        ModelKind::Oracle => {
            let o = build_oracle(&OracleSpec { alphabet_size: alphabet, ..OracleSpec::default() })?;
            (o.model, o.vocab)
        }
        ModelKind::Literal => build_literal_induction_oracle(&LiteralSpec { alphabet_size: alphabet, ..LiteralSpec::default() })?,
        ModelKind::Checkpoint => {
            let path = cfg.path("checkpoint").ok_or_else(|| Error::Config("model = checkpoint needs `checkpoint = <file>`".into()))?;
            let model = checkpoint::load(&path)?;
            let n = model.config().vocab_size.saturating_sub(N_RESERVED);
            if n == 0 {
                return Err(Error::Checkpoint("checkpoint vocabulary has no content tokens".into()));
            }
            (model, Vocab::synthetic(n)?)
        }
    };
    let sha256 = checkpoint::hash(&model)?;
    Ok(LoadedModel { model, vocab, kind, sha256 })
}

/// Reads a `layer,head0,…` CSV into row-major values.
pub fn read_head_csv(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bad = |m: String| Error::Parse(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("layer") || header.len() < 2 || header.iter().skip(1).enumerate().any(|(h, c)| c != format!("head{h}")) {
        return Err(bad("not a layer × head score matrix".into()));
    }
    let n_heads = header.len() - 1;
    let mut values = Vec::new();
    let mut n_layers = 0;
    for rec in r.records() {
        let rec = rec?;
        for v in rec.iter().skip(1) {
            values.push(v.parse::<f64>().map_err(|_| bad(format!("bad value {v:?}")))?);
        }
        n_layers += 1;
    }
    if n_layers == 0 {
        return Err(bad("no rows".into()));
    }
    Ok((values, n_layers, n_heads))
}

fn head_type(name: &str) -> Result<HeadType> {
    HeadType::ALL.into_iter().find(|t| t.name() == name).ok_or_else(|| Error::Config(format!("unknown head type `{name}`")))
}

fn head_types(cfg: &Config, key: &str) -> Result<Vec<HeadType>> {
    match cfg.text(key)? {
        "all" => Ok(HeadType::ALL.to_vec()),
        t => Ok(vec![head_type(t)?]),
    }
}

fn wired_head(t: HeadType) -> (usize, usize) {
    match t {
        HeadType::Abstraction => ABSTRACTION_HEAD,
        HeadType::SymbolicInduction => INDUCTION_HEAD,
        HeadType::Retrieval => RETRIEVAL_HEAD,
    }
}

/// Parses `layer:head[:weight]` entries separated by commas.
pub fn parse_heads(text: &str) -> Result<Vec<WeightedHead>> {
    text.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("bad head `{item}`")));
            match parts.as_slice() {
                [l, h] => Ok(((num(l)?, num(h)?), 1.0)),
                [l, h, w] => Ok(((num(l)?, num(h)?), w.parse().map_err(|_| Error::Config(format!("bad weight in `{item}`")))?)),
                _ => Err(Error::Config(format!("bad head `{item}`, expected layer:head[:weight]"))),
            }
        })
        .collect()
}

/// Significant heads weighted by their positive score; the top-scoring
/// head alone when none is significant.
pub fn weighted_from_scores(m: &HeadScoreMatrix) -> Vec<WeightedHead> {
    let picked: Vec<WeightedHead> = m
        .significant_heads()
        .into_iter()
        .filter(|&(l, h)| m.get(l, h) > 0.0)
        .map(|(l, h)| ((l, h), m.get(l, h)))
        .collect();
    if picked.is_empty() {
        let i = crate::train::argmax(&m.scores);
        vec![((i / m.n_heads, i % m.n_heads), 1.0)]
    } else {
        picked
    }
}

pub(super) fn dispatch(ctx: &mut Ctx, cfg: &Config) -> Result<()> {
    match cfg.analysis()? {
        "oracle-build" => oracle_build(ctx, cfg),
        "train" => train_run(ctx, cfg),
        "correlate" => correlate(ctx, cfg),
        "report" => bundle(ctx, cfg),
        analysis => {
            let lm = load_model(cfg)?;
            ctx.checkpoint_sha256 = Some(lm.sha256.clone());
            let mut s = Session { ctx, cfg, lm: &lm, scans: Vec::new() };
            match analysis {
                "eval" => s.eval(),
                "cma" => s.cma(),
                "attn" => {
                    for t in head_types(cfg, "head_type")? {
                        for rule in s.rules_for_attn()? {
                            s.attn(t, rule)?;
                        }
                    }
                    Ok(())
                }
                "rsa" => {
                    let comp = component(cfg.text("component")?)?;
                    for t in head_types(cfg, "head_type")? {
                        s.rsa(t, comp)?;
                    }
                    Ok(())
                }
                "ablate" => {
                    let t = match cfg.text("target")? {
                        "all" | "layer-position" | "mlp" => HeadType::ALL.to_vec(),
                        t => vec![head_type(t)?],
                    };
                    for t in t {
                        s.ablate(t)?;
                    }
                    Ok(())
                }
                "prefix-match" => s.prefix().map(|_| ()),
                "fv" => {
                    let modes = match cfg.text("position_mode")? {
                        "final" => vec![PositionMode::FinalPosition],
                        "third-item" => vec![PositionMode::ThirdItem],
                        _ => vec![PositionMode::FinalPosition, PositionMode::ThirdItem],
                    };
                    for m in modes {
                        s.fv(m)?;
                    }
                    Ok(())
                }
                "probe" => s.probe(),
                "pipeline" => s.pipeline(),
                other => Err(Error::Config(format!("unknown analysis `{other}`"))),
            }
        }
    }
}

fn component(name: &str) -> Result<HeadComponent> {
    Ok(match name {
        "query" => HeadComponent::Query,
        "key" => HeadComponent::Key,
        "value" => HeadComponent::Value,
        "output" => HeadComponent::Output,
        other => return Err(Error::Config(format!("unknown component `{other}`"))),
    })
}

fn oracle_build(ctx: &mut Ctx, cfg: &Config) -> Result<()> {
    let lm = match cfg.text("model")? {
        "checkpoint" => return Err(Error::Config("oracle-build builds `oracle` or `literal` models".into())),
        "literal" => load_model(cfg)?,
        _ => {
            let mut c = cfg.clone();
            c.set("model", "oracle")?;
            load_model(&c)?
        }
    };
    let file = if lm.kind == ModelKind::Literal { "literal.ckpt" } else { "oracle.ckpt" };
    ctx.file(file, &checkpoint::to_bytes(&lm.model)?)?;
    ctx.checkpoint_sha256 = Some(lm.sha256.clone());
    ctx.note("checkpoint", file)?;
    ctx.note("parameters", lm.model.param_count())?;
    ctx.note("vocab_size", lm.model.config().vocab_size)
}

fn train_run(ctx: &mut Ctx, cfg: &Config) -> Result<()> {
    let seed = cfg.seed()?;
    let vocab = Vocab::synthetic(cfg.uint("alphabet")?)?;
    let pos_encoding = if cfg.text("pos_encoding")? == "learned" { PosEncoding::LearnedAbsolute } else { PosEncoding::Rotary };
    let model = Model::init_with_std(ModelConfig { pos_encoding, ..ModelConfig::toy(vocab.len(), seed) }, cfg.float("init_std")?)?;
    let tc = TrainConfig {
        steps: cfg.uint("steps")?,
        batch_size: cfg.uint("batch_size")?,
        learning_rate: cfg.float("lr")?,
        warmup: cfg.uint("warmup")?,
        weight_decay: cfg.float("weight_decay")?,
        full_lm: cfg.flag("full_lm")?,
        target_accuracy: cfg.float("target_accuracy")?,
        eval_every: cfg.uint("eval_every")?,
        eval_prompts: cfg.uint("eval_prompts")?,
        n_shots: cfg.uint("shots")?,
        seed,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let out = train(model, &vocab, &tc, ctx.exec)?;
    ctx.file("model.ckpt", &checkpoint::to_bytes(&out.model)?)?;
    ctx.checkpoint_sha256 = Some(checkpoint::hash(&out.model)?);
    ctx.csv("metrics.csv", |w| write_metrics(&out.log, w))?;
    ctx.json("train.json", &json!({ "config": tc, "final_eval": out.final_eval, "steps_run": out.steps_run, "stopped_early": out.stopped_early }))?;
    ctx.note("train.accuracy", out.final_eval.accuracy)?;
    ctx.note("train.steps_run", out.steps_run)?;
    ctx.note("train.stopped_early", out.stopped_early)
}

fn correlate(ctx: &mut Ctx, cfg: &Config) -> Result<()> {
    let need = |k: &str| cfg.path(k).ok_or_else(|| Error::Config(format!("correlate needs `{k} = <scores.csv>`")));
    let (a, la, ha) = read_head_csv(&need("a")?)?;
    let (b, lb, hb) = read_head_csv(&need("b")?)?;
    if (la, ha) != (lb, hb) {
        return Err(Error::Dimension(format!("{la}×{ha} and {lb}×{hb} score matrices")));
    }
    let stat = score_correlation("a_vs_b", &a, &b, cfg.uint("perms")?, cfg.seed()?, ctx.exec)?;
    ctx.json("correlation.json", &stat)?;
    ctx.note("correlation.r", stat.r)?;
    ctx.note("correlation.p_value", stat.p_value)
}

struct Session<'a> {
    ctx: &'a mut Ctx,
    cfg: &'a Config,
    lm: &'a LoadedModel,
    scans: Vec<(HeadType, HeadScoreMatrix)>,
}

impl Session<'_> {
    fn task(&self) -> Result<IdentityTask<'_>> {
        IdentityTask::new(&self.lm.vocab, self.cfg.uint("shots")?)
    }

    fn dims(&self) -> (usize, usize) {
        (self.lm.model.config().n_layers, self.lm.model.config().n_heads)
    }

    fn rules_for_attn(&self) -> Result<Vec<Rule>> {
        Ok(match self.cfg.text("rule")? {
            "aba" => vec![Rule::Aba],
            "abb" => vec![Rule::Abb],
            _ => vec![Rule::Aba, Rule::Abb],
        })
    }

    /// A seeded stream private to one analysis.
    fn rng(&self, stream: u64) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed()?);
        rng.set_stream(stream);
        Ok(rng)
    }

    fn eval(&mut self) -> Result<()> {
        let n = self.cfg.uint_or("n", 2000)?;
        let rules: Vec<Rule> = self.cfg.text("rules")?.split(',').map(|r| Rule::parse(r.trim())).collect::<Result<_>>()?;
        if rules.iter().any(|r| r.pattern().is_none()) {
            return Err(Error::Config("eval supports identity rules only".into()));
        }
        let items = heldout_items(&self.lm.vocab, &rules, self.cfg.uint("shots")?, n, self.cfg.seed()?)?;
        let model = &self.lm.model;
        let hits = try_map_indexed(self.ctx.exec, items.len(), |i| is_correct(model, &items[i], Scoring::Argmax))?;
        let report = |pick: &dyn Fn(usize) -> bool| {
            let idx: Vec<usize> = (0..hits.len()).filter(|&i| pick(i)).collect();
            let correct = idx.iter().filter(|&&i| hits[i]).count();
            let (ci_low, ci_high) = wilson_ci(correct, idx.len());
            AccuracyReport { correct, n: idx.len(), accuracy: correct as f64 / idx.len().max(1) as f64, ci_low, ci_high }
        };
        let mut rows = Vec::new();
        for (k, r) in rules.iter().enumerate() {
            rows.push((r.name().to_string(), report(&|i| i % rules.len() == k)));
        }
        let all = report(&|_| true);
        rows.push(("all".to_string(), all));
        self.ctx.csv("eval.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["rule", "correct", "n", "accuracy", "ci_low", "ci_high"])?;
            for (name, r) in &rows {
                c.write_record([name.clone(), r.correct.to_string(), r.n.to_string(), r.accuracy.to_string(), r.ci_low.to_string(), r.ci_high.to_string()])?;
            }
            c.flush()?;
            Ok(())
        })?;
        self.ctx.note("eval.accuracy", all.accuracy)?;
        self.ctx.note("eval.ci", [all.ci_low, all.ci_high])?;
        self.ctx.note("eval.n", all.n)
    }

    fn cma(&mut self) -> Result<()> {
        match self.cfg.text("target")? {
            "layer-position" => self.layer_position(SiteKind::BlockOutput),
            "mlp" => self.layer_position(SiteKind::MlpOutput),
            "all" => {
                for t in HeadType::ALL {
                    self.scan(t)?;
                }
                Ok(())
            }
            t => self.scan(head_type(t)?).map(|_| ()),
        }
    }

    /// Head-level mediation scan with its permutation test; cached per type.
    fn scan(&mut self, t: HeadType) -> Result<HeadScoreMatrix> {
        if let Some((_, m)) = self.scans.iter().find(|(k, _)| *k == t) {
            return Ok(m.clone());
        }
        let (exec, seed) = (self.ctx.exec, self.cfg.seed()?);
        let pairs = identity_pairs(&self.task()?, t, self.cfg.uint("pairs")?, seed)?;
        let drawn = pairs.len();
        let pairs = filter_correct(&self.lm.model, pairs, exec)?;
        if pairs.is_empty() {
            return Err(Error::Empty(format!("{} pairs the model answers correctly; mediation analysis needs a model that solves the task", t.name())));
        }
        let (mut m, records) = scan_heads(&self.lm.model, &pairs, exec)?;
        let perm = permutation_test(&records, self.cfg.uint("perms")?, self.cfg.float("alpha")?, seed, exec)?;
        m.apply(&perm)?;
        let (nl, nh) = self.dims();
        let name = t.name();
        self.ctx.csv(&format!("cma_{name}_scores.csv"), |w| m.write_csv(w))?;
        let mask: Vec<f64> = perm.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        self.ctx.csv(&format!("cma_{name}_mask.csv"), |w| write_head_csv(&mask, nl, nh, w))?;
        self.ctx.json(
            &format!("cma_{name}.json"),
            &json!({
                "metadata": ScanMetadata::new(&m, Some(&perm), seed),
                "null_max": perm.null_max,
                "significant": m.significant_heads(),
                "pairs_drawn": drawn,
                "pairs_kept": pairs.len(),
            }),
        )?;
        self.ctx.heatmap(&format!("cma_{name}.svg"), &Heatmap::heads(&format!("CMA {name}"), &m.scores, nl, nh, None))?;
        self.ctx.heatmap(
            &format!("cma_{name}_significant.svg"),
            &Heatmap::heads(&format!("CMA {name}, significant heads"), &m.scores, nl, nh, Some(&perm.mask)),
        )?;
        self.ctx.note(format!("cma.{name}.significant"), m.significant_heads())?;
        self.ctx.note(format!("cma.{name}.epsilon"), perm.threshold_epsilon)?;
        self.ctx.note(format!("cma.{name}.pairs_kept"), pairs.len())?;
        self.scans.push((t, m.clone()));
        Ok(m)
    }

    fn layer_position(&mut self, kind: SiteKind) -> Result<()> {
        let cond = self.cfg.text("condition")?.to_string();
        let target = if cond == "token" { HeadType::Retrieval } else { HeadType::Abstraction };
        let exec = self.ctx.exec;
        let pairs = identity_pairs(&self.task()?, target, self.cfg.uint("pairs")?, self.cfg.seed()?)?;
        let pairs = filter_correct(&self.lm.model, pairs, exec)?;
        if pairs.is_empty() {
            return Err(Error::Empty("pairs the model answers correctly".into()));
        }
        let map = scan_layer_position(&self.lm.model, &pairs, kind, exec)?;
        let prefix = if kind == SiteKind::BlockOutput { "layer_position" } else { "mlp" };
        let name = format!("{prefix}_{cond}");
        self.ctx.csv(&format!("{name}.csv"), |w| map.write_csv(w))?;
        let c1 = &pairs[0].c1;
        let hm = Heatmap {
            title: format!("{prefix} scan, {cond} condition"),
            rows: map.n_layers,
            cols: map.positions.len(),
            values: map.scores.clone(),
            row_labels: (0..map.n_layers).map(|l| format!("L{l}")).collect(),
            col_labels: map.positions.iter().map(|&p| format!("{p}:{}", template_label(&c1.annotations[p], c1.tokens[p]))).collect(),
            mask: None,
        };
        self.ctx.heatmap(&format!("{name}.svg"), &hm)?;
        let best = crate::train::argmax(&map.scores.iter().map(|s| s.abs()).collect::<Vec<_>>());
        self.ctx.note(format!("{name}.max_abs_site"), json!({ "layer": best / map.positions.len(), "position": map.positions[best % map.positions.len()], "score": map.scores[best] }))
    }

    /// Heads analysed as `t`: explicit `heads`, the wired oracle head, or
    /// the significant heads of a mediation scan.
    fn heads(&mut self, t: HeadType) -> Result<Vec<WeightedHead>> {
        if let Some(spec) = self.cfg.get("heads") {
            return parse_heads(spec);
        }
        match self.lm.kind {
            ModelKind::Oracle => Ok(vec![(wired_head(t), 1.0)]),
            ModelKind::Literal => Err(Error::Config("the literal-induction oracle has no symbolic heads; pass `heads`".into())),
            ModelKind::Checkpoint => Ok(weighted_from_scores(&self.scan(t)?)),
        }
    }

    fn attn(&mut self, t: HeadType, rule: Rule) -> Result<()> {
        let heads = self.heads(t)?;
        let n = self.cfg.uint_or("n", 100)?;
        let mut rng = self.rng(1 + (rule == Rule::Abb) as u64)?;
        let task = self.task()?;
        let prompts = (0..n).map(|_| Ok(task.prompt(&mut rng, rule)?.0)).collect::<Result<Vec<_>>>()?;
        let map = aggregate_attention(&self.lm.model, rule, &prompts, &heads, self.ctx.exec)?;
        let score = attention_prediction_score(&map, t)?;
        let name = format!("attn_{}_{}", t.name(), rule.name().to_lowercase());
        self.ctx.csv(&format!("{name}.csv"), |w| map.write_csv(w))?;
        self.ctx.heatmap(&format!("{name}.svg"), &Heatmap::square(&format!("{} attention, {}", t.name(), rule.name()), &map.values, &map.labels))?;
        self.ctx.note(format!("{name}.heads"), heads)?;
        self.ctx.note(format!("{name}.prediction_score"), score)
    }

    fn rsa(&mut self, t: HeadType, comp: HeadComponent) -> Result<()> {
        let heads = self.heads(t)?;
        let mut rng = self.rng(3)?;
        let sets = sample_design_sets(&mut rng, &self.lm.vocab, self.cfg.uint("sets")?, self.cfg.uint("shots")?)?;
        let design = four_context_design(&sets, &self.lm.vocab, t, comp)?;
        let emp = empirical_similarity(&self.lm.model, &design, &heads, comp, self.ctx.exec)?;
        let cname = format!("{comp:?}").to_lowercase();
        let name = format!("rsa_{}_{cname}", t.name());
        self.ctx.csv(&format!("{name}_empirical.csv"), |w| emp.write_csv(w))?;
        let labels: Vec<String> = emp.labels.iter().map(|l| l.name()).collect();
        self.ctx.heatmap(&format!("{name}_empirical.svg"), &Heatmap::square(&format!("{} {cname} similarity", t.name()), &emp.values, &labels))?;
        for (kind, hname) in [(SimilarityKind::HypothesisAbstract, "abstract"), (SimilarityKind::HypothesisToken, "token")] {
            let hyp = build_hypothesis_matrix(kind, &emp.labels)?;
            self.ctx.csv(&format!("{name}_{hname}.csv"), |w| hyp.write_csv(w))?;
            let r = match rsa_correlation(&emp, &hyp) {
                Ok(r) => Some(r),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            self.ctx.note(format!("{name}.r_{hname}"), r)?;
        }
        Ok(())
    }

    /// Prompts of both rules, none equal to a prompt of the mediation pairs.
    fn fresh_prompts(&self, n_per_rule: usize, stream: u64) -> Result<Vec<RulePrompt>> {
        let task = self.task()?;
        let mut used: HashSet<Vec<usize>> = HashSet::new();
        for t in HeadType::ALL {
            for p in identity_pairs(&task, t, self.cfg.uint("pairs")?, self.cfg.seed()?)? {
                used.insert(p.c1.tokens);
                used.insert(p.c2.tokens);
            }
        }
        let mut rng = self.rng(stream)?;
        let mut out = Vec::with_capacity(2 * n_per_rule);
        let mut attempts = 0;
        while out.len() < 2 * n_per_rule {
            let rule = if out.len() % 2 == 0 { Rule::Aba } else { Rule::Abb };
            let (prompt, a) = task.prompt(&mut rng, rule)?;
            attempts += 1;
            if attempts > 100 * (n_per_rule + 1) {
                return Err(Error::VocabExhausted { need: n_per_rule, have: out.len() / 2 });
            }
            if !used.contains(&prompt.tokens) {
                out.push(RulePrompt { rule, prompt, answer: a.tokens[0] });
            }
        }
        Ok(out)
    }

    fn ablate(&mut self, t: HeadType) -> Result<()> {
        let (nl, nh) = self.dims();
        let scores = match self.cfg.path("ranking") {
            Some(path) => {
                let (v, l, h) = read_head_csv(&path)?;
                if (l, h) != (nl, nh) {
                    return Err(Error::Dimension(format!("ranking is {l}×{h}, model {nl}×{nh}")));
                }
                v
            }
            None => self.scan(t)?.scores,
        };
        let prompts = self.fresh_prompts(self.cfg.uint_or("n", 50)?, 4)?;
        let mode = if self.cfg.text("ablation")? == "mean" { AblationMode::Mean } else { AblationMode::Zero };
        let max_h = self.cfg.uint_or("max_h", nl * nh)?;
        for (condition, cname) in [(AblationCondition::Ranked, "ranked"), (AblationCondition::Control, "control"), (AblationCondition::Random, "random")] {
            let ac = AblationConfig { condition, mode, max_h, random_runs: self.cfg.uint("random_runs")?, seed: self.cfg.seed()? };
            let r = cumulative_ablation(&self.lm.model, &prompts, &scores, &ac, self.ctx.exec)?;
            let name = format!("ablation_{}_{cname}", t.name());
            self.ctx.csv(&format!("{name}.csv"), |w| r.write_csv(w))?;
            self.ctx.note(format!("{name}.curve"), &r.curve)?;
        }
        Ok(())
    }

    fn prefix(&mut self) -> Result<Vec<f64>> {
        let seed = self.cfg.seed()?;
        let seeds: Vec<u64> = (0..4).map(|k| seed.wrapping_add(k)).collect();
        self.ctx.seeds.extend(&seeds);
        let s = prefix_matching_score(&self.lm.model, &self.lm.vocab, &seeds, self.ctx.exec)?;
        let (nl, nh) = self.dims();
        self.ctx.csv("prefix_match.csv", |w| write_head_csv(&s, nl, nh, w))?;
        self.ctx.heatmap("prefix_match.svg", &Heatmap::heads("prefix matching", &s, nl, nh, None))?;
        let best = crate::train::argmax(&s);
        self.ctx.note("prefix_match.max_head", [best / nh, best % nh])?;
        self.ctx.note("prefix_match.max", s[best])?;
        Ok(s)
    }

    fn fv(&mut self, mode: PositionMode) -> Result<Vec<f64>> {
        let prompts = self.fresh_prompts(self.cfg.uint_or("n", 50)?, 5)?;
        let r = function_vector_aie(&self.lm.model, &prompts, mode, self.cfg.seed()?, self.ctx.exec)?;
        let name = if mode == PositionMode::FinalPosition { "fv_final" } else { "fv_third_item" };
        self.ctx.csv(&format!("{name}.csv"), |w| write_head_csv(&r.aie, r.n_layers, r.n_heads, w))?;
        self.ctx.heatmap(&format!("{name}.svg"), &Heatmap::heads(&format!("function vector AIE ({name})"), &r.aie, r.n_layers, r.n_heads, None))?;
        let (l, h) = r.argmax();
        self.ctx.note(format!("{name}.max_head"), [l, h])?;
        Ok(r.aie)
    }

    fn probe(&mut self) -> Result<()> {
        let head = match self.cfg.get("heads") {
            Some(spec) => parse_heads(spec)?[0].0,
            None => match self.lm.kind {
                ModelKind::Oracle => ABSTRACTION_HEAD,
                ModelKind::Literal => return Err(Error::Config("the literal-induction oracle has no abstraction head; pass `heads`".into())),
                ModelKind::Checkpoint => {
                    let m = self.scan(HeadType::Abstraction)?;
                    let i = crate::train::argmax(&m.scores);
                    (i / m.n_heads, i % m.n_heads)
                }
            },
        };
        let content = self.lm.vocab.content_ids();
        let (a, b) = (content.len() * 11 / 32, content.len() * 21 / 32);
        let seed = self.cfg.seed()?;
        let (model, vocab, exec) = (&self.lm.model, &self.lm.vocab, self.ctx.exec);
        let train = probe_samples(model, vocab, content[..a].to_vec(), 200, head, seed, exec)?;
        let val = probe_samples(model, vocab, content[a..b].to_vec(), 100, head, seed.wrapping_add(1), exec)?;
        let test = probe_samples(model, vocab, content[b..].to_vec(), 200, head, seed.wrapping_add(2), exec)?;
        let report = linear_probe(&train, &val, &test)?;
        let control = linear_probe(
            &shuffle_labels(&train, seed.wrapping_add(3)),
            &shuffle_labels(&val, seed.wrapping_add(4)),
            &shuffle_labels(&test, seed.wrapping_add(5)),
        )?;
        self.ctx.json("probe.json", &json!({ "head": head, "probe": report, "shuffled_control": control }))?;
        self.ctx.note("probe.head", head)?;
        self.ctx.note("probe.test_accuracy", report.test_accuracy)?;
        self.ctx.note("probe.shuffled_test_accuracy", control.test_accuracy)
    }

    /// Every analysis on one model, then an HTML index of the figures.
    fn pipeline(&mut self) -> Result<()> {
        self.eval()?;
        let mut scores = Vec::new();
        for t in HeadType::ALL {
            scores.push(self.scan(t)?.scores);
        }
        self.layer_position(SiteKind::BlockOutput)?;
        for t in HeadType::ALL {
            for rule in [Rule::Aba, Rule::Abb] {
                self.attn(t, rule)?;
            }
            self.rsa(t, HeadComponent::Output)?;
            self.ablate(t)?;
        }
        let prefix = self.prefix()?;
        let fin = self.fv(PositionMode::FinalPosition)?;
        let third = self.fv(PositionMode::ThirdItem)?;
        self.probe()?;
        let (perms, seed, exec) = (self.cfg.uint("perms")?, self.cfg.seed()?, self.ctx.exec);
        let comparisons = [
            ("prefix_vs_induction", &prefix, &scores[1]),
            ("fv_final_vs_induction", &fin, &scores[1]),
            ("fv_third_item_vs_abstraction", &third, &scores[0]),
        ];
        let mut rows = Vec::new();
        for (name, a, b) in comparisons {
            let stat = match score_correlation(name, a, b, perms, seed, exec) {
                Ok(s) => Some(s),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            self.ctx.note(format!("correlation.{name}"), stat.as_ref().map(|s| s.r))?;
            rows.push((name, stat));
        }
        self.ctx.csv("correlations.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["comparison", "r", "p_value", "n_permutations"])?;
            for (name, s) in &rows {
                match s {
                    Some(s) => c.write_record([name.to_string(), s.r.to_string(), s.p_value.to_string(), s.n_permutations.to_string()])?,
                    None => c.write_record([name.to_string(), String::new(), String::new(), perms.to_string()])?,
                }
            }
            c.flush()?;
            Ok(())
        })?;
        let figures: Vec<String> = self.ctx.outputs.iter().filter(|p| p.ends_with(".svg")).cloned().collect();
        let summary = serde_json::to_value(&self.ctx.summary)?;
        let html = index_html("pipeline", &[IndexEntry { run: ".".into(), analysis: "pipeline".into(), summary, figures }]);
        self.ctx.file("index.html", html.as_bytes())
    }
}

struct IndexEntry {
    run: String,
    analysis: String,
    summary: serde_json::Value,
    /// Paths relative to the index.
    figures: Vec<String>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn index_html(title: &str, entries: &[IndexEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title></head><body>", escape(title));
    let _ = writeln!(s, "<h1>{}</h1>", escape(title));
    for e in entries {
        let _ = writeln!(s, "<h2>{} ({})</h2>", escape(&e.run), escape(&e.analysis));
        let pretty = serde_json::to_string_pretty(&e.summary).unwrap_or_default();
        let _ = writeln!(s, "<pre>{}</pre>", escape(&pretty));
        for f in &e.figures {
            let _ = writeln!(s, "<figure><img src=\"{0}\" alt=\"{0}\"><figcaption>{0}</figcaption></figure>", escape(f));
        }
    }
    s.push_str("</body></html>\n");
    s
}

/// Heatmap of a CSV written by an analysis, when it holds a matrix.
fn heatmap_from_csv(path: &Path, title: &str) -> Result<Option<Heatmap>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    let first = header.get(0).unwrap_or_default().to_string();
    if header.len() < 2 || !(first.is_empty() || first == "layer") {
        return Ok(None);
    }
    let cols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let label = rec.get(0).unwrap_or_default();
        rows.push(if first == "layer" { format!("L{label}") } else { label.to_string() });
        for v in rec.iter().skip(1) {
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => values.push(x),
                _ => return Ok(None),
            }
        }
    }
    if rows.is_empty() || values.len() != rows.len() * cols.len() {
        return Ok(None);
    }
    let mask_path = path.to_string_lossy().strip_suffix("_scores.csv").map(|p| format!("{p}_mask.csv"));
    let mask = match mask_path.map(std::path::PathBuf::from).filter(|p| p.is_file()) {
        Some(p) => {
            let (m, _, _) = read_head_csv(&p)?;
            (m.len() == values.len()).then(|| m.iter().map(|&x| x != 0.0).collect())
        }
        None => None,
    };
    Ok(Some(Heatmap { title: title.to_string(), rows: rows.len(), cols: cols.len(), values, row_labels: rows, col_labels: cols, mask }))
}

/// Heatmaps and an index for every run under `results`.
fn bundle(ctx: &mut Ctx, cfg: &Config) -> Result<()> {
    let results = cfg.path("results").ok_or_else(|| Error::Config("report needs `results = <dir>`".into()))?;
    let hint = "run an analysis first, e.g. `symlab cma --target abstraction`, or point --results at a runs directory";
    if !results.is_dir() {
        return Err(Error::Empty(format!("results directory {} does not exist; {hint}", results.display())));
    }
    let own = std::fs::canonicalize(&ctx.dir)?;
    let mut runs: Vec<(String, std::path::PathBuf, RunManifest)> = Vec::new();
    for entry in std::fs::read_dir(&results)? {
        let dir = entry?.path();
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.is_file() || std::fs::canonicalize(&dir)? == own {
            continue;
        }
        let m = RunManifest::load(&mpath)?;
        if m.analysis == "report" {
            continue;
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        runs.push((name, dir, m));
    }
    if runs.is_empty() {
        return Err(Error::Empty(format!("no runs with {MANIFEST_FILE} under {}; {hint}", results.display())));
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut entries = Vec::new();
    let mut n_figures = 0;
    for (name, dir, m) in &runs {
        let mut figures = Vec::new();
        for o in m.outputs.iter().filter(|o| o.path.ends_with(".csv")) {
            let stem = o.path.trim_end_matches(".csv");
            if let Some(h) = heatmap_from_csv(&dir.join(&o.path), &format!("{name}: {stem}"))? {
                let file = format!("{name}__{stem}.svg");
                ctx.heatmap(&file, &h)?;
                if ctx.svg {
                    figures.push(file);
                }
            }
        }
        n_figures += figures.len();
        entries.push(IndexEntry { run: name.clone(), analysis: m.analysis.clone(), summary: serde_json::to_value(&m.summary)?, figures });
    }
    ctx.file("index.html", index_html("symlab report", &entries).as_bytes())?;
    ctx.note("report.runs", runs.len())?;
    ctx.note("report.figures", n_figures)
}
