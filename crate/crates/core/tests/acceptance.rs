//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and share the run directories that later criteria replay. Exits
//! nonzero when any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symlab::causal_aux::{
    control_set, cumulative_ablation, function_vector_aie, prefix_matching_score, AblationCondition, AblationConfig, PositionMode, RulePrompt,
    PREFIX_SEEDS,
};
use symlab::cma::{compute_cm_score, filter_correct, identity_pairs, null_false_positive_rate, scan_layer_position, SiteKind};
use symlab::model::{HookSite, Model, ModelConfig, NormKind, PosEncoding};
use symlab::oracle::{build_literal_induction_oracle, build_oracle, LiteralSpec, Oracle, OracleSpec, ABSTRACTION_HEAD, INDUCTION_HEAD, LITERAL_INDUCTION_HEAD, RETRIEVAL_HEAD};
use symlab::report::{self, read_head_csv, Config, RunManifest, RunOutcome, MANIFEST_FILE};
use symlab::repr::{build_hypothesis_matrix, four_context_design, HeadComponent, SimilarityKind, SimilarityMatrix};
use symlab::tasks::{example_final_positions, HeadType, IdentityTask, Rule};
use symlab::tensor::{grad_check, Graph, Tensor, Var};
use symlab::train::model_grad_check;
use symlab::{Error, Exec, Result};

// Pinned tolerances.
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_SEEDS: u64 = 20;
const LP_ZERO: f64 = 1e-6;
const LP_EFFECT: f64 = 1e-3;
const FWER_MAX: f64 = 0.07;
const ATTN_MIN: f64 = 0.99;
const RSA_MIN: f64 = 0.9;
const CHANCE_TOL: f64 = 1e-12;
const FLAT_TOL: f64 = 1e-3;
const PREFIX_LITERAL_MIN: f64 = 0.99;
const PREFIX_SYMBOLIC_MAX: f64 = 0.1;
const PROBE_MIN: f64 = 0.99;
const SHUFFLED_TOL: f64 = 0.1;
const TRAIN_MIN: f64 = 0.90;
const TRAIN_SEEDS: [u64; 4] = [0, 1, 2, 3];
const TRAIN_STEPS: u64 = 8000;
const TRAIN_INIT_STD: f64 = 0.125;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Result<Verdict>) {
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict { pass: false, detail: format!("error: {e}") });
        let took = start.elapsed();
        let over = budget.is_some_and(|b| took > b);
        let pass = v.pass && !over;
        let mut detail = v.detail;
        if over {
            detail.push_str(&format!("; over the {}s budget", budget.unwrap_or_default().as_secs()));
        }
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id:>2}] {name}: {detail} ({:.1}s)", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
    }
}

fn oracle() -> Oracle {
    build_oracle(&OracleSpec::default()).expect("default oracle builds")
}

fn cfg(text: &str) -> Result<Config> {
    Config::parse(text)
}

fn summary_f64(out: &RunOutcome, key: &str) -> Result<f64> {
    out.manifest.summary.get(key).and_then(|v| v.as_f64()).ok_or_else(|| Error::Parse(format!("summary has no number `{key}`")))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Weighted sum of `y` with fixed random weights, so every output entry
/// carries a distinct nonzero upstream gradient.
fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, g.value(y).shape());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var, u64) -> Result<Var>>);

/// Every differentiable op, with the checked input first and the other
/// operands as seeded constants.
fn op_cases() -> Vec<OpCase> {
    fn konst(g: &mut Graph, seed: u64, shape: &[usize]) -> Var {
        let t = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7)), shape);
        g.constant(t)
    }
    vec![
        ("matmul_left", vec![3, 4], Box::new(|g, x, s| { let b = konst(g, s, &[4, 5]); g.matmul(x, b) })),
        ("matmul_right", vec![4, 5], Box::new(|g, x, s| { let a = konst(g, s, &[3, 4]); g.matmul(a, x) })),
        ("matmul_t_left", vec![3, 4], Box::new(|g, x, s| { let b = konst(g, s, &[5, 4]); g.matmul_t(x, b) })),
        ("matmul_t_right", vec![5, 4], Box::new(|g, x, s| { let a = konst(g, s, &[3, 4]); g.matmul_t(a, x) })),
        ("add", vec![3, 4], Box::new(|g, x, s| { let b = konst(g, s, &[3, 4]); g.add(x, b) })),
        ("mul", vec![3, 4], Box::new(|g, x, s| { let b = konst(g, s, &[3, 4]); g.mul(x, b) })),
        ("scale", vec![3, 4], Box::new(|g, x, _| g.scale(x, -1.7))),
        ("add_bias_x", vec![3, 4], Box::new(|g, x, s| { let b = konst(g, s, &[4]); g.add_bias(x, b) })),
        ("add_bias_bias", vec![4], Box::new(|g, x, s| { let a = konst(g, s, &[3, 4]); g.add_bias(a, x) })),
        ("layer_norm_x", vec![3, 6], Box::new(|g, x, s| { let w = konst(g, s, &[6]); let b = konst(g, s + 1, &[6]); g.layer_norm(x, Some(w), Some(b)) })),
        ("layer_norm_gain", vec![6], Box::new(|g, x, s| { let a = konst(g, s, &[3, 6]); let b = konst(g, s + 1, &[6]); g.layer_norm(a, Some(x), Some(b)) })),
        ("layer_norm_bias", vec![6], Box::new(|g, x, s| { let a = konst(g, s, &[3, 6]); let w = konst(g, s + 1, &[6]); g.layer_norm(a, Some(w), Some(x)) })),
        ("rms_norm_x", vec![3, 6], Box::new(|g, x, s| { let w = konst(g, s, &[6]); g.rms_norm(x, Some(w)) })),
        ("rms_norm_gain", vec![6], Box::new(|g, x, s| { let a = konst(g, s, &[3, 6]); g.rms_norm(a, Some(x)) })),
        ("embedding", vec![5, 3], Box::new(|g, x, _| g.embedding(x, &[4, 0, 2, 4]))),
        ("softmax_rows", vec![3, 5], Box::new(|g, x, _| g.softmax(x, 1))),
        ("softmax_cols", vec![3, 5], Box::new(|g, x, _| g.softmax(x, 0))),
        ("causal_softmax", vec![4, 4], Box::new(|g, x, _| g.causal_softmax(x))),
        ("gelu", vec![3, 4], Box::new(|g, x, _| g.gelu(x))),
        ("relu", vec![3, 4], Box::new(|g, x, _| g.relu(x))),
        ("block", vec![4, 5], Box::new(|g, x, _| g.block(x, 1, 2, 1, 3))),
        ("assemble", vec![2, 3], Box::new(|g, x, s| { let b = konst(g, s, &[1, 2]); g.assemble(&[(x, 1, 0), (b, 0, 3)], 3, 5) })),
        ("concat_cols", vec![3, 2], Box::new(|g, x, s| { let b = konst(g, s, &[3, 3]); g.concat_cols(&[b, x]) })),
        ("split_cols", vec![3, 6], Box::new(|g, x, _| { let p = g.split_cols(x, 3)?; let m = g.mul(p[0], p[2])?; g.add(m, p[1]) })),
        ("rotary", vec![3, 8], Box::new(|g, x, _| g.rotary(x, &[0, 5, 2], 10000.0, 4))),
        ("replace_rows", vec![4, 3], Box::new(|g, x, s| {
            let v = rand_tensor(&mut ChaCha8Rng::seed_from_u64(s), &[1, 3]);
            g.replace_rows(x, &[2], &v)
        })),
        ("select_rows", vec![4, 3], Box::new(|g, x, _| g.select_rows(x, &[3, 1, 3]))),
        ("cross_entropy", vec![3, 5], Box::new(|g, x, _| g.cross_entropy(x, &[Some(1), None, Some(4)]))),
    ]
}

fn tiny_model(vocab: usize, pos: PosEncoding, seed: u64) -> Result<Model> {
    Model::init(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 16,
        vocab_size: vocab,
        max_seq_len: 16,
        pos_encoding: pos,
        norm: NormKind::Rms,
        rotary_base: 10000.0,
        seed,
    })
}

fn c1_gradients() -> Result<Verdict> {
    let cases = op_cases();
    let mut worst = (0.0_f64, "");
    for seed in 0..GRAD_SEEDS {
        for (name, shape, f) in &cases {
            let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape);
            let err = grad_check(|g, v| { let y = f(g, v, seed)?; probe_loss(g, y, seed) }, &x, GRAD_EPS)?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
        for (pos, full_lm) in [(PosEncoding::Rotary, false), (PosEncoding::LearnedAbsolute, true)] {
            let model = tiny_model(12, pos, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<(Vec<usize>, usize)> = (0..2).map(|_| ((0..6).map(|_| rng.random_range(0..12)).collect(), rng.random_range(0..12))).collect();
            let err = model_grad_check(&model, &batch, full_lm, GRAD_EPS, 60, seed)?;
            if err > worst.0 {
                worst = (err, "model loss");
            }
        }
    }
    verdict(worst.0 < GRAD_TOL, format!("{} ops and the model loss over {GRAD_SEEDS} seeds, max rel err {:.2e} ({})", cases.len(), worst.0, worst.1))
}

fn c2_oracle(root: &Path) -> Result<Verdict> {
    let out = report::run(&cfg("analysis = eval\nmodel = oracle\nn = 2000\nname = c2-oracle-eval\n")?, root, Exec::Parallel)?;
    let mut rdr = csv::Reader::from_path(out.dir.join("eval.csv")).map_err(|e| Error::Parse(e.to_string()))?;
    let mut per_rule = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if &rec[0] != "all" {
            per_rule.push((rec[0].to_string(), rec[1].parse::<usize>().unwrap_or(0), rec[2].parse::<usize>().unwrap_or(0)));
        }
    }
    let pass = per_rule.len() == 2 && per_rule.iter().all(|(_, c, n)| *n == 1000 && c == n);
    let text: Vec<String> = per_rule.iter().map(|(r, c, n)| format!("{r} {c}/{n}")).collect();
    verdict(pass, text.join(", "))
}

fn c3_cma(root: &Path) -> Result<(Verdict, PathBuf)> {
    let out = report::run(&cfg("analysis = cma\nmodel = oracle\ntarget = all\npairs = 200\nperms = 5000\nalpha = 0.05\nname = c3-cma\n")?, root, Exec::Parallel)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (t, wired) in [(HeadType::Abstraction, ABSTRACTION_HEAD), (HeadType::SymbolicInduction, INDUCTION_HEAD), (HeadType::Retrieval, RETRIEVAL_HEAD)] {
        let sig: Vec<(usize, usize)> = serde_json::from_value(out.manifest.summary[&format!("cma.{}.significant", t.name())].clone())?;
        let kept = summary_f64(&out, &format!("cma.{}.pairs_kept", t.name()))?;
        pass &= sig == vec![wired] && kept == 400.0;
        parts.push(format!("{} {:?} ({kept} pairs)", t.name(), sig));
    }
    Ok((Verdict { pass, detail: format!("significant: {}", parts.join(", ")) }, out.dir))
}

fn c4_layer_position() -> Result<Verdict> {
    let o = oracle();
    let task = IdentityTask::new(&o.vocab, 2)?;
    let mut pass = true;
    let mut notes = Vec::new();
    for (target, cond) in [(HeadType::Abstraction, "abstract"), (HeadType::Retrieval, "token")] {
        let pairs = filter_correct(&o.model, identity_pairs(&task, target, 100, 4)?, Exec::Parallel)?;
        let map = scan_layer_position(&o.model, &pairs, SiteKind::BlockOutput, Exec::Parallel)?;
        let c1 = &pairs[0].c1;
        let fin = c1.final_position();
        let expected: BTreeSet<(usize, usize)> = if cond == "abstract" {
            example_final_positions(c1).into_iter().map(|p| (0, p)).chain([(1, fin)]).collect()
        } else {
            [(2, fin)].into()
        };
        let mut stray = 0.0_f64;
        let mut weakest = f64::INFINITY;
        for l in 0..map.n_layers {
            for &p in &map.positions {
                let s = map.get(l, p);
                if expected.contains(&(l, p)) {
                    weakest = weakest.min(s.abs());
                } else {
                    stray = stray.max(s.abs());
                }
            }
        }
        pass &= stray < LP_ZERO && weakest > LP_EFFECT;
        notes.push(format!("{cond}: sites {expected:?} min |s| {weakest:.3}, elsewhere max |s| {stray:.1e}"));
    }
    verdict(pass, notes.join("; "))
}

fn c5_self_patch() -> Result<Verdict> {
    let o = oracle();
    let task = IdentityTask::new(&o.vocab, 2)?;
    let (n_layers, n_heads) = (o.model.config().n_layers, o.model.config().n_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for i in 0..100 {
        let rule = if i % 2 == 0 { Rule::Aba } else { Rule::Abb };
        let mut pair = task.pair(&mut rng, rule, HeadType::ALL[i % 3])?;
        pair.c2 = pair.c1.clone();
        let all: Vec<usize> = (0..pair.c1.len()).collect();
        let mut sites = Vec::new();
        for l in 0..n_layers {
            sites.push(HookSite::block(l, all.clone()));
            sites.push(HookSite::mlp(l, all.clone()));
            sites.push(HookSite::block(l, vec![rng.random_range(0..all.len())]));
            for h in 0..n_heads {
                sites.push(HookSite::head(l, h, all.clone()));
            }
        }
        for s in &sites {
            worst = worst.max(compute_cm_score(&o.model, &pair, std::slice::from_ref(s), i)?.score().abs());
            checked += 1;
        }
        worst = worst.max(compute_cm_score(&o.model, &pair, &sites, i)?.score().abs());
    }
    verdict(worst == 0.0, format!("{checked} single-site patches over 100 pairs, max |s| = {worst:e}"))
}

fn c6_fwer() -> Result<Verdict> {
    let rate = null_false_positive_rate(200, 16, 200, 1000, 0.05, 6, Exec::Parallel)?;
    verdict(rate <= FWER_MAX, format!("family-wise false-positive rate {rate:.3} over 200 null experiments"))
}

fn c7_attention(root: &Path) -> Result<Verdict> {
    let out = report::run(&cfg("analysis = attn\nmodel = oracle\nhead_type = all\nrule = both\nname = c7-attn\n")?, root, Exec::Parallel)?;
    let mut worst = f64::INFINITY;
    let mut parts = Vec::new();
    for t in HeadType::ALL {
        for r in ["aba", "abb"] {
            let s = summary_f64(&out, &format!("attn_{}_{r}.prediction_score", t.name()))?;
            worst = worst.min(s);
            parts.push(format!("{}/{r} {s:.4}", t.name()));
        }
    }
    verdict(worst >= ATTN_MIN, parts.join(", "))
}

/// Contexts {0,1} and {2,3} form two constant blocks.
fn two_blocks(m: &SimilarityMatrix, per_context: usize) -> bool {
    (0..m.n).all(|i| (0..m.n).all(|j| {
        let same = (i / per_context < 2) == (j / per_context < 2);
        m.get(i, j) == if same { 1.0 } else { 0.0 }
    }))
}

/// Ones exactly on the main diagonal and the two diagonals at ±`offset`.
fn three_bands(m: &SimilarityMatrix, offset: usize) -> bool {
    (0..m.n).all(|i| (0..m.n).all(|j| m.get(i, j) == if i.abs_diff(j) == 0 || i.abs_diff(j) == offset { 1.0 } else { 0.0 }))
}

fn c8_rsa(root: &Path) -> Result<Verdict> {
    let out = report::run(&cfg("analysis = rsa\nmodel = oracle\nhead_type = all\ncomponent = output\nname = c8-rsa\n")?, root, Exec::Parallel)?;
    let r_abs = summary_f64(&out, "rsa_abstraction_output.r_abstract")?;
    let r_ind = summary_f64(&out, "rsa_induction_output.r_abstract")?;
    let r_tok = summary_f64(&out, "rsa_retrieval_output.r_token")?;
    let o = oracle();
    // Token-disjoint sets, so token identity only repeats across contexts.
    let mut ids = o.vocab.content_ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let sets: Vec<Vec<Vec<usize>>> = ids.chunks_exact(6).take(10).map(|c| c.chunks(2).map(<[usize]>::to_vec).collect()).collect();
    let design = four_context_design(&sets, &o.vocab, HeadType::Retrieval, HeadComponent::Output)?;
    let abs = build_hypothesis_matrix(SimilarityKind::HypothesisAbstract, &design.labels)?;
    let tok = build_hypothesis_matrix(SimilarityKind::HypothesisToken, &design.labels)?;
    let blocks = two_blocks(&abs, sets.len());
    let bands = three_bands(&tok, 2 * sets.len());
    let pass = r_abs > RSA_MIN && r_ind > RSA_MIN && r_tok > RSA_MIN && blocks && bands;
    verdict(pass, format!("r abstraction {r_abs:.4}, induction {r_ind:.4}, retrieval/token {r_tok:.4}; block structure {blocks}, three bands {bands}"))
}

fn c9_ablation(cma_dir: &Path) -> Result<Verdict> {
    let o = oracle();
    let (n_layers, n_heads) = (o.model.config().n_layers, o.model.config().n_heads);
    let mut scores = vec![0.0; n_layers * n_heads];
    for t in HeadType::ALL {
        let (v, l, h) = read_head_csv(&cma_dir.join(format!("cma_{}_scores.csv", t.name())))?;
        if (l, h) != (n_layers, n_heads) {
            return Err(Error::Dimension("score matrix does not match the oracle".into()));
        }
        scores.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    let critical = [ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD];
    let task = IdentityTask::new(&o.vocab, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let prompts = (0..100)
        .map(|i| {
            let rule = if i % 2 == 0 { Rule::Aba } else { Rule::Abb };
            let (prompt, a) = task.prompt(&mut rng, rule)?;
            Ok(RulePrompt { rule, prompt, answer: a.tokens[0] })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_h = n_layers * n_heads;
    let run = |condition| cumulative_ablation(&o.model, &prompts, &scores, &AblationConfig { random_runs: 10, ..AblationConfig::new(condition, max_h) }, Exec::Parallel);
    let ranked = run(AblationCondition::Ranked)?;
    let control = run(AblationCondition::Control)?;
    let random = run(AblationCondition::Random)?;
    let base = ranked.curve[0];
    let chance = 1.0 / o.model.config().vocab_size as f64;
    let top3: BTreeSet<_> = ranked.sets[3].iter().copied().collect();
    let ranked_ok = top3 == critical.into_iter().collect() && ranked.curve[3] <= chance + CHANCE_TOL;
    let hits = |set: &[(usize, usize)]| set.iter().any(|h| critical.contains(h));
    let mut drift = 0.0_f64;
    for h in 0..=max_h {
        if !hits(&control_set(&scores, n_heads, h)) {
            drift = drift.max((control.curve[h] - base).abs());
        }
    }
    for (curve, order) in random.runs.iter().zip(&random.orders) {
        for h in 0..=max_h {
            if !hits(&order[..h]) {
                drift = drift.max((curve[h] - base).abs());
            }
        }
    }
    let pass = ranked_ok && drift <= FLAT_TOL && random.runs.len() == 10;
    verdict(
        pass,
        format!("baseline {base:.4}, ranked after 3 heads {:.3e} (chance {chance:.3e}, top 3 {top3:?}); control/random max drift before a critical head {drift:.1e}", ranked.curve[3]),
    )
}

fn c10_dissociation() -> Result<Verdict> {
    let (lit, lit_vocab) = build_literal_induction_oracle(&LiteralSpec::default())?;
    let ls = prefix_matching_score(&lit, &lit_vocab, &PREFIX_SEEDS, Exec::Parallel)?;
    let nh = lit.config().n_heads;
    let literal = ls[LITERAL_INDUCTION_HEAD.0 * nh + LITERAL_INDUCTION_HEAD.1];
    let o = oracle();
    let os = prefix_matching_score(&o.model, &o.vocab, &PREFIX_SEEDS, Exec::Parallel)?;
    let nh = o.model.config().n_heads;
    let symbolic = [ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD].iter().map(|&(l, h)| os[l * nh + h]).fold(0.0_f64, f64::max);
    let task = IdentityTask::new(&o.vocab, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let prompts = (0..40)
        .map(|i| {
            let rule = if i % 2 == 0 { Rule::Aba } else { Rule::Abb };
            let (prompt, a) = task.prompt(&mut rng, rule)?;
            Ok(RulePrompt { rule, prompt, answer: a.tokens[0] })
        })
        .collect::<Result<Vec<_>>>()?;
    let fin = function_vector_aie(&o.model, &prompts, PositionMode::FinalPosition, 10, Exec::Parallel)?.argmax();
    let third = function_vector_aie(&o.model, &prompts, PositionMode::ThirdItem, 10, Exec::Parallel)?.argmax();
    let pass = literal >= PREFIX_LITERAL_MIN && symbolic < PREFIX_SYMBOLIC_MAX && fin == INDUCTION_HEAD && third == ABSTRACTION_HEAD;
    verdict(pass, format!("prefix literal {literal:.4}, symbolic max {symbolic:.4}; FV argmax final {fin:?}, third-item {third:?}"))
}

fn c11_probe(root: &Path) -> Result<Verdict> {
    let out = report::run(&cfg("analysis = probe\nmodel = oracle\nname = c11-probe\n")?, root, Exec::Parallel)?;
    let acc = summary_f64(&out, "probe.test_accuracy")?;
    let shuffled = summary_f64(&out, "probe.shuffled_test_accuracy")?;
    verdict(acc >= PROBE_MIN && (shuffled - 0.5).abs() <= SHUFFLED_TOL, format!("test accuracy {acc:.3}, shuffled-label control {shuffled:.3}"))
}

/// Runs directories created by criterion 12, replayed by criterion 13.
struct Trained {
    train: PathBuf,
    pipeline: PathBuf,
    report: PathBuf,
}

fn c12_trained(root: &Path) -> Result<(Verdict, Option<Trained>)> {
    let mut tried = Vec::new();
    for seed in TRAIN_SEEDS {
        let text = format!("analysis = train\npos_encoding = learned\ninit_std = {TRAIN_INIT_STD}\nsteps = {TRAIN_STEPS}\nseed = {seed}\nname = c12-train-s{seed}\n");
        let trained = report::run(&cfg(&text)?, root, Exec::Parallel)?;
        let ckpt = trained.dir.join("model.ckpt");
        let eval = report::run(&cfg(&format!("analysis = eval\ncheckpoint = {}\nn = 2000\nseed = 1000\nname = c12-heldout-s{seed}\n", ckpt.display()))?, root, Exec::Parallel)?;
        let acc = summary_f64(&eval, "eval.accuracy")?;
        let steps = summary_f64(&trained, "train.steps_run")?;
        tried.push(format!("seed {seed}: {acc:.3} after {steps} steps"));
        if acc < TRAIN_MIN {
            continue;
        }
        let pipeline = report::run(&cfg(&format!("analysis = pipeline\ncheckpoint = {}\nname = c12-pipeline\n", ckpt.display()))?, root, Exec::Parallel)?;
        let rep = report::run(&cfg(&format!("analysis = report\nresults = {}\nname = c12-report\n", root.display()))?, root, Exec::Parallel)?;
        let index = std::fs::read_to_string(rep.dir.join("index.html"))?;
        let outputs: BTreeSet<&str> = pipeline.manifest.outputs.iter().map(|o| o.path.as_str()).collect();
        let required = ["eval.csv", "cma_abstraction_scores.csv", "layer_position_abstract.csv", "attn_retrieval_aba.csv", "rsa_abstraction_output_empirical.csv",
            "ablation_retrieval_random.csv", "prefix_match.csv", "fv_final.csv", "probe.json", "correlations.csv", "index.html"];
        let missing: Vec<&str> = required.iter().copied().filter(|r| !outputs.contains(r)).collect();
        let figures = summary_f64(&rep, "report.figures")?;
        let complete = missing.is_empty() && index.contains("c12-pipeline") && figures > 0.0;
        let detail = format!("{}; pipeline {} outputs (missing {missing:?}), report {figures} figures", tried.join(", "), outputs.len());
        let dirs = Trained { train: trained.dir, pipeline: pipeline.dir, report: rep.dir };
        return Ok((Verdict { pass: complete, detail }, Some(dirs)));
    }
    Ok((Verdict { pass: false, detail: format!("no seed reached {TRAIN_MIN}: {}", tried.join(", ")) }, None))
}

fn c13_replay(dirs: &[PathBuf]) -> Result<Verdict> {
    let replay_root = tempfile::tempdir()?;
    let mut parts = Vec::new();
    let mut pass = !dirs.is_empty();
    for d in dirs {
        let r = report::replay(&d.join(MANIFEST_FILE), replay_root.path(), Exec::Parallel)?;
        let m: &RunManifest = &r.original;
        let n_files = m.outputs.iter().filter(|o| o.path.ends_with(".csv") || o.path.ends_with(".svg")).count();
        pass &= r.mismatches.is_empty() && n_files > 0;
        parts.push(format!("{} ({n_files} csv/svg): {}", m.analysis, if r.mismatches.is_empty() { "identical".to_string() } else { r.mismatches.join("; ") }));
    }
    verdict(pass, parts.join(", "))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let mut suite = Suite { failures: 0 };
    let minute = Some(Duration::from_secs(60));

    suite.check(1, "gradient fidelity", minute, c1_gradients);
    suite.check(2, "oracle behaviour", minute, || c2_oracle(root));
    let mut cma_dir = None;
    suite.check(3, "CMA detection", Some(Duration::from_secs(600)), || {
        let (v, dir) = c3_cma(root)?;
        cma_dir = Some(dir);
        Ok(v)
    });
    suite.check(4, "layer x position scan", None, c4_layer_position);
    suite.check(5, "self-patch identity", None, c5_self_patch);
    suite.check(6, "permutation-test calibration", None, c6_fwer);
    suite.check(7, "attention predictions", None, || c7_attention(root));
    suite.check(8, "RSA", None, || c8_rsa(root));
    suite.check(9, "ablation", None, || match &cma_dir {
        Some(d) => c9_ablation(d),
        None => verdict(false, "needs the CMA run of criterion 3"),
    });
    suite.check(10, "dissociation", None, c10_dissociation);
    suite.check(11, "probe", None, || c11_probe(root));
    let train_root = tempfile::tempdir().expect("temp dir");
    let mut trained = None;
    suite.check(12, "trained toy model", Some(Duration::from_secs(1800)), || {
        let (v, t) = c12_trained(train_root.path())?;
        trained = t;
        Ok(v)
    });
    suite.check(13, "reproducibility", None, || {
        let mut dirs: Vec<PathBuf> = cma_dir.iter().cloned().collect();
        if let Some(t) = &trained {
            dirs.extend([t.train.clone(), t.pipeline.clone(), t.report.clone()]);
        }
        c13_replay(&dirs)
    });

    println!("{} of 13 criteria failed", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
