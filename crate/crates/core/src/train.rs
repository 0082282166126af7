//! Training the toy transformer on identity-rule prompts.
//!
//! The optimizer is AdamW with linear warmup, cosine decay to
//! `min_lr_fraction · learning_rate`, global-norm gradient clipping, and
//! decoupled weight decay on 2-D parameters only. Each step samples a batch,
//! splits it into chunks that are differentiated independently (in parallel
//! under [`Exec::Parallel`]) and sums the chunk gradients in chunk order, so
//! a run is bitwise reproducible for a given seed and config.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Exec};
use crate::model::Model;
use crate::stats::wilson_ci;
use crate::tasks::{identity_prompt, sample_token_sets, AnswerSpec, Prompt, Rule, Vocab};
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub min_lr_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Rules sampled per prompt with the given probabilities.
    pub mixture: Vec<(Rule, f64)>,
    pub n_shots: usize,
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub seed: u64,
    pub target_accuracy: f64,
    /// Next-token loss at every position instead of the answer only.
    pub full_lm: bool,
    /// Sequences per independently differentiated chunk.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup: 200,
            min_lr_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            mixture: vec![(Rule::Aba, 0.5), (Rule::Abb, 0.5)],
            n_shots: 2,
            eval_every: 250,
            eval_prompts: 400,
            seed: 0,
            target_accuracy: 0.95,
            full_lm: false,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.chunk_size == 0 {
            return bad("steps, batch_size, eval_every and chunk_size must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("learning_rate and adam_eps must be positive, weight_decay and grad_clip non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) || !(0.0..=1.0).contains(&self.target_accuracy) {
            return bad("min_lr_fraction and target_accuracy must lie in [0, 1]");
        }
        if self.mixture.is_empty() || self.mixture.iter().any(|(_, w)| w.is_nan() || *w < 0.0) {
            return bad("mixture weights must be non-negative");
        }
        let total: f64 = self.mixture.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if let Some((r, _)) = self.mixture.iter().find(|(r, _)| r.pattern().is_none()) {
            return Err(Error::Config(format!("rule {} is not an identity rule", r.name())));
        }
        if self.n_shots == 0 {
            return bad("n_shots must be at least 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.learning_rate * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.min_lr_fraction;
        self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// One fifth of all unordered token sets are reserved for evaluation.
const HELDOUT_MODULUS: u64 = 5;

/// Whether a token set belongs to the held-out split. The split depends
/// only on the set's contents, never on the order of its tokens.
pub fn is_heldout_set(set: &[usize]) -> bool {
    let mut s = set.to_vec();
    s.sort_unstable();
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for t in s {
        h ^= t as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h.is_multiple_of(HELDOUT_MODULUS)
}

/// Samples an identity prompt whose token sets all lie in one split.
pub fn sample_split_prompt<R: Rng + ?Sized>(
    rng: &mut R,
    vocab: &Vocab,
    rule: Rule,
    n_shots: usize,
    heldout: bool,
) -> Result<(Prompt, AnswerSpec)> {
    let sets = sample_token_sets(rng, &vocab.content_ids(), n_shots + 1, rule.n_vars(), |s| is_heldout_set(s) == heldout)?;
    identity_prompt(rule, &sets, vocab)
}

/// A prompt with its expected answer and, for comparison scoring, a foil.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub tokens: Vec<usize>,
    pub answer: Vec<usize>,
    pub foil: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Every answer token must be the greedy argmax.
    Argmax,
    /// The answer must outscore the foil.
    LogitComparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
    /// 95% Wilson interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn is_correct(model: &Model, item: &EvalItem, scoring: Scoring) -> Result<bool> {
    if item.answer.is_empty() {
        return Err(Error::Empty("answer".into()));
    }
    match scoring {
        Scoring::Argmax => {
            let mut seq = item.tokens.clone();
            seq.extend_from_slice(&item.answer[..item.answer.len() - 1]);
            let logits = model.run(&seq, &[])?;
            Ok(item.answer.iter().enumerate().all(|(j, &a)| argmax(logits.row(item.tokens.len() - 1 + j)) == a))
        }
        Scoring::LogitComparison => {
            let foil = item.foil.as_ref().ok_or_else(|| Error::Config("logit comparison needs a foil".into()))?;
            let s = model.score_answers(&item.tokens, &[&item.answer, foil], &[])?;
            Ok(s[0] > s[1])
        }
    }
}

pub fn evaluate_accuracy(model: &Model, items: &[EvalItem], scoring: Scoring, exec: Exec) -> Result<AccuracyReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation prompts".into()));
    }
    let hits = try_map_indexed(exec, items.len(), |i| is_correct(model, &items[i], scoring))?;
    let correct = hits.iter().filter(|&&h| h).count();
    let (ci_low, ci_high) = wilson_ci(correct, items.len());
    Ok(AccuracyReport { correct, n: items.len(), accuracy: correct as f64 / items.len() as f64, ci_low, ci_high })
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}

/// Held-out identity prompts drawn from the evaluation split.
pub fn heldout_items(vocab: &Vocab, rules: &[Rule], n_shots: usize, n: usize, seed: u64) -> Result<Vec<EvalItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (p, a) = sample_split_prompt(&mut rng, vocab, rules[i % rules.len()], n_shots, true)?;
            Ok(EvalItem { tokens: p.tokens, answer: a.tokens, foil: None })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricRow>,
    pub final_eval: AccuracyReport,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// CSV with header `step,loss,lr,accuracy`; accuracy is blank between
/// evaluations.
pub fn write_metrics<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "lr", "accuracy"])?;
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([r.step.to_string(), r.loss.to_string(), r.lr.to_string(), acc])?;
    }
    w.flush()?;
    Ok(())
}

fn targets_for(seq: &[usize], answer: usize, full_lm: bool) -> Vec<Option<usize>> {
    let t = seq.len();
    (0..t)
        .map(|i| {
            if i == t - 1 {
                Some(answer)
            } else if full_lm {
                Some(seq[i + 1])
            } else {
                None
            }
        })
        .collect()
}

/// Loss and parameter gradients of a batch, summed over chunks of equal
/// sequence length and normalized by the total number of target tokens.
pub fn batch_gradients(
    model: &Model,
    batch: &[(Vec<usize>, usize)],
    full_lm: bool,
    chunk_size: usize,
    exec: Exec,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, (seq, _)) in batch.iter().enumerate() {
        by_len.entry(seq.len()).or_default().push(i);
    }
    let chunks: Vec<Vec<usize>> = by_len.values().flat_map(|ids| ids.chunks(chunk_size.max(1)).map(<[usize]>::to_vec)).collect();
    let count = |i: usize| if full_lm { batch[i].0.len() } else { 1 };
    let total: usize = (0..batch.len()).map(count).sum();
    let parts = try_map_indexed(exec, chunks.len(), |c| {
        let ids = &chunks[c];
        let seqs: Vec<&[usize]> = ids.iter().map(|&i| batch[i].0.as_slice()).collect();
        let targets: Vec<Option<usize>> = ids.iter().flat_map(|&i| targets_for(&batch[i].0, batch[i].1, full_lm)).collect();
        let n: usize = ids.iter().map(|&i| count(i)).sum();
        let mut g = Graph::new();
        let fwd = model.build(&mut g, &seqs, true, &[], false)?;
        let ce = g.cross_entropy(fwd.logits, &targets)?;
        let loss = g.scale(ce, n as f64 / total as f64)?;
        let grads = g.backward(loss)?;
        let per_param: Vec<Vec<f64>> = fwd
            .params
            .iter()
            .map(|&p| grads.get(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(p).len()]))
            .collect();
        Ok::<_, Error>((g.value(loss).item(), per_param))
    })?;
    let mut loss = 0.0;
    let mut sum: Vec<Vec<f64>> = model.params().map(|(_, t)| vec![0.0; t.len()]).collect();
    for (l, grads) in parts {
        loss += l;
        for (acc, g) in sum.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    Ok((loss, sum))
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.params().map(|(_, t)| t.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            decay: model.params().map(|(_, t)| t.shape().len() == 2).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in model.param_data_mut().into_iter().enumerate() {
            let wd = if self.decay[i] { cfg.weight_decay } else { 0.0 };
            for (j, w) in p.iter_mut().enumerate() {
                let g = grads[i][j];
                self.m[i][j] = cfg.beta1 * self.m[i][j] + (1.0 - cfg.beta1) * g;
                self.v[i][j] = cfg.beta2 * self.v[i][j] + (1.0 - cfg.beta2) * g * g;
                let update = (self.m[i][j] / bc1) / ((self.v[i][j] / bc2).sqrt() + cfg.adam_eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

fn sample_rule<R: Rng + ?Sized>(rng: &mut R, mixture: &[(Rule, f64)]) -> Rule {
    let mut u: f64 = rng.random();
    for &(r, w) in mixture {
        if u < w {
            return r;
        }
        u -= w;
    }
    mixture.last().expect("validated non-empty").0
}

/// Trains `model` on the training split until `cfg.steps` or until the
/// held-out accuracy reaches `cfg.target_accuracy`.
pub fn train(mut model: Model, vocab: &Vocab, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config().validate()?;
    if vocab.len() > model.config().vocab_size {
        return Err(Error::Config(format!("vocab of {} exceeds model vocab {}", vocab.len(), model.config().vocab_size)));
    }
    let rules: Vec<Rule> = cfg.mixture.iter().filter(|(_, w)| *w > 0.0).map(|(r, _)| *r).collect();
    let eval_items = heldout_items(vocab, &rules, cfg.n_shots, cfg.eval_prompts, cfg.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model);
    let mut log = Vec::new();
    let mut last_eval = None;
    for step in 0..cfg.steps {
        let batch: Vec<(Vec<usize>, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let rule = sample_rule(&mut rng, &cfg.mixture);
                let (p, a) = sample_split_prompt(&mut rng, vocab, rule, cfg.n_shots, false)?;
                Ok((p.tokens, a.tokens[0]))
            })
            .collect::<Result<_>>()?;
        let (loss, mut grads) = batch_gradients(&model, &batch, cfg.full_lm, cfg.chunk_size, exec).map_err(|e| match e {
            Error::NonFinite(op) => Error::Diverged { step, reason: format!("non-finite value in {op}") },
            other => other,
        })?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, reason: format!("loss {loss}") });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut model, &grads, lr, cfg);
        let mut row = MetricRow { step: step + 1, loss, lr, accuracy: None };
        let done = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_every == 0 || done {
            let report = evaluate_accuracy(&model, &eval_items, Scoring::Argmax, exec)?;
            row.accuracy = Some(report.accuracy);
            last_eval = Some(report);
            log.push(row);
            if report.accuracy >= cfg.target_accuracy {
                return Ok(TrainOutcome { model, log, final_eval: report, steps_run: step + 1, stopped_early: !done });
            }
        } else {
            log.push(row);
        }
    }
    let final_eval = last_eval.expect("the last step always evaluates");
    Ok(TrainOutcome { model, log, final_eval, steps_run: cfg.steps, stopped_early: false })
}

/// Largest relative error between the analytic gradient of the batch loss
/// and central differences, over `n_probe` randomly chosen parameter
/// entries (every entry when the model is smaller). Relative error is
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn model_grad_check(
    model: &Model,
    batch: &[(Vec<usize>, usize)],
    full_lm: bool,
    eps: f64,
    n_probe: usize,
    seed: u64,
) -> Result<f64> {
    let (_, analytic) = batch_gradients(model, batch, full_lm, batch.len(), Exec::Sequential)?;
    let mut entries: Vec<(usize, usize)> =
        analytic.iter().enumerate().flat_map(|(i, g)| (0..g.len()).map(move |j| (i, j))).collect();
    if entries.len() > n_probe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        entries = rand::seq::index::sample(&mut rng, entries.len(), n_probe).into_iter().map(|k| entries[k]).collect();
    }
    let loss_with = |i: usize, j: usize, delta: f64| -> Result<f64> {
        let mut m = model.clone();
        m.param_data_mut()[i][j] += delta;
        Ok(batch_gradients(&m, batch, full_lm, batch.len(), Exec::Sequential)?.0)
    };
    let mut worst = 0.0_f64;
    for (i, j) in entries {
        let numeric = (loss_with(i, j, eps)? - loss_with(i, j, -eps)?) / (2.0 * eps);
        let a = analytic[i][j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NormKind, PosEncoding};

    fn tiny(vocab: usize, seed: u64) -> Model {
        Model::init(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: vocab,
            max_seq_len: 32,
            pos_encoding: PosEncoding::Rotary,
            norm: NormKind::Rms,
            rotary_base: 10000.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { mixture: vec![(Rule::Aba, 0.7), (Rule::Abb, 0.7)], ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { mixture: vec![(Rule::Successor, 1.0)], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig { steps: 100, warmup: 10, learning_rate: 1.0, min_lr_fraction: 0.1, ..TrainConfig::default() };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 0.1).abs() < 1e-12);
        assert!(cfg.lr_at(50) < cfg.lr_at(20));
    }

    #[test]
    fn heldout_split_ignores_order_and_is_disjoint() {
        let vocab = Vocab::synthetic(64).unwrap();
        assert_eq!(is_heldout_set(&[9, 30]), is_heldout_set(&[30, 9]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut held = 0;
        for i in 0..300 {
            let heldout = i % 2 == 0;
            let (p, _) = sample_split_prompt(&mut rng, &vocab, Rule::Aba, 2, heldout).unwrap();
            for e in 0..3 {
                let set = [p.tokens[p.position_of(e, 0).unwrap()], p.tokens[p.position_of(e, 2).unwrap()]];
                assert_eq!(is_heldout_set(&set), heldout);
            }
            held += heldout as usize;
        }
        assert_eq!(held, 150);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let vocab = Vocab::synthetic(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<(Vec<usize>, usize)> = (0..3)
            .map(|_| {
                let (p, a) = sample_split_prompt(&mut rng, &vocab, Rule::Abb, 2, false).unwrap();
                (p.tokens, a.tokens[0])
            })
            .collect();
        for full_lm in [false, true] {
            let err = model_grad_check(&tiny(vocab.len(), 1), &batch, full_lm, 1e-5, 300, 0).unwrap();
            assert!(err < 1e-4, "full_lm={full_lm}: {err}");
        }
    }

    #[test]
    fn chunking_does_not_change_gradients() {
        let vocab = Vocab::synthetic(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<(Vec<usize>, usize)> = (0..5)
            .map(|_| {
                let (p, a) = sample_split_prompt(&mut rng, &vocab, Rule::Aba, 2, false).unwrap();
                (p.tokens, a.tokens[0])
            })
            .collect();
        let m = tiny(vocab.len(), 2);
        let (l1, g1) = batch_gradients(&m, &batch, false, 5, Exec::Sequential).unwrap();
        let (l2, g2) = batch_gradients(&m, &batch, false, 2, Exec::Parallel).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn memorizes_a_fixed_prompt() {
        let vocab = Vocab::synthetic(10).unwrap();
        let (p, a) = identity_prompt(Rule::Aba, &[vec![7, 8], vec![9, 10], vec![11, 12]], &vocab).unwrap();
        let batch = vec![(p.tokens.clone(), a.tokens[0])];
        let cfg = TrainConfig { learning_rate: 1e-2, warmup: 10, steps: 500, ..TrainConfig::default() };
        let mut model = tiny(vocab.len(), 3);
        let mut opt = AdamW::new(&model);
        let mut loss = f64::INFINITY;
        for step in 0..500 {
            let (l, g) = batch_gradients(&model, &batch, false, 8, Exec::Sequential).unwrap();
            loss = l;
            if loss < 1e-3 {
                break;
            }
            opt.step(&mut model, &g, cfg.lr_at(step), &cfg);
        }
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn training_is_reproducible() {
        let vocab = Vocab::synthetic(16).unwrap();
        let cfg = TrainConfig { steps: 6, batch_size: 6, eval_every: 3, eval_prompts: 10, chunk_size: 2, ..TrainConfig::default() };
        let a = train(tiny(vocab.len(), 0), &vocab, &cfg, Exec::Parallel).unwrap();
        let b = train(tiny(vocab.len(), 0), &vocab, &cfg, Exec::Sequential).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(crate::checkpoint::hash(&a.model).unwrap(), crate::checkpoint::hash(&b.model).unwrap());
        assert_eq!(a.log.iter().filter(|r| r.accuracy.is_some()).count(), 2);
    }

    #[test]
    fn metrics_csv_has_header_and_blanks() {
        let rows = vec![
            MetricRow { step: 1, loss: 2.5, lr: 0.1, accuracy: None },
            MetricRow { step: 2, loss: 2.0, lr: 0.1, accuracy: Some(0.5) },
        ];
        let mut out = Vec::new();
        write_metrics(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,loss,lr,accuracy\n1,2.5,0.1,\n2,2,0.1,0.5\n");
    }

    #[test]
    fn oracle_scores_perfectly_and_random_init_near_chance() {
        let o = crate::oracle::build_oracle(&crate::oracle::OracleSpec::default()).unwrap();
        let items = heldout_items(&o.vocab, &[Rule::Aba, Rule::Abb], 2, 200, 1).unwrap();
        let r = evaluate_accuracy(&o.model, &items, Scoring::Argmax, Exec::Parallel).unwrap();
        assert_eq!(r.correct, 200);
        let random = Model::init(crate::model::ModelConfig::toy(o.vocab.len(), 7)).unwrap();
        let r = evaluate_accuracy(&random, &items, Scoring::Argmax, Exec::Parallel).unwrap();
        assert!(r.ci_low <= 1.0 / 64.0 && r.accuracy < 0.1, "{r:?}");
    }

    #[test]
    fn wilson_interval_of_95_of_100_contains_point() {
        let (lo, hi) = wilson_ci(95, 100);
        assert!(lo < 0.95 && 0.95 < hi);
    }

    #[test]
    fn logit_comparison_needs_foil() {
        let vocab = Vocab::synthetic(10).unwrap();
        let item = EvalItem { tokens: vec![0, 7], answer: vec![8], foil: None };
        assert!(is_correct(&tiny(vocab.len(), 0), &item, Scoring::LogitComparison).is_err());
        let item = EvalItem { foil: Some(vec![9]), ..item };
        assert!(is_correct(&tiny(vocab.len(), 0), &item, Scoring::LogitComparison).is_ok());
    }
}
