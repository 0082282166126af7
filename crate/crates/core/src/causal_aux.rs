//! Head ablation curves, prefix-matching scores and function-vector
//! indirect effects.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, try_map_indexed, Exec};
use crate::model::{HookSite, Intervention, Model, Replacement};
use crate::stats::{mean, pearson, std_dev};
use crate::tasks::{example_final_positions, Prompt, Rule, Vocab, BOS};
use crate::tensor::{softmax_vec, Tensor};

/// A prompt with its correct answer token and the rule that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePrompt {
    pub rule: Rule,
    pub prompt: Prompt,
    pub answer: usize,
}

/// Probability of `answer` under a full-vocabulary softmax at the final
/// position.
pub fn answer_probability(model: &Model, tokens: &[usize], answer: usize, ivs: &[Intervention]) -> Result<f64> {
    let logits = model.run(tokens, ivs)?;
    let p = softmax_vec(logits.row(logits.rows() - 1));
    p.get(answer).copied().ok_or(Error::OutOfVocab { token: answer, vocab: p.len() })
}

/// Mean over rules of the per-rule mean of `f`.
fn rule_balanced_mean(prompts: &[RulePrompt], values: &[f64]) -> f64 {
    let mut rules: Vec<Rule> = prompts.iter().map(|p| p.rule).collect();
    rules.sort_by_key(|r| r.name());
    rules.dedup();
    let per_rule: Vec<f64> = rules
        .iter()
        .map(|&r| mean(&prompts.iter().zip(values).filter(|(p, _)| p.rule == r).map(|(_, v)| *v).collect::<Vec<_>>()))
        .collect();
    mean(&per_rule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCondition {
    /// Highest-scored heads first.
    Ranked,
    /// For the first h ranked heads, the same number of lowest-scored heads
    /// from each of their layers.
    Control,
    /// Uniformly random heads, nested within each run.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub condition: AblationCondition,
    /// Mean correct-answer probability for h = 0..=max_h heads ablated.
    pub curve: Vec<f64>,
    /// Standard deviation across random runs; zeros otherwise.
    pub std: Vec<f64>,
    /// Per-run curves of the random condition.
    pub runs: Vec<Vec<f64>>,
    /// Ablated head sets per h (first run for the random condition).
    pub sets: Vec<Vec<(usize, usize)>>,
    /// Ablation order of each random run, `max_h` heads long.
    pub orders: Vec<Vec<(usize, usize)>>,
}

impl AblationReport {
    /// CSV with header `h,mean_prob,std`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "mean_prob", "std"])?;
        for (h, (m, s)) in self.curve.iter().zip(&self.std).enumerate() {
            w.write_record([h.to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Heads in descending score order, ties by (layer, head).
pub fn ranked_heads(scores: &[f64], n_heads: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().map(|i| (i / n_heads, i % n_heads)).collect()
}

/// Control set for the first `h` ranked heads: in each layer, as many of
/// that layer's lowest-scored heads as the ranked set takes from it.
pub fn control_set(scores: &[f64], n_heads: usize, h: usize) -> Vec<(usize, usize)> {
    let ranked = ranked_heads(scores, n_heads);
    let n_layers = scores.len() / n_heads;
    let mut per_layer = vec![0usize; n_layers];
    for &(l, _) in &ranked[..h] {
        per_layer[l] += 1;
    }
    let mut out = Vec::new();
    for (l, &count) in per_layer.iter().enumerate() {
        let mut heads: Vec<usize> = (0..n_heads).collect();
        heads.sort_by(|&a, &b| scores[l * n_heads + a].total_cmp(&scores[l * n_heads + b]).then(a.cmp(&b)));
        out.extend(heads[..count].iter().map(|&hh| (l, hh)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Zero,
    /// Replace each head's output with its mean over the ablation prompts
    /// that share the prompt's length, per position.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub condition: AblationCondition,
    pub mode: AblationMode,
    pub max_h: usize,
    pub random_runs: usize,
    pub seed: u64,
}

impl AblationConfig {
    pub fn new(condition: AblationCondition, max_h: usize) -> Self {
        Self { condition, mode: AblationMode::Zero, max_h, random_runs: 10, seed: 0 }
    }
}

/// Per-length mean head outputs, indexed by `l·H + h`.
type MeanOutputs = Vec<(usize, Vec<Tensor>)>;

fn mean_outputs(model: &Model, prompts: &[RulePrompt], exec: Exec) -> Result<MeanOutputs> {
    let n = model.config().n_layers * model.config().n_heads;
    let caches = try_map_indexed(exec, prompts.len(), |i| Ok::<_, Error>(model.run_with_cache(&prompts[i].prompt.tokens, &[])?.1))?;
    let mut lens: Vec<usize> = prompts.iter().map(|p| p.prompt.len()).collect();
    lens.sort_unstable();
    lens.dedup();
    lens.into_iter()
        .map(|len| {
            let members: Vec<&crate::model::ActivationCache> = caches.iter().filter(|c| c.len() == len).collect();
            let heads = (0..n)
                .map(|k| {
                    let h = model.config().n_heads;
                    let shape = members[0].layers[k / h].heads[k % h].output.shape().to_vec();
                    let mut acc = vec![0.0; shape.iter().product()];
                    for c in &members {
                        for (a, v) in acc.iter_mut().zip(c.layers[k / h].heads[k % h].output.data()) {
                            *a += v / members.len() as f64;
                        }
                    }
                    Tensor::new(shape, acc)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((len, heads))
        })
        .collect()
}

fn ablation_interventions(set: &[(usize, usize)], len: usize, n_heads: usize, means: Option<&MeanOutputs>) -> Vec<Intervention> {
    let table = means.and_then(|m| m.iter().find(|(l, _)| *l == len)).map(|(_, t)| t);
    set.iter()
        .map(|&(l, h)| {
            let site = HookSite::head(l, h, (0..len).collect());
            match table {
                Some(t) => Intervention { site, values: Replacement::Rows(t[l * n_heads + h].clone()) },
                None => Intervention::zero(site),
            }
        })
        .collect()
}

fn curve_for(
    model: &Model,
    prompts: &[RulePrompt],
    sets: &[Vec<(usize, usize)>],
    means: Option<&MeanOutputs>,
    exec: Exec,
) -> Result<Vec<f64>> {
    let n_heads = model.config().n_heads;
    sets.iter()
        .map(|set| {
            let probs = try_map_indexed(exec, prompts.len(), |i| {
                let p = &prompts[i];
                answer_probability(model, &p.prompt.tokens, p.answer, &ablation_interventions(set, p.prompt.len(), n_heads, means))
            })?;
            Ok(rule_balanced_mean(prompts, &probs))
        })
        .collect()
}

/// Correct-answer probability as heads are ablated at every position, for
/// h = 0..=max_h. `scores` is the row-major layers × heads ranking.
pub fn cumulative_ablation(model: &Model, prompts: &[RulePrompt], scores: &[f64], cfg: &AblationConfig, exec: Exec) -> Result<AblationReport> {
    let AblationConfig { condition, mode, max_h, random_runs, seed } = *cfg;
    let (n_layers, n_heads) = (model.config().n_layers, model.config().n_heads);
    let total = n_layers * n_heads;
    if scores.len() != total {
        return Err(Error::Dimension(format!("ranking has {} heads, model {total}", scores.len())));
    }
    if max_h > total {
        return Err(Error::Config(format!("cannot ablate {max_h} of {total} heads")));
    }
    if prompts.is_empty() {
        return Err(Error::Empty("ablation prompts".into()));
    }
    let means = match mode {
        AblationMode::Zero => None,
        AblationMode::Mean => Some(mean_outputs(model, prompts, exec)?),
    };
    let nested = |order: &[(usize, usize)]| -> Vec<Vec<(usize, usize)>> { (0..=max_h).map(|h| order[..h].to_vec()).collect() };
    match condition {
        AblationCondition::Ranked | AblationCondition::Control => {
            let sets: Vec<Vec<(usize, usize)>> = if condition == AblationCondition::Ranked {
                nested(&ranked_heads(scores, n_heads))
            } else {
                (0..=max_h).map(|h| control_set(scores, n_heads, h)).collect()
            };
            let curve = curve_for(model, prompts, &sets, means.as_ref(), exec)?;
            Ok(AblationReport { condition, std: vec![0.0; curve.len()], curve, runs: Vec::new(), sets, orders: Vec::new() })
        }
        AblationCondition::Random => {
            if random_runs == 0 {
                return Err(Error::Config("random ablation needs at least one run".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<(usize, usize)> = (0..total).map(|i| (i / n_heads, i % n_heads)).collect();
            let mut runs = Vec::with_capacity(random_runs);
            let mut first_sets = Vec::new();
            let mut orders = Vec::with_capacity(random_runs);
            for r in 0..random_runs {
                all.shuffle(&mut rng);
                orders.push(all[..max_h].to_vec());
                let sets = nested(&all);
                runs.push(curve_for(model, prompts, &sets, means.as_ref(), exec)?);
                if r == 0 {
                    first_sets = sets;
                }
            }
            let curve = (0..=max_h).map(|h| mean(&runs.iter().map(|c| c[h]).collect::<Vec<_>>())).collect();
            let std = (0..=max_h).map(|h| std_dev(&runs.iter().map(|c| c[h]).collect::<Vec<_>>())).collect();
            Ok(AblationReport { condition, curve, std, runs, sets: first_sets, orders })
        }
    }
}

/// Number of unique tokens in each repeat of the prefix-matching sequence.
pub const PREFIX_TOKENS: usize = 50;
/// Seeds averaged by [`prefix_matching_score`].
pub const PREFIX_SEEDS: [u64; 4] = [0, 1, 2, 3];

/// For every position of the second repeat, the attention paid to the token
/// after the same token's first occurrence; averaged over positions and
/// seeds. Row-major layers × heads.
pub fn prefix_matching_score(model: &Model, vocab: &Vocab, seeds: &[u64], exec: Exec) -> Result<Vec<f64>> {
    let len = 1 + 2 * PREFIX_TOKENS;
    if len > model.config().max_seq_len {
        return Err(Error::PromptTooLong { len, max: model.config().max_seq_len });
    }
    let content = vocab.content_ids();
    if content.len() < PREFIX_TOKENS {
        return Err(Error::VocabExhausted { need: PREFIX_TOKENS, have: content.len() });
    }
    if seeds.is_empty() {
        return Err(Error::Empty("prefix-matching seeds".into()));
    }
    let (n_layers, n_heads) = (model.config().n_layers, model.config().n_heads);
    let per_seed = try_map_indexed(exec, seeds.len(), |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[s]);
        let mut pool = content.clone();
        pool.shuffle(&mut rng);
        let seq = &pool[..PREFIX_TOKENS];
        let mut tokens = vec![BOS];
        tokens.extend_from_slice(seq);
        tokens.extend_from_slice(seq);
        let (_, cache) = model.run_with_cache(&tokens, &[])?;
        let mut out = vec![0.0; n_layers * n_heads];
        for l in 0..n_layers {
            for h in 0..n_heads {
                let pat = &cache.layers[l].heads[h].pattern;
                let total: f64 = (PREFIX_TOKENS + 1..len).map(|i| pat.get2(i, i - PREFIX_TOKENS + 1)).sum();
                out[l * n_heads + h] = total / PREFIX_TOKENS as f64;
            }
        }
        Ok::<_, Error>(out)
    })?;
    Ok((0..n_layers * n_heads).map(|k| mean(&per_seed.iter().map(|v| v[k]).collect::<Vec<_>>())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    FinalPosition,
    ThirdItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionVectorReport {
    pub mode: PositionMode,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Row-major layers × heads average indirect effect.
    pub aie: Vec<f64>,
    pub n_prompts_per_rule: Vec<(Rule, usize)>,
}

impl FunctionVectorReport {
    pub fn argmax(&self) -> (usize, usize) {
        let i = crate::train::argmax(&self.aie);
        (i / self.n_heads, i % self.n_heads)
    }
}

/// The prompt with its in-context answers (last items) permuted so that no
/// example keeps its own answer.
pub fn corrupt_prompt(prompt: &Prompt, rng: &mut ChaCha8Rng) -> Result<Prompt> {
    let positions = example_final_positions(prompt);
    if positions.len() < 2 {
        return Err(Error::Config("corruption needs at least two in-context examples".into()));
    }
    let answers: Vec<usize> = positions.iter().map(|&p| prompt.tokens[p]).collect();
    if answers.iter().all(|&a| a == answers[0]) {
        return Err(Error::Config("in-context answers are identical; shuffling cannot corrupt".into()));
    }
    let mut order: Vec<usize> = (0..answers.len()).collect();
    loop {
        order.shuffle(rng);
        if order.iter().enumerate().all(|(i, &j)| answers[i] != answers[j]) {
            break;
        }
    }
    let mut tokens = prompt.tokens.clone();
    for (i, &p) in positions.iter().enumerate() {
        tokens[p] = answers[order[i]];
    }
    Prompt::parse(prompt.format, tokens)
}

fn fv_positions(p: &Prompt, mode: PositionMode) -> Vec<usize> {
    match mode {
        PositionMode::FinalPosition => vec![p.final_position()],
        PositionMode::ThirdItem => example_final_positions(p),
    }
}

/// Change in correct-answer probability on `corrupted` when `site` is
/// overwritten with `values`.
pub fn causal_indirect_effect(model: &Model, corrupted: &Prompt, answer: usize, site: HookSite, values: Tensor) -> Result<f64> {
    let base = answer_probability(model, &corrupted.tokens, answer, &[])?;
    let patched = answer_probability(model, &corrupted.tokens, answer, &[Intervention { site, values: Replacement::Rows(values) }])?;
    Ok(patched - base)
}

/// Average indirect effect of each head's mean clean activation (per rule
/// and per position) patched into answer-shuffled prompts.
pub fn function_vector_aie(model: &Model, prompts: &[RulePrompt], mode: PositionMode, seed: u64, exec: Exec) -> Result<FunctionVectorReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("function-vector prompts".into()));
    }
    let (n_layers, n_heads) = (model.config().n_layers, model.config().n_heads);
    let mut rules: Vec<Rule> = prompts.iter().map(|p| p.rule).collect();
    rules.sort_by_key(|r| r.name());
    rules.dedup();
    let caches = try_map_indexed(exec, prompts.len(), |i| Ok::<_, Error>(model.run_with_cache(&prompts[i].prompt.tokens, &[])?.1))?;
    let mut means: Vec<(Rule, Vec<Tensor>)> = Vec::new();
    for &r in &rules {
        let members: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].rule == r).collect();
        let pos = fv_positions(&prompts[members[0]].prompt, mode);
        if members.iter().any(|&i| fv_positions(&prompts[i].prompt, mode).len() != pos.len()) {
            return Err(Error::Template("prompts of one rule differ in shape".into()));
        }
        let per_head = (0..n_layers * n_heads)
            .map(|k| {
                let (l, h) = (k / n_heads, k % n_heads);
                let d = caches[members[0]].layers[l].heads[h].output.cols();
                let mut acc = vec![0.0; pos.len() * d];
                for &i in &members {
                    let out = &caches[i].layers[l].heads[h].output;
                    for (j, &p) in fv_positions(&prompts[i].prompt, mode).iter().enumerate() {
                        for (a, v) in acc[j * d..(j + 1) * d].iter_mut().zip(out.row(p)) {
                            *a += v / members.len() as f64;
                        }
                    }
                }
                Tensor::new(vec![pos.len(), d], acc)
            })
            .collect::<Result<Vec<_>>>()?;
        means.push((r, per_head));
    }
    let corrupted: Vec<Prompt> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prompts.iter().map(|p| corrupt_prompt(&p.prompt, &mut rng)).collect::<Result<_>>()?
    };
    let per_prompt = try_map_indexed(exec, prompts.len(), |i| {
        let p = &prompts[i];
        let c = &corrupted[i];
        let mean_rows = &means.iter().find(|(r, _)| *r == p.rule).expect("rule present").1;
        let base = answer_probability(model, &c.tokens, p.answer, &[])?;
        let positions = fv_positions(c, mode);
        let mut row = Vec::with_capacity(n_layers * n_heads);
        for (k, rows) in mean_rows.iter().enumerate().take(n_layers * n_heads) {
            let site = HookSite::head(k / n_heads, k % n_heads, positions.clone());
            let iv = Intervention { site, values: Replacement::Rows(rows.clone()) };
            row.push(answer_probability(model, &c.tokens, p.answer, &[iv])? - base);
        }
        Ok::<_, Error>(row)
    })?;
    let aie = (0..n_layers * n_heads)
        .map(|k| rule_balanced_mean(prompts, &per_prompt.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    let n_prompts_per_rule = rules.iter().map(|&r| (r, prompts.iter().filter(|p| p.rule == r).count())).collect();
    Ok(FunctionVectorReport { mode, n_layers, n_heads, aie, n_prompts_per_rule })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStat {
    pub name: String,
    pub r: f64,
    /// Two-sided permutation p-value over head-label shuffles.
    pub p_value: f64,
    pub n_permutations: usize,
}

pub fn score_correlation(name: &str, a: &[f64], b: &[f64], n_permutations: usize, seed: u64, exec: Exec) -> Result<CorrelationStat> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("score matrices have {} and {} heads", a.len(), b.len())));
    }
    let r = pearson(a, b)?;
    let perms = map_indexed(exec, n_permutations, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut shuffled = b.to_vec();
        shuffled.shuffle(&mut rng);
        pearson(a, &shuffled).map(f64::abs).unwrap_or(0.0)
    });
    let hits = perms.iter().filter(|&&x| x >= r.abs() - 1e-12).count();
    Ok(CorrelationStat { name: name.to_string(), r, p_value: (hits + 1) as f64 / (n_permutations + 1) as f64, n_permutations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{build_literal_induction_oracle, build_oracle, LiteralSpec, OracleSpec, ABSTRACTION_HEAD, INDUCTION_HEAD, LITERAL_INDUCTION_HEAD, PREVIOUS_TOKEN_HEAD, RETRIEVAL_HEAD};
    use crate::tasks::IdentityTask;

    fn oracle() -> crate::oracle::Oracle {
        build_oracle(&OracleSpec::default()).unwrap()
    }

    fn rule_prompts(o: &crate::oracle::Oracle, n_per_rule: usize, seed: u64) -> Vec<RulePrompt> {
        let task = IdentityTask::new(&o.vocab, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..n_per_rule {
            for rule in [Rule::Aba, Rule::Abb] {
                let (prompt, a) = task.prompt(&mut rng, rule).unwrap();
                out.push(RulePrompt { rule, prompt, answer: a.tokens[0] });
            }
        }
        out
    }

    fn critical_scores() -> Vec<f64> {
        let mut s = vec![0.0; 12];
        for (k, (l, h)) in [ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD].into_iter().enumerate() {
            s[l * 4 + h] = 10.0 - k as f64;
        }
        s
    }

    #[test]
    fn ranked_ablation_reaches_chance_and_baseline_is_exact() {
        let o = oracle();
        let ps = rule_prompts(&o, 5, 0);
        let r = cumulative_ablation(&o.model, &ps, &critical_scores(), &AblationConfig::new(AblationCondition::Ranked, 3), Exec::Parallel).unwrap();
        let base: Vec<f64> = ps.iter().map(|p| answer_probability(&o.model, &p.prompt.tokens, p.answer, &[]).unwrap()).collect();
        assert_eq!(r.curve[0], rule_balanced_mean(&ps, &base));
        assert!(r.curve[3] <= 1.0 / o.vocab.len() as f64 + 1e-12);
    }

    #[test]
    fn non_critical_heads_do_not_matter() {
        let o = oracle();
        let ps = rule_prompts(&o, 4, 5);
        let mut scores = vec![1.0; 12];
        for (l, h) in [ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD] {
            scores[l * 4 + h] = 0.0;
        }
        for mode in [AblationMode::Zero, AblationMode::Mean] {
            let cfg = AblationConfig { mode, ..AblationConfig::new(AblationCondition::Ranked, 9) };
            let r = cumulative_ablation(&o.model, &ps, &scores, &cfg, Exec::Parallel).unwrap();
            assert!(r.curve.iter().all(|p| (p - r.curve[0]).abs() < 1e-6), "{mode:?} {:?}", r.curve);
        }
    }

    #[test]
    fn mean_ablation_of_critical_heads_hurts() {
        let o = oracle();
        let ps = rule_prompts(&o, 5, 6);
        let cfg = AblationConfig { mode: AblationMode::Mean, ..AblationConfig::new(AblationCondition::Ranked, 3) };
        let r = cumulative_ablation(&o.model, &ps, &critical_scores(), &cfg, Exec::Parallel).unwrap();
        assert!(r.curve[3] < 0.5 * r.curve[0], "{:?}", r.curve);
    }

    #[test]
    fn control_and_random_sets() {
        let scores = critical_scores();
        assert_eq!(ranked_heads(&scores, 4)[..3], [(0, 0), (1, 0), (2, 0)]);
        let c = control_set(&scores, 4, 2);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|&(l, h)| l < 2 && h != 0));
        let o = oracle();
        let ps = rule_prompts(&o, 2, 1);
        let cfg = AblationConfig { seed: 3, ..AblationConfig::new(AblationCondition::Random, 12) };
        let r = cumulative_ablation(&o.model, &ps, &scores, &cfg, Exec::Parallel).unwrap();
        assert_eq!(r.runs.len(), 10);
        assert_eq!(r.curve.len(), 13);
        assert!(r.std[12] < 1e-12 && r.std[0] < 1e-12);
        assert!(cumulative_ablation(&o.model, &ps, &scores, &AblationConfig::new(AblationCondition::Ranked, 13), Exec::Sequential).is_err());
    }

    #[test]
    fn ablating_a_head_twice_equals_once() {
        let o = oracle();
        let p = &rule_prompts(&o, 1, 2)[0];
        let once = ablation_interventions(&[(0, 0)], p.prompt.len(), 4, None);
        let twice = ablation_interventions(&[(0, 0), (0, 0)], p.prompt.len(), 4, None);
        assert_eq!(o.model.run(&p.prompt.tokens, &once).unwrap(), o.model.run(&p.prompt.tokens, &twice).unwrap());
    }

    #[test]
    fn prefix_scores_separate_literal_from_symbolic_heads() {
        let (m, v) = build_literal_induction_oracle(&LiteralSpec::default()).unwrap();
        let s = prefix_matching_score(&m, &v, &PREFIX_SEEDS, Exec::Parallel).unwrap();
        let (l, h) = LITERAL_INDUCTION_HEAD;
        assert!(s[l + h] >= 0.99, "{s:?}");
        let (l, h) = PREVIOUS_TOKEN_HEAD;
        assert!(s[l + h] <= 0.05);
        let o = oracle();
        let s = prefix_matching_score(&o.model, &o.vocab, &PREFIX_SEEDS, Exec::Parallel).unwrap();
        assert!(s.iter().all(|x| (0.0..=1.0).contains(x)));
        for (l, h) in [ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD] {
            assert!(s[l * 4 + h] < 0.1);
        }
    }

    #[test]
    fn prefix_needs_room() {
        let spec = OracleSpec { max_seq_len: 64, saturation_scale: 40.0, ..OracleSpec::default() };
        let o = build_oracle(&spec).unwrap();
        assert!(matches!(prefix_matching_score(&o.model, &o.vocab, &[0], Exec::Sequential), Err(Error::PromptTooLong { .. })));
    }

    #[test]
    fn function_vectors_peak_at_the_expected_heads() {
        let o = oracle();
        let ps = rule_prompts(&o, 10, 3);
        let fin = function_vector_aie(&o.model, &ps, PositionMode::FinalPosition, 0, Exec::Parallel).unwrap();
        assert_eq!(fin.argmax(), INDUCTION_HEAD);
        let third = function_vector_aie(&o.model, &ps, PositionMode::ThirdItem, 0, Exec::Parallel).unwrap();
        assert_eq!(third.argmax(), ABSTRACTION_HEAD);
    }

    #[test]
    fn self_patch_has_zero_indirect_effect() {
        let o = oracle();
        let p = &rule_prompts(&o, 1, 4)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = corrupt_prompt(&p.prompt, &mut rng).unwrap();
        assert_ne!(c.tokens, p.prompt.tokens);
        let (_, cache) = o.model.run_with_cache(&c.tokens, &[]).unwrap();
        for l in 0..3 {
            for h in 0..4 {
                let site = HookSite::head(l, h, vec![c.final_position()]);
                let rows = cache.rows(&site).unwrap();
                assert_eq!(causal_indirect_effect(&o.model, &c, p.answer, site, rows).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn correlation_extremes() {
        let a = [1.0, 3.0, 2.0, 5.0, 4.0, 0.5];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((score_correlation("a", &a, &a, 100, 0, Exec::Sequential).unwrap().r - 1.0).abs() < 1e-12);
        assert!((score_correlation("a", &a, &neg, 100, 0, Exec::Sequential).unwrap().r + 1.0).abs() < 1e-12);
        assert!(score_correlation("a", &a, &[1.0; 6], 10, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn ablation_csv() {
        let r = AblationReport { condition: AblationCondition::Ranked, curve: vec![0.9, 0.1], std: vec![0.0, 0.0], runs: vec![], sets: vec![], orders: vec![] };
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "h,mean_prob,std\n0,0.9,0\n1,0.1,0\n");
    }
}
