//! Causal mediation analysis by activation patching.
//!
//! For a pair (c1, c2) and a set of sites, the activations of c2 at those
//! sites are written into a run of c1, giving the patched run c1*. With
//! `Δf(c) = f(c)[y*] − f(c)[y]` the mediation score is
//! `s = Δf(c1*) − Δf(c1)`.
//!
//! Pairs with several targets (letter strings) patch each target on its own
//! and sum the target scores.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, try_map_indexed, Exec};
use crate::model::{ActivationCache, Component, HookSite, Intervention, Model};
use crate::stats::{mean, quantile, std_dev};
use crate::tasks::{Condition, ContextPair, HeadType, IdentityTask, PatchTarget, Rule};
use crate::train::argmax;

/// Default permutation count and family-wise error level.
pub const DEFAULT_PERMUTATIONS: usize = 5000;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmTrialRecord {
    pub pair_id: usize,
    pub site: HookSite,
    pub delta_f_c1: f64,
    pub delta_f_c1_star: f64,
}

impl CmTrialRecord {
    pub fn score(&self) -> f64 {
        self.delta_f_c1_star - self.delta_f_c1
    }
}

fn check_pair(pair: &ContextPair) -> Result<()> {
    if pair.c1.len() != pair.c2.len() {
        return Err(Error::Pairing(format!("c1 has {} tokens, c2 has {}", pair.c1.len(), pair.c2.len())));
    }
    if pair.targets.is_empty() {
        return Err(Error::Pairing("pair has no targets".into()));
    }
    Ok(())
}

/// `Δf` of one target under the given interventions, reusing `logits` of
/// the same run when both answers are single tokens.
fn target_delta(model: &Model, tokens: &[usize], t: &PatchTarget, logits: &crate::tensor::Tensor, ivs: &[Intervention]) -> Result<f64> {
    if t.y.tokens.len() == 1 && t.y_star.tokens.len() == 1 {
        let row = logits.row(t.readout);
        let get = |a: usize| row.get(a).copied().ok_or(Error::OutOfVocab { token: a, vocab: row.len() });
        return Ok(get(t.y_star.tokens[0])? - get(t.y.tokens[0])?);
    }
    if t.readout + 1 != tokens.len() {
        return Err(Error::Pairing("multi-token answers must be read at the final position".into()));
    }
    let s = model.score_answers(tokens, &[&t.y.tokens, &t.y_star.tokens], ivs)?;
    Ok(s[1] - s[0])
}

fn deltas(model: &Model, tokens: &[usize], targets: &[PatchTarget], ivs: &[Intervention]) -> Result<Vec<f64>> {
    let logits = model.run(tokens, ivs)?;
    targets.iter().map(|t| target_delta(model, tokens, t, &logits, ivs)).collect()
}

/// Unpatched `Δf(c1)` summed over targets, and the c2 cache.
struct PairState {
    clean: f64,
    source: ActivationCache,
}

fn prepare(model: &Model, pair: &ContextPair) -> Result<PairState> {
    check_pair(pair)?;
    let clean = deltas(model, &pair.c1.tokens, &pair.targets, &[])?.iter().sum();
    let (_, source) = model.run_with_cache(&pair.c2.tokens, &[])?;
    Ok(PairState { clean, source })
}

/// Patched `Δf(c1*)` with every target read under one shared patch.
fn patched_shared(model: &Model, pair: &ContextPair, st: &PairState, sites: &[HookSite]) -> Result<f64> {
    let ivs = model.interventions_from(&st.source, sites)?;
    Ok(deltas(model, &pair.c1.tokens, &pair.targets, &ivs)?.iter().sum())
}

/// Patched `Δf(c1*)` with each target patched at its own positions.
fn patched_per_target(model: &Model, pair: &ContextPair, st: &PairState, layer: usize, comp: Component) -> Result<f64> {
    let mut total = 0.0;
    for t in &pair.targets {
        let site = HookSite { layer, component: comp, positions: t.patch_positions.clone() };
        let ivs = model.interventions_from(&st.source, &[site])?;
        total += deltas(model, &pair.c1.tokens, std::slice::from_ref(t), &ivs)?[0];
    }
    Ok(total)
}

/// Mediation score of `sites`, patched from c2 into c1 all at once.
pub fn compute_cm_score(model: &Model, pair: &ContextPair, sites: &[HookSite], pair_id: usize) -> Result<CmTrialRecord> {
    let st = prepare(model, pair)?;
    let star = if sites.is_empty() { st.clean } else { patched_shared(model, pair, &st, sites)? };
    let site = sites.first().cloned().unwrap_or(HookSite::block(0, vec![]));
    Ok(CmTrialRecord { pair_id, site, delta_f_c1: st.clean, delta_f_c1_star: star })
}

/// Mediation score of one component patched at each target's own positions.
pub fn compute_target_cm_score(model: &Model, pair: &ContextPair, layer: usize, comp: Component, pair_id: usize) -> Result<CmTrialRecord> {
    let st = prepare(model, pair)?;
    let star = patched_per_target(model, pair, &st, layer, comp)?;
    Ok(CmTrialRecord { pair_id, site: HookSite { layer, component: comp, positions: pair.patch_positions() }, delta_f_c1: st.clean, delta_f_c1_star: star })
}

/// Pairs whose c1 the model answers correctly at every target.
pub fn filter_correct(model: &Model, pairs: Vec<ContextPair>, exec: Exec) -> Result<Vec<ContextPair>> {
    let keep = try_map_indexed(exec, pairs.len(), |i| {
        let p = &pairs[i];
        let logits = model.run(&p.c1.tokens, &[])?;
        Ok::<_, Error>(p.targets.iter().all(|t| t.y.tokens.len() == 1 && argmax(logits.row(t.readout)) == t.y.tokens[0]))
    })?;
    Ok(pairs.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect())
}

/// `n_per_rule` identity pairs for each of ABA and ABB, interleaved.
pub fn identity_pairs(task: &IdentityTask<'_>, target: HeadType, n_per_rule: usize, seed: u64) -> Result<Vec<ContextPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_rule);
    for _ in 0..n_per_rule {
        for rule in [Rule::Aba, Rule::Abb] {
            out.push(task.pair(&mut rng, rule, target)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    BlockOutput,
    MlpOutput,
}

/// Mean mediation score per (layer, position), BOS excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPositionMap {
    pub kind: SiteKind,
    pub n_layers: usize,
    /// Patched positions, 1..T.
    pub positions: Vec<usize>,
    /// Row-major `n_layers × positions.len()`.
    pub scores: Vec<f64>,
    pub n_pairs: usize,
}

impl LayerPositionMap {
    pub fn get(&self, layer: usize, position: usize) -> f64 {
        let col = self.positions.iter().position(|&p| p == position).expect("scanned position");
        self.scores[layer * self.positions.len() + col]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["layer".to_string()];
        header.extend(self.positions.iter().map(|p| format!("pos{p}")));
        w.write_record(&header)?;
        for l in 0..self.n_layers {
            let mut row = vec![l.to_string()];
            row.extend(self.scores[l * self.positions.len()..(l + 1) * self.positions.len()].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn scan_layer_position(model: &Model, pairs: &[ContextPair], kind: SiteKind, exec: Exec) -> Result<LayerPositionMap> {
    let first = pairs.first().ok_or_else(|| Error::Empty("pairs".into()))?;
    let t = first.c1.len();
    if let Some(p) = pairs.iter().find(|p| p.c1.len() != t || p.c2.len() != t) {
        return Err(Error::Pairing(format!("misaligned prompt lengths: {} vs {t}", p.c1.len())));
    }
    let n_layers = model.config().n_layers;
    let positions: Vec<usize> = (1..t).collect();
    let comp = match kind {
        SiteKind::BlockOutput => Component::BlockOutput,
        SiteKind::MlpOutput => Component::MlpOutput,
    };
    let per_pair = try_map_indexed(exec, pairs.len(), |i| {
        let pair = &pairs[i];
        let st = prepare(model, pair)?;
        let mut row = Vec::with_capacity(n_layers * positions.len());
        for layer in 0..n_layers {
            for &p in &positions {
                let site = HookSite { layer, component: comp, positions: vec![p] };
                row.push(patched_shared(model, pair, &st, &[site])? - st.clean);
            }
        }
        Ok::<_, Error>(row)
    })?;
    let scores = column_means(&per_pair);
    Ok(LayerPositionMap { kind, n_layers, positions, scores, n_pairs: pairs.len() })
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreMatrix {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Row-major layers × heads mean scores.
    pub scores: Vec<f64>,
    pub n_pairs: usize,
    pub condition: Condition,
    pub target_head_type: HeadType,
    /// Patch positions of the first pair; all pairs share the template.
    pub positions: Vec<usize>,
    pub significance_mask: Option<Vec<bool>>,
    pub threshold_epsilon: Option<f64>,
}

impl HeadScoreMatrix {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.n_heads + head]
    }

    pub fn significant(&self, layer: usize, head: usize) -> bool {
        self.significance_mask.as_ref().is_some_and(|m| m[layer * self.n_heads + head])
    }

    /// (layer, head) pairs flagged significant, in row-major order.
    pub fn significant_heads(&self) -> Vec<(usize, usize)> {
        (0..self.scores.len()).filter(|&i| self.significance_mask.as_ref().is_some_and(|m| m[i])).map(|i| (i / self.n_heads, i % self.n_heads)).collect()
    }

    pub fn apply(&mut self, result: &PermutationResult) -> Result<()> {
        if result.mask.len() != self.scores.len() {
            return Err(Error::Dimension("permutation mask does not match the score matrix".into()));
        }
        self.significance_mask = Some(result.mask.clone());
        self.threshold_epsilon = Some(result.threshold_epsilon);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_head_csv(&self.scores, self.n_layers, self.n_heads, out)
    }
}

/// CSV of a row-major layers × heads matrix: a `layer` column then one
/// column per head.
pub fn write_head_csv<W: Write>(values: &[f64], n_layers: usize, n_heads: usize, out: W) -> Result<()> {
    if values.len() != n_layers * n_heads {
        return Err(Error::Dimension(format!("{} values for a {n_layers}×{n_heads} matrix", values.len())));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["layer".to_string()];
    header.extend((0..n_heads).map(|h| format!("head{h}")));
    w.write_record(&header)?;
    for l in 0..n_layers {
        let mut row = vec![l.to_string()];
        row.extend(values[l * n_heads..(l + 1) * n_heads].iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-head mean scores plus every trial record, indexed `[layer·H + head][pair]`.
pub fn scan_heads(model: &Model, pairs: &[ContextPair], exec: Exec) -> Result<(HeadScoreMatrix, Vec<Vec<CmTrialRecord>>)> {
    let first = pairs.first().ok_or_else(|| Error::Empty("pairs".into()))?;
    if pairs.iter().any(|p| p.target_head_type != first.target_head_type || p.condition != first.condition) {
        return Err(Error::Pairing("pairs mix target head types or conditions".into()));
    }
    let (n_layers, n_heads) = (model.config().n_layers, model.config().n_heads);
    let per_pair = try_map_indexed(exec, pairs.len(), |i| {
        let pair = &pairs[i];
        let st = prepare(model, pair)?;
        let mut recs = Vec::with_capacity(n_layers * n_heads);
        for layer in 0..n_layers {
            for h in 0..n_heads {
                let star = patched_per_target(model, pair, &st, layer, Component::HeadOutput(h))?;
                recs.push(CmTrialRecord {
                    pair_id: i,
                    site: HookSite::head(layer, h, pair.patch_positions()),
                    delta_f_c1: st.clean,
                    delta_f_c1_star: star,
                });
            }
        }
        Ok::<_, Error>(recs)
    })?;
    let mut by_head: Vec<Vec<CmTrialRecord>> = vec![Vec::with_capacity(pairs.len()); n_layers * n_heads];
    for recs in per_pair {
        for (k, r) in recs.into_iter().enumerate() {
            by_head[k].push(r);
        }
    }
    let scores = by_head.iter().map(|rs| mean(&rs.iter().map(CmTrialRecord::score).collect::<Vec<_>>())).collect();
    let m = HeadScoreMatrix {
        n_layers,
        n_heads,
        scores,
        n_pairs: pairs.len(),
        condition: first.condition,
        target_head_type: first.target_head_type,
        positions: first.patch_positions(),
        significance_mask: None,
        threshold_epsilon: None,
    };
    Ok((m, by_head))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub q50: f64,
    pub q95: f64,
    pub q99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub n_permutations: usize,
    pub fwer_alpha: f64,
    pub threshold_epsilon: f64,
    pub null_max: NullSummary,
    pub seed: u64,
    /// Observed per-head mean score > ε.
    pub mask: Vec<bool>,
}

/// Max-statistic permutation test. Each permutation swaps `Δf(c1)` and
/// `Δf(c1*)` of every pair with probability ½, which negates its score. A
/// pair is swapped for all heads at once, keeping the dependence between
/// heads. ε is the (1 − α) quantile of the per-permutation maximum over
/// heads of the mean score.
pub fn permutation_test(records: &[Vec<CmTrialRecord>], n_permutations: usize, alpha: f64, seed: u64, exec: Exec) -> Result<PermutationResult> {
    let scores: Vec<Vec<f64>> = records.iter().map(|rs| rs.iter().map(CmTrialRecord::score).collect()).collect();
    permutation_test_scores(&scores, n_permutations, alpha, seed, exec)
}

/// [`permutation_test`] on raw per-head score lists.
pub fn permutation_test_scores(scores: &[Vec<f64>], n_permutations: usize, alpha: f64, seed: u64, exec: Exec) -> Result<PermutationResult> {
    let n_trials = scores.first().map(Vec::len).unwrap_or(0);
    if scores.is_empty() || n_trials == 0 {
        return Err(Error::Empty("permutation records".into()));
    }
    if scores.iter().any(|s| s.len() != n_trials) {
        return Err(Error::Dimension("every head needs the same number of trials".into()));
    }
    if n_permutations == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config("need n_permutations ≥ 1 and 0 < alpha < 1".into()));
    }
    let null: Vec<f64> = map_indexed(exec, n_permutations, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let signs: Vec<f64> = (0..n_trials).map(|_| if rng.random::<bool>() { -1.0 } else { 1.0 }).collect();
        scores
            .iter()
            .map(|s| s.iter().zip(&signs).map(|(v, g)| v * g).sum::<f64>() / n_trials as f64)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let eps = quantile(&null, 1.0 - alpha)?;
    let observed: Vec<f64> = scores.iter().map(|s| mean(s)).collect();
    let mask = observed.iter().map(|&o| o > eps).collect();
    let null_max = NullSummary {
        mean: mean(&null),
        std: std_dev(&null),
        min: null.iter().copied().fold(f64::INFINITY, f64::min),
        max: null.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        q50: quantile(&null, 0.5)?,
        q95: quantile(&null, 0.95)?,
        q99: quantile(&null, 0.99)?,
    };
    Ok(PermutationResult { n_permutations, fwer_alpha: alpha, threshold_epsilon: eps, null_max, seed, mask })
}

/// Fraction of simulated all-null experiments in which any head is flagged.
/// Trial scores are i.i.d. standard normal, symmetric about zero.
pub fn null_false_positive_rate(
    n_experiments: usize,
    n_heads: usize,
    n_trials: usize,
    n_permutations: usize,
    alpha: f64,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let hits = try_map_indexed(exec, n_experiments, |e| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(e as u64);
        let scores: Vec<Vec<f64>> =
            (0..n_heads).map(|_| (0..n_trials).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let r = permutation_test_scores(&scores, n_permutations, alpha, rng.random(), Exec::Sequential)?;
        Ok::<_, Error>(r.mask.iter().any(|&m| m))
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / n_experiments as f64)
}

/// JSON metadata written next to a score CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub condition: Condition,
    pub target_head_type: HeadType,
    pub positions: Vec<usize>,
    pub n_pairs: usize,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub n_permutations: Option<usize>,
    pub seed: u64,
}

impl ScanMetadata {
    pub fn new(m: &HeadScoreMatrix, perm: Option<&PermutationResult>, seed: u64) -> Self {
        Self {
            condition: m.condition,
            target_head_type: m.target_head_type,
            positions: m.positions.clone(),
            n_pairs: m.n_pairs,
            epsilon: perm.map(|p| p.threshold_epsilon),
            alpha: perm.map(|p| p.fwer_alpha),
            n_permutations: perm.map(|p| p.n_permutations),
            seed,
        }
    }
}
