//! Attention maps, representational similarity and linear probes.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, try_map_indexed, Exec};
use crate::model::{HeadCache, Model};
use crate::stats::{cosine, pearson};
use crate::tasks::{Annotation, HeadType, IdentityTask, Prompt, Role, Rule, Vocab, BOS};

/// A head and its aggregation weight.
pub type WeightedHead = ((usize, usize), f64);

/// Weights clipped at zero and normalized to sum to one.
fn normalized(heads: &[WeightedHead]) -> Result<Vec<((usize, usize), f64)>> {
    let total: f64 = heads.iter().map(|(_, w)| w.max(0.0)).sum();
    if heads.is_empty() || total <= 0.0 {
        return Err(Error::Empty("heads with positive weight".into()));
    }
    Ok(heads.iter().map(|&(h, w)| (h, w.max(0.0) / total)).collect())
}

fn check_heads(model: &Model, heads: &[WeightedHead]) -> Result<()> {
    let c = model.config();
    if let Some(((l, h), _)) = heads.iter().find(|((l, h), _)| *l >= c.n_layers || *h >= c.n_heads) {
        return Err(Error::InvalidSite(format!("head ({l}, {h}) outside the model")));
    }
    Ok(())
}

/// Content-item positions of example `ex`, in order.
pub fn item_positions(p: &Prompt, ex: usize) -> Vec<usize> {
    p.annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| a.example_index == Some(ex) && matches!(a.role, Role::A | Role::B | Role::C | Role::Content))
        .map(|(i, _)| i)
        .collect()
}

/// Short label of a template position, e.g. `BOS`, `A0` or `?`.
pub fn template_label(a: &Annotation, token: usize) -> String {
    match (a.role, a.example_index) {
        (Role::Bos, _) => "BOS".into(),
        (Role::QueryBlank, _) => "?".into(),
        (Role::Separator, _) if token == crate::tasks::NEWLINE => "\\n".into(),
        (Role::Separator, _) => "^".into(),
        (r, Some(e)) => format!("{r:?}{e}"),
        (r, None) => format!("{r:?}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub rule: Rule,
    /// T×T row-major, lower-triangular.
    pub values: Vec<f64>,
    pub len: usize,
    pub labels: Vec<String>,
    pub heads: Vec<WeightedHead>,
    /// Annotations of the shared template.
    pub annotations: Vec<Annotation>,
}

impl AttentionMap {
    pub fn get(&self, q: usize, k: usize) -> f64 {
        self.values[q * self.len + k]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_labelled(out, &self.labels, &self.values)
    }
}

fn write_labelled<W: Write>(out: W, labels: &[String], values: &[f64]) -> Result<()> {
    let n = labels.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (i, l) in labels.iter().enumerate() {
        let mut row = vec![l.clone()];
        row.extend(values[i * n..(i + 1) * n].iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Weighted head average of attention patterns, averaged over prompts that
/// share one template.
pub fn aggregate_attention(model: &Model, rule: Rule, prompts: &[Prompt], heads: &[WeightedHead], exec: Exec) -> Result<AttentionMap> {
    let first = prompts.first().ok_or_else(|| Error::Empty("prompts".into()))?;
    check_heads(model, heads)?;
    let roles: Vec<Role> = first.annotations.iter().map(|a| a.role).collect();
    if let Some(p) = prompts.iter().find(|p| p.len() != first.len() || p.annotations.iter().map(|a| a.role).ne(roles.iter().copied())) {
        return Err(Error::Template(format!("prompt of length {} does not share the template", p.len())));
    }
    let w = normalized(heads)?;
    let t = first.len();
    let maps = try_map_indexed(exec, prompts.len(), |i| {
        let (_, cache) = model.run_with_cache(&prompts[i].tokens, &[])?;
        let mut acc = vec![0.0; t * t];
        for &((l, h), wt) in &w {
            for (a, v) in acc.iter_mut().zip(cache.layers[l].heads[h].pattern.data()) {
                *a += wt * v;
            }
        }
        Ok::<_, Error>(acc)
    })?;
    let mut values = vec![0.0; t * t];
    for m in &maps {
        for (a, v) in values.iter_mut().zip(m) {
            *a += v / prompts.len() as f64;
        }
    }
    let labels = first.annotations.iter().zip(&first.tokens).map(|(a, &tok)| template_label(a, tok)).collect();
    Ok(AttentionMap { rule, values, len: t, labels, heads: heads.to_vec(), annotations: first.annotations.clone() })
}

fn rule_pattern(rule: Rule) -> Result<&'static [usize]> {
    rule.pattern().ok_or_else(|| Error::Config(format!("{} has no identity pattern", rule.name())))
}

/// (query, key) cells a head of `head_type` is predicted to attend to.
///
/// Abstraction: each in-context example's last item to the earlier items
/// holding the same variable. Induction: the final position to every
/// in-context example's last item. Retrieval: the final position to the
/// query item holding the answer's variable.
pub fn predicted_cells(map: &AttentionMap, head_type: HeadType) -> Result<Vec<(usize, usize)>> {
    let pattern = rule_pattern(map.rule)?;
    let proto = Prompt { format: crate::tasks::Format::Identity, tokens: vec![BOS; map.len], annotations: map.annotations.clone() };
    let n_ex = proto.n_examples();
    let fin = map.len - 1;
    let last = pattern.len() - 1;
    let mut cells = Vec::new();
    match head_type {
        HeadType::Abstraction => {
            for e in 0..n_ex - 1 {
                let items = item_positions(&proto, e);
                for (i, &v) in pattern[..last].iter().enumerate() {
                    if v == pattern[last] {
                        cells.push((items[last], items[i]));
                    }
                }
            }
        }
        HeadType::SymbolicInduction => {
            for e in 0..n_ex - 1 {
                cells.push((fin, *item_positions(&proto, e).last().expect("items")));
            }
        }
        HeadType::Retrieval => {
            let items = item_positions(&proto, n_ex - 1);
            let i = pattern.iter().position(|&v| v == pattern[last]).expect("pattern");
            cells.push((fin, items[i]));
        }
    }
    Ok(cells)
}

/// Attention on the predicted cells over all non-BOS attention from the
/// predicted query rows.
pub fn attention_prediction_score(map: &AttentionMap, head_type: HeadType) -> Result<f64> {
    let cells = predicted_cells(map, head_type)?;
    let mut rows: Vec<usize> = cells.iter().map(|c| c.0).collect();
    rows.sort_unstable();
    rows.dedup();
    let hit: f64 = cells.iter().map(|&(q, k)| map.get(q, k)).sum();
    let total: f64 = rows.iter().map(|&q| (1..=q).map(|k| map.get(q, k)).sum::<f64>()).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok((hit / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Empirical,
    HypothesisAbstract,
    HypothesisToken,
    HypothesisWithinInstancePosition,
    HypothesisPreviousAbstract,
}

impl SimilarityKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "empirical" => Self::Empirical,
            "abstract" => Self::HypothesisAbstract,
            "token" => Self::HypothesisToken,
            "position" => Self::HypothesisWithinInstancePosition,
            "previous-abstract" => Self::HypothesisPreviousAbstract,
            other => return Err(Error::Config(format!("unknown similarity kind `{other}`"))),
        })
    }
}

/// What an embedding in a similarity matrix stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryLabel {
    pub context: usize,
    pub set: usize,
    pub position: usize,
    /// Token the entry is about: the token itself, or the answer at the final
    /// position.
    pub token: usize,
    /// Variable of the item, or the answer's variable at the final position.
    pub variable: Option<Role>,
    pub within: Option<usize>,
    pub previous_variable: Option<Role>,
}

impl EntryLabel {
    pub fn name(&self) -> String {
        let v = self.variable.map(|r| format!("{r:?}")).unwrap_or_else(|| "-".into());
        format!("c{}s{}p{}{}", self.context, self.set, self.position, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    pub n: usize,
    /// Row-major n×n.
    pub values: Vec<f64>,
    pub labels: Vec<EntryLabel>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Strict lower triangle, row by row.
    pub fn lower_triangle(&self) -> Vec<f64> {
        (0..self.n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let names: Vec<String> = self.labels.iter().map(EntryLabel::name).collect();
        write_labelled(out, &names, &self.values)
    }
}

/// Label of `position` in `p` for similarity analyses.
pub fn entry_label(p: &Prompt, context: usize, set: usize, position: usize) -> Result<EntryLabel> {
    let a = p.annotations.get(position).ok_or_else(|| Error::Undefined(format!("position {position} outside prompt")))?;
    let is_var = |r: Role| matches!(r, Role::A | Role::B | Role::C);
    if a.role == Role::QueryBlank {
        // The answer takes the variable of the in-context examples' last item.
        let last_role = p.annotations[*item_positions(p, 0).last().ok_or_else(|| Error::Undefined("no examples".into()))?].role;
        let query = item_positions(p, p.n_examples() - 1);
        let src = query.iter().find(|&&q| p.annotations[q].role == last_role).copied();
        let token = src.map_or(p.tokens[position], |q| p.tokens[q]);
        let previous_variable = query.last().map(|&q| p.annotations[q].role).filter(|&r| is_var(r));
        return Ok(EntryLabel { context, set, position, token, variable: Some(last_role), within: a.within_example_position, previous_variable });
    }
    let ex = a.example_index;
    let previous_variable = ex.and_then(|e| {
        let items = item_positions(p, e);
        let i = items.iter().position(|&q| q == position)?;
        let prev = items.get(i.checked_sub(1)?)?;
        Some(p.annotations[*prev].role)
    });
    Ok(EntryLabel {
        context,
        set,
        position,
        token: p.tokens[position],
        variable: Some(a.role).filter(|&r| is_var(r)),
        within: a.within_example_position,
        previous_variable,
    })
}

pub fn build_hypothesis_matrix(kind: SimilarityKind, labels: &[EntryLabel]) -> Result<SimilarityMatrix> {
    let same = |a: &EntryLabel, b: &EntryLabel| -> bool {
        match kind {
            SimilarityKind::HypothesisAbstract => a.variable.is_some() && a.variable == b.variable,
            SimilarityKind::HypothesisToken => a.token == b.token,
            SimilarityKind::HypothesisWithinInstancePosition => a.within.is_some() && a.within == b.within,
            SimilarityKind::HypothesisPreviousAbstract => a.previous_variable.is_some() && a.previous_variable == b.previous_variable,
            SimilarityKind::Empirical => false,
        }
    };
    if kind == SimilarityKind::Empirical {
        return Err(Error::Config("empirical is not a hypothesis kind".into()));
    }
    let n = labels.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = if i == j || same(&labels[i], &labels[j]) { 1.0 } else { 0.0 };
        }
    }
    Ok(SimilarityMatrix { kind, n, values, labels: labels.to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadComponent {
    Query,
    Key,
    Value,
    Output,
}

/// Positions read for `component` of a `head_type` head.
///
/// Abstraction: queries and outputs at in-context last items, keys and
/// values at the other in-context items. Induction: values at in-context
/// last items, outputs at the final position, keys and queries at every
/// in-context item (needs a four-item rule). Retrieval: queries and outputs
/// at the final position, keys and values at the query items.
pub fn rsa_positions(p: &Prompt, head_type: HeadType, component: HeadComponent) -> Result<Vec<usize>> {
    let n_ctx = p.n_examples().saturating_sub(1);
    if n_ctx == 0 {
        return Err(Error::Undefined("prompt has no in-context examples".into()));
    }
    let items: Vec<Vec<usize>> = (0..p.n_examples()).map(|e| item_positions(p, e)).collect();
    let lasts: Vec<usize> = items[..n_ctx].iter().filter_map(|v| v.last().copied()).collect();
    let fin = vec![p.final_position()];
    use HeadComponent::*;
    Ok(match (head_type, component) {
        (HeadType::Abstraction, Query | Output) => lasts,
        (HeadType::Abstraction, Key | Value) => items[..n_ctx].iter().flat_map(|v| v[..v.len() - 1].to_vec()).collect(),
        (HeadType::SymbolicInduction, Value) => lasts,
        (HeadType::SymbolicInduction, Output) => fin,
        (HeadType::SymbolicInduction, Key | Query) => {
            if items[0].len() < 4 {
                return Err(Error::Undefined("induction keys and queries need a four-item rule".into()));
            }
            items[..n_ctx].concat()
        }
        (HeadType::Retrieval, Query | Output) => fin,
        (HeadType::Retrieval, Key | Value) => items[n_ctx].clone(),
    })
}

/// Prompts and labelled positions of a similarity design, context-major:
/// every entry of context 0 (over all token sets) precedes context 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub prompts: Vec<Prompt>,
    /// (prompt index, position) per entry.
    pub entries: Vec<(usize, usize)>,
    pub labels: Vec<EntryLabel>,
}

/// `contexts[c][s]` is context `c` instantiated with token set `s`.
pub fn build_design(contexts: &[Vec<Prompt>], head_type: HeadType, component: HeadComponent) -> Result<Design> {
    let mut prompts = Vec::new();
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    for (c, per_set) in contexts.iter().enumerate() {
        for (s, p) in per_set.iter().enumerate() {
            let idx = prompts.len();
            for pos in rsa_positions(p, head_type, component)? {
                entries.push((idx, pos));
                labels.push(entry_label(p, c, s, pos)?);
            }
            prompts.push(p.clone());
        }
    }
    Ok(Design { prompts, entries, labels })
}

/// The four-context design over `token_sets` (each a list of per-example
/// sets for an ABA c1).
pub fn four_context_design(token_sets: &[Vec<Vec<usize>>], vocab: &Vocab, head_type: HeadType, component: HeadComponent) -> Result<Design> {
    let mut contexts: Vec<Vec<Prompt>> = vec![Vec::new(); 4];
    for sets in token_sets {
        let four = crate::tasks::four_contexts(sets, vocab)?;
        for (c, p) in four.into_iter().enumerate() {
            contexts[c].push(p);
        }
    }
    build_design(&contexts, head_type, component)
}

fn component_rows(hc: &HeadCache, c: HeadComponent) -> &crate::tensor::Tensor {
    match c {
        HeadComponent::Query => &hc.q,
        HeadComponent::Key => &hc.k,
        HeadComponent::Value => &hc.v,
        HeadComponent::Output => &hc.output,
    }
}

/// Per-head embeddings of every design entry, `[head][entry]`.
pub fn collect_embeddings(model: &Model, design: &Design, heads: &[WeightedHead], component: HeadComponent, exec: Exec) -> Result<Vec<Vec<Vec<f64>>>> {
    check_heads(model, heads)?;
    let caches = try_map_indexed(exec, design.prompts.len(), |i| {
        let (_, cache) = model.run_with_cache(&design.prompts[i].tokens, &[])?;
        let rows: Vec<Vec<Vec<f64>>> = heads
            .iter()
            .map(|&((l, h), _)| {
                let t = component_rows(&cache.layers[l].heads[h], component);
                (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
            })
            .collect();
        Ok::<_, Error>(rows)
    })?;
    Ok((0..heads.len())
        .map(|k| design.entries.iter().map(|&(pi, pos)| caches[pi][k][pos].clone()).collect())
        .collect())
}

/// Cosine similarity of each head's embeddings, averaged over heads with
/// weights `max(w, 0)`.
pub fn weighted_cosine(per_head: &[Vec<Vec<f64>>], weights: &[f64], labels: &[EntryLabel], exec: Exec) -> Result<SimilarityMatrix> {
    let n = labels.len();
    if per_head.len() != weights.len() || per_head.iter().any(|e| e.len() != n) {
        return Err(Error::Dimension("embeddings do not match labels and weights".into()));
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Empty("heads with positive weight".into()));
    }
    let rows = map_indexed(exec, n, |i| {
        (0..n)
            .map(|j| per_head.iter().zip(weights).map(|(e, w)| w.max(0.0) / total * cosine(&e[i], &e[j])).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    Ok(SimilarityMatrix { kind: SimilarityKind::Empirical, n, values: rows.concat(), labels: labels.to_vec() })
}

pub fn empirical_similarity(model: &Model, design: &Design, heads: &[WeightedHead], component: HeadComponent, exec: Exec) -> Result<SimilarityMatrix> {
    let emb = collect_embeddings(model, design, heads, component, exec)?;
    let w: Vec<f64> = heads.iter().map(|h| h.1).collect();
    weighted_cosine(&emb, &w, &design.labels, exec)
}

/// Pearson r over the strict lower triangles.
pub fn rsa_correlation(empirical: &SimilarityMatrix, hypothesis: &SimilarityMatrix) -> Result<f64> {
    if empirical.n != hypothesis.n || empirical.labels != hypothesis.labels {
        return Err(Error::Dimension("similarity matrices differ in shape or labels".into()));
    }
    pearson(&empirical.lower_triangle(), &hypothesis.lower_triangle())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub features: Vec<f64>,
    pub label: bool,
    /// Content tokens of the source prompt, for the disjointness check.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub sizes: [usize; 3],
    pub token_disjoint: bool,
    /// L2 strength selected on the validation split.
    pub l2: f64,
}

const PROBE_L2: [f64; 5] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1];
const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.5;

struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    fn fit(data: &[ProbeSample], l2: f64) -> Self {
        let d = data[0].features.len();
        let n = data.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|s| s.features[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = data.iter().map(|s| (s.features[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }
            })
            .collect();
        let mut m = Self { mean, scale, w: vec![0.0; d], b: 0.0 };
        let xs: Vec<Vec<f64>> = data.iter().map(|s| m.standardize(&s.features)).collect();
        for _ in 0..PROBE_ITERS {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, s) in xs.iter().zip(data) {
                let err = sigmoid(m.logit_std(x)) - if s.label { 1.0 } else { 0.0 };
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += err * xi / n;
                }
                gb += err / n;
            }
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= PROBE_LR * (g + l2 * *w);
            }
            m.b -= PROBE_LR * gb;
        }
        m
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn logit_std(&self, x: &[f64]) -> f64 {
        self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn accuracy(&self, data: &[ProbeSample]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data.iter().filter(|s| (self.logit_std(&self.standardize(&s.features)) > 0.0) == s.label).count();
        hits as f64 / data.len() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn token_set(samples: &[ProbeSample]) -> std::collections::BTreeSet<usize> {
    samples.iter().flat_map(|s| s.tokens.iter().copied()).collect()
}

/// Logistic probe trained on `train`, L2 selected on `val`, scored on `test`.
/// Refuses splits that share any content token.
pub fn linear_probe(train: &[ProbeSample], val: &[ProbeSample], test: &[ProbeSample]) -> Result<ProbeReport> {
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Empty("probe split".into()));
    }
    let d = train[0].features.len();
    if [train, val, test].iter().any(|s| s.iter().any(|x| x.features.len() != d)) {
        return Err(Error::Dimension("probe features differ in width".into()));
    }
    let (a, b, c) = (token_set(train), token_set(val), token_set(test));
    if !a.is_disjoint(&b) || !a.is_disjoint(&c) || !b.is_disjoint(&c) {
        return Err(Error::NonDisjointSplits("probe splits share content tokens".into()));
    }
    let mut best: Option<(f64, f64, Logistic)> = None;
    for l2 in PROBE_L2 {
        let m = Logistic::fit(train, l2);
        let acc = m.accuracy(val);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, l2, m));
        }
    }
    let (val_accuracy, l2, m) = best.expect("at least one l2");
    Ok(ProbeReport {
        train_accuracy: m.accuracy(train),
        val_accuracy,
        test_accuracy: m.accuracy(test),
        sizes: [train.len(), val.len(), test.len()],
        token_disjoint: true,
        l2,
    })
}

/// Head outputs at in-context last items, labelled true for variable B.
/// Prompts alternate ABA and ABB over `pool`.
pub fn probe_samples(model: &Model, vocab: &Vocab, pool: Vec<usize>, n_prompts: usize, head: (usize, usize), seed: u64, exec: Exec) -> Result<Vec<ProbeSample>> {
    let task = IdentityTask::new(vocab, 2)?.with_pool(pool);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts: Vec<Prompt> = (0..n_prompts)
        .map(|i| Ok(task.prompt(&mut rng, if i % 2 == 0 { Rule::Aba } else { Rule::Abb })?.0))
        .collect::<Result<_>>()?;
    let per = try_map_indexed(exec, prompts.len(), |i| {
        let p = &prompts[i];
        let (_, cache) = model.run_with_cache(&p.tokens, &[])?;
        let out = &cache.layers[head.0].heads[head.1].output;
        let content: Vec<usize> = p.tokens.iter().copied().filter(|&t| t >= crate::tasks::N_RESERVED).collect();
        Ok::<_, Error>(
            crate::tasks::example_final_positions(p)
                .into_iter()
                .map(|pos| ProbeSample { features: out.row(pos).to_vec(), label: p.annotations[pos].role == Role::B, tokens: content.clone() })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per.concat())
}

/// Labels permuted within the split.
pub fn shuffle_labels(samples: &[ProbeSample], seed: u64) -> Vec<ProbeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    labels.shuffle(&mut rng);
    samples.iter().zip(labels).map(|(s, label)| ProbeSample { label, ..s.clone() }).collect()
}

/// Abstract-RSA separately for correct and error trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessRsa {
    pub n_correct: usize,
    pub n_error: usize,
    pub r_correct: Option<f64>,
    pub r_error: Option<f64>,
    /// One-sided permutation p-value of `r_correct − r_error`.
    pub p_value: Option<f64>,
    pub applicable: bool,
}

/// Embeddings of one trial with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialEmbeddings {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<EntryLabel>,
}

fn group_r(sim: &[Vec<f64>], labels: &[EntryLabel], idx: &[usize]) -> Result<f64> {
    let mut e = Vec::new();
    let mut h = Vec::new();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[..a] {
            e.push(sim[i][j]);
            let (x, y) = (&labels[i], &labels[j]);
            h.push(if x.variable.is_some() && x.variable == y.variable { 1.0 } else { 0.0 });
        }
    }
    pearson(&e, &h)
}

/// Compares abstract-RSA between correct and error trials with a label
/// permutation test over trials.
pub fn rsa_by_group(trials: &[TrialEmbeddings], correct: &[bool], n_permutations: usize, seed: u64) -> Result<CorrectnessRsa> {
    if trials.len() != correct.len() {
        return Err(Error::Dimension("one correctness flag per trial".into()));
    }
    let n_correct = correct.iter().filter(|&&c| c).count();
    let n_error = correct.len() - n_correct;
    if n_correct == 0 || n_error == 0 {
        return Ok(CorrectnessRsa { n_correct, n_error, r_correct: None, r_error: None, p_value: None, applicable: false });
    }
    let mut owner = Vec::new();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (t, tr) in trials.iter().enumerate() {
        for (v, l) in tr.vectors.iter().zip(&tr.labels) {
            owner.push(t);
            vectors.push(v.clone());
            labels.push(l.clone());
        }
    }
    let sim: Vec<Vec<f64>> = vectors.iter().map(|a| vectors.iter().map(|b| cosine(a, b)).collect()).collect();
    let diff = |flags: &[bool]| -> Result<(f64, f64)> {
        let pick = |want: bool| -> Vec<usize> { (0..owner.len()).filter(|&i| flags[owner[i]] == want).collect() };
        Ok((group_r(&sim, &labels, &pick(true))?, group_r(&sim, &labels, &pick(false))?))
    };
    let (rc, re) = diff(correct)?;
    let observed = rc - re;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = correct.to_vec();
    let mut at_least = 0usize;
    for _ in 0..n_permutations {
        flags.shuffle(&mut rng);
        let (a, b) = diff(&flags)?;
        if a - b >= observed {
            at_least += 1;
        }
    }
    let p = (at_least + 1) as f64 / (n_permutations + 1) as f64;
    Ok(CorrectnessRsa { n_correct, n_error, r_correct: Some(rc), r_error: Some(re), p_value: Some(p), applicable: true })
}

/// Head-weighted outputs at in-context last items for each prompt, split
/// by whether the model answers it correctly.
pub fn rsa_by_correctness(
    model: &Model,
    prompts: &[(Prompt, usize)],
    heads: &[WeightedHead],
    n_permutations: usize,
    seed: u64,
    exec: Exec,
) -> Result<CorrectnessRsa> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompts".into()));
    }
    check_heads(model, heads)?;
    let w = normalized(heads)?;
    let per = try_map_indexed(exec, prompts.len(), |i| {
        let (p, answer) = &prompts[i];
        let (logits, cache) = model.run_with_cache(&p.tokens, &[])?;
        let ok = crate::train::argmax(logits.row(p.final_position())) == *answer;
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for pos in crate::tasks::example_final_positions(p) {
            let v: Vec<f64> = w.iter().flat_map(|&((l, h), wt)| cache.layers[l].heads[h].output.row(pos).iter().map(move |x| x * wt.sqrt())).collect();
            vectors.push(v);
            labels.push(entry_label(p, 0, i, pos)?);
        }
        Ok::<_, Error>((TrialEmbeddings { vectors, labels }, ok))
    })?;
    let (trials, correct): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    rsa_by_group(&trials, &correct, n_permutations, seed)
}

/// Draws `n` disjoint token-set lists for the four-context design.
pub fn sample_design_sets<R: Rng + ?Sized>(rng: &mut R, vocab: &Vocab, n: usize, n_shots: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    (0..n).map(|_| crate::tasks::sample_token_sets(rng, &vocab.content_ids(), n_shots + 1, 2, |_| true)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{build_oracle, OracleSpec, ABSTRACTION_HEAD, INDUCTION_HEAD, RETRIEVAL_HEAD};

    fn oracle() -> crate::oracle::Oracle {
        build_oracle(&OracleSpec::default()).unwrap()
    }

    fn prompts(o: &crate::oracle::Oracle, rule: Rule, n: usize, seed: u64) -> Vec<Prompt> {
        let task = IdentityTask::new(&o.vocab, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| task.prompt(&mut rng, rule).unwrap().0).collect()
    }

    #[test]
    fn oracle_attention_hits_predicted_cells() {
        let o = oracle();
        for rule in [Rule::Aba, Rule::Abb] {
            let ps = prompts(&o, rule, 10, 0);
            for (head, ty) in [(ABSTRACTION_HEAD, HeadType::Abstraction), (INDUCTION_HEAD, HeadType::SymbolicInduction), (RETRIEVAL_HEAD, HeadType::Retrieval)] {
                let map = aggregate_attention(&o.model, rule, &ps, &[(head, 1.0)], Exec::Parallel).unwrap();
                let s = attention_prediction_score(&map, ty).unwrap();
                assert!(s >= 0.99, "{rule:?} {ty:?}: {s}");
            }
        }
    }

    #[test]
    fn abstraction_predicted_keys_follow_rule() {
        let o = oracle();
        let aba = aggregate_attention(&o.model, Rule::Aba, &prompts(&o, Rule::Aba, 2, 1), &[(ABSTRACTION_HEAD, 1.0)], Exec::Sequential).unwrap();
        assert_eq!(predicted_cells(&aba, HeadType::Abstraction).unwrap(), vec![(5, 1), (11, 7)]);
        let abb = aggregate_attention(&o.model, Rule::Abb, &prompts(&o, Rule::Abb, 2, 1), &[(ABSTRACTION_HEAD, 1.0)], Exec::Sequential).unwrap();
        assert_eq!(predicted_cells(&abb, HeadType::Abstraction).unwrap(), vec![(5, 3), (11, 9)]);
        assert_eq!(predicted_cells(&abb, HeadType::Retrieval).unwrap(), vec![(16, 15)]);
    }

    #[test]
    fn single_head_map_is_its_mean_pattern() {
        let o = oracle();
        let ps = prompts(&o, Rule::Aba, 3, 2);
        let map = aggregate_attention(&o.model, Rule::Aba, &ps, &[((1, 2), 5.0)], Exec::Parallel).unwrap();
        let mut expect = vec![0.0; map.len * map.len];
        for p in &ps {
            let (_, c) = o.model.run_with_cache(&p.tokens, &[]).unwrap();
            for (e, v) in expect.iter_mut().zip(c.layers[1].heads[2].pattern.data()) {
                *e += v / 3.0;
            }
        }
        assert_eq!(map.values, expect);
    }

    #[test]
    fn uniform_map_scores_cell_fraction() {
        let o = oracle();
        let ps = prompts(&o, Rule::Aba, 1, 3);
        let mut map = aggregate_attention(&o.model, Rule::Aba, &ps, &[(RETRIEVAL_HEAD, 1.0)], Exec::Sequential).unwrap();
        let t = map.len;
        for q in 0..t {
            for k in 0..t {
                map.values[q * t + k] = if k <= q { 1.0 / (q + 1) as f64 } else { 0.0 };
            }
        }
        // One predicted cell out of the 16 non-BOS keys of the final row.
        let s = attention_prediction_score(&map, HeadType::Retrieval).unwrap();
        assert!((s - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn template_mismatch_is_rejected() {
        let o = oracle();
        let mut ps = prompts(&o, Rule::Aba, 1, 4);
        ps.extend(prompts(&o, Rule::Abb, 1, 4));
        assert!(matches!(aggregate_attention(&o.model, Rule::Aba, &ps, &[(ABSTRACTION_HEAD, 1.0)], Exec::Sequential), Err(Error::Template(_))));
    }

    fn final_design(vocab: &Vocab, n: usize) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sets = sample_design_sets(&mut rng, vocab, n, 2).unwrap();
        four_context_design(&sets, vocab, HeadType::Retrieval, HeadComponent::Output).unwrap()
    }

    #[test]
    fn hypothesis_matrices_are_symmetric_with_unit_diagonal() {
        let vocab = Vocab::synthetic(64).unwrap();
        let d = final_design(&vocab, 6);
        for kind in [SimilarityKind::HypothesisAbstract, SimilarityKind::HypothesisToken, SimilarityKind::HypothesisWithinInstancePosition, SimilarityKind::HypothesisPreviousAbstract] {
            let m = build_hypothesis_matrix(kind, &d.labels).unwrap();
            for i in 0..m.n {
                assert_eq!(m.get(i, i), 1.0);
                for j in 0..m.n {
                    assert_eq!(m.get(i, j), m.get(j, i));
                    assert!(m.get(i, j) == 0.0 || m.get(i, j) == 1.0);
                }
            }
        }
        assert!(build_hypothesis_matrix(SimilarityKind::Empirical, &d.labels).is_err());
    }

    #[test]
    fn rsa_of_identical_and_complementary_matrices() {
        let vocab = Vocab::synthetic(64).unwrap();
        let d = final_design(&vocab, 4);
        let h = build_hypothesis_matrix(SimilarityKind::HypothesisAbstract, &d.labels).unwrap();
        assert!((rsa_correlation(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        let mut inv = h.clone();
        for (i, v) in inv.values.iter_mut().enumerate() {
            if i / h.n != i % h.n {
                *v = 1.0 - *v;
            }
        }
        assert!((rsa_correlation(&inv, &h).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_outputs_match_their_hypotheses() {
        let o = oracle();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sets = sample_design_sets(&mut rng, &o.vocab, 10, 2).unwrap();
        let cases = [
            (ABSTRACTION_HEAD, HeadType::Abstraction, SimilarityKind::HypothesisAbstract),
            (INDUCTION_HEAD, HeadType::SymbolicInduction, SimilarityKind::HypothesisAbstract),
            (RETRIEVAL_HEAD, HeadType::Retrieval, SimilarityKind::HypothesisToken),
        ];
        for (head, ty, kind) in cases {
            let d = four_context_design(&sets, &o.vocab, ty, HeadComponent::Output).unwrap();
            let emp = empirical_similarity(&o.model, &d, &[(head, 1.0)], HeadComponent::Output, Exec::Parallel).unwrap();
            let r = rsa_correlation(&emp, &build_hypothesis_matrix(kind, &d.labels).unwrap()).unwrap();
            assert!(r > 0.9, "{ty:?}: {r}");
        }
    }

    #[test]
    fn similarity_is_scale_invariant_and_all_ones_for_identical_embeddings() {
        let vocab = Vocab::synthetic(64).unwrap();
        let d = final_design(&vocab, 2);
        let n = d.labels.len();
        let same = vec![vec![vec![0.3, -1.0, 2.0]; n]];
        let m = weighted_cosine(&same, &[1.0], &d.labels, Exec::Sequential).unwrap();
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let emb: Vec<Vec<Vec<f64>>> = vec![(0..n).map(|i| vec![i as f64, 1.0, (i * i) as f64 - 3.0]).collect()];
        let scaled: Vec<Vec<Vec<f64>>> = vec![emb[0].iter().map(|v| v.iter().map(|x| 7.5 * x).collect()).collect()];
        let a = weighted_cosine(&emb, &[1.0], &d.labels, Exec::Sequential).unwrap();
        let b = weighted_cosine(&scaled, &[1.0], &d.labels, Exec::Sequential).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn induction_keys_need_four_item_rules() {
        let o = oracle();
        let p = prompts(&o, Rule::Aba, 1, 7).remove(0);
        assert!(matches!(rsa_positions(&p, HeadType::SymbolicInduction, HeadComponent::Key), Err(Error::Undefined(_))));
    }

    fn split_pools(vocab: &Vocab) -> [Vec<usize>; 3] {
        let c = vocab.content_ids();
        [c[..22].to_vec(), c[22..42].to_vec(), c[42..].to_vec()]
    }

    #[test]
    fn probe_decodes_oracle_variables_and_not_shuffled_labels() {
        let o = oracle();
        let [a, b, c] = split_pools(&o.vocab);
        let train = probe_samples(&o.model, &o.vocab, a, 200, ABSTRACTION_HEAD, 0, Exec::Parallel).unwrap();
        let val = probe_samples(&o.model, &o.vocab, b, 100, ABSTRACTION_HEAD, 1, Exec::Parallel).unwrap();
        let test = probe_samples(&o.model, &o.vocab, c, 200, ABSTRACTION_HEAD, 2, Exec::Parallel).unwrap();
        let r = linear_probe(&train, &val, &test).unwrap();
        assert!(r.test_accuracy >= 0.99);
        let r = linear_probe(&shuffle_labels(&train, 3), &shuffle_labels(&val, 4), &shuffle_labels(&test, 5)).unwrap();
        let (lo, hi) = crate::stats::wilson_ci((r.test_accuracy * 400.0).round() as usize, 400);
        assert!(lo <= 0.5 + 0.1 && hi >= 0.5 - 0.1, "{r:?}");
    }

    #[test]
    fn overlapping_probe_splits_are_refused() {
        let s = ProbeSample { features: vec![1.0], label: true, tokens: vec![9] };
        assert!(matches!(linear_probe(std::slice::from_ref(&s), std::slice::from_ref(&s), std::slice::from_ref(&s)), Err(Error::NonDisjointSplits(_))));
    }

    #[test]
    fn oracle_has_no_error_group() {
        let o = oracle();
        let task = IdentityTask::new(&o.vocab, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps: Vec<(Prompt, usize)> = (0..10)
            .map(|i| {
                let (p, a) = task.prompt(&mut rng, if i % 2 == 0 { Rule::Aba } else { Rule::Abb }).unwrap();
                (p, a.tokens[0])
            })
            .collect();
        let r = rsa_by_correctness(&o.model, &ps, &[(ABSTRACTION_HEAD, 1.0)], 100, 0, Exec::Parallel).unwrap();
        assert!(!r.applicable && r.n_error == 0 && r.r_error.is_none());
    }

    #[test]
    fn noisier_error_trials_are_detected() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut trials = Vec::new();
        let mut correct = Vec::new();
        for t in 0..60 {
            let ok = t % 2 == 0;
            let noise = Normal::new(0.0, if ok { 0.2 } else { 1.5 }).unwrap();
            let mut vectors = Vec::new();
            let mut labels = Vec::new();
            for (k, role) in [Role::A, Role::B].into_iter().enumerate() {
                let base = if role == Role::A { [1.0, 0.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0, 0.0] };
                vectors.push(base.iter().map(|b| b + noise.sample(&mut rng)).collect());
                labels.push(EntryLabel { context: 0, set: t, position: k, token: k, variable: Some(role), within: None, previous_variable: None });
            }
            trials.push(TrialEmbeddings { vectors, labels });
            correct.push(ok);
        }
        let r = rsa_by_group(&trials, &correct, 200, 1).unwrap();
        assert!(r.r_correct.unwrap() > r.r_error.unwrap());
        assert!(r.p_value.unwrap() < 0.05);
    }

    #[test]
    fn csv_has_label_header() {
        let m = SimilarityMatrix {
            kind: SimilarityKind::Empirical,
            n: 1,
            values: vec![1.0],
            labels: vec![EntryLabel { context: 0, set: 1, position: 5, token: 9, variable: Some(Role::A), within: Some(4), previous_variable: None }],
        };
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), ",c0s1p5A\nc0s1p5A,1\n");
    }
}
