//! Decoder-only transformer with activation caching and patching.
//!
//! Every layer is pre-norm:
//!
//! ```text
//! h         = norm1(x)
//! z_h       = softmax(causal(q_h k_hᵀ / sqrt(d_head))) v_h      per head
//! attn_out  = concat(z_h) W_o
//! mlp_out   = gelu(norm2(x + attn_out) W_in + b_in) W_out + b_out
//! block_out = attn_out + mlp_out
//! x'        = x + block_out
//! ```
//!
//! Hook sites are `z_h` (the per-head output before `W_o`), `mlp_out` and
//! `block_out`. Replacing a site only replaces that sublayer output; the
//! incoming residual `x` is left alone.
//!
//! Parameter names, with `d = d_model`, `V = vocab_size`:
//!
//! | key | shape |
//! |---|---|
//! | `embed` | V×d |
//! | `pos` (learned absolute positions only) | max_seq_len×d |
//! | `layer.{i}.ln1`, `layer.{i}.ln2` (RMS norm only) | d |
//! | `layer.{i}.attn.q`, `.k`, `.v`, `.o` | d×d |
//! | `layer.{i}.mlp.in` / `layer.{i}.mlp.in_bias` | d×d_mlp / d_mlp |
//! | `layer.{i}.mlp.out` / `layer.{i}.mlp.out_bias` | d_mlp×d / d |
//! | `ln_final` (RMS norm only) | d |
//! | `unembed` | d×V |

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_at, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    LearnedAbsolute,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
    /// Identity normalization. Used by hand-wired models whose residual
    /// geometry must be read off exactly.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pos_encoding: PosEncoding,
    pub norm: NormKind,
    pub rotary_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The toy configuration trained on identity rules.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size,
            max_seq_len: 128,
            pos_encoding: PosEncoding::Rotary,
            norm: NormKind::Rms,
            rotary_base: 10000.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads × d_head = {} but d_model = {}",
                self.n_heads * self.d_head,
                self.d_model
            )));
        }
        if self.pos_encoding == PosEncoding::Rotary && !self.d_head.is_multiple_of(2) {
            return Err(Error::Config("rotary positions need an even d_head".into()));
        }
        if !(self.rotary_base > 0.0 && self.rotary_base.is_finite()) {
            return Err(Error::Config("rotary_base must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (self.d_model, self.vocab_size);
        let rms = self.norm == NormKind::Rms;
        let mut out = vec![("embed".to_string(), vec![v, d])];
        if self.pos_encoding == PosEncoding::LearnedAbsolute {
            out.push(("pos".into(), vec![self.max_seq_len, d]));
        }
        for i in 0..self.n_layers {
            if rms {
                out.push((format!("layer.{i}.ln1"), vec![d]));
            }
            for m in ["q", "k", "v", "o"] {
                out.push((format!("layer.{i}.attn.{m}"), vec![d, d]));
            }
            if rms {
                out.push((format!("layer.{i}.ln2"), vec![d]));
            }
            out.push((format!("layer.{i}.mlp.in"), vec![d, self.d_mlp]));
            out.push((format!("layer.{i}.mlp.in_bias"), vec![self.d_mlp]));
            out.push((format!("layer.{i}.mlp.out"), vec![self.d_mlp, d]));
            out.push((format!("layer.{i}.mlp.out_bias"), vec![d]));
        }
        if rms {
            out.push(("ln_final".into(), vec![d]));
        }
        out.push(("unembed".into(), vec![d, v]));
        out
    }
}

/// Which activation a hook site addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Per-head attention output before the output projection.
    HeadOutput(usize),
    /// `attn_out + mlp_out` of a layer.
    BlockOutput,
    MlpOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub component: Component,
    pub positions: Vec<usize>,
}

impl HookSite {
    pub fn head(layer: usize, head: usize, positions: Vec<usize>) -> Self {
        Self { layer, component: Component::HeadOutput(head), positions }
    }

    pub fn block(layer: usize, positions: Vec<usize>) -> Self {
        Self { layer, component: Component::BlockOutput, positions }
    }

    pub fn mlp(layer: usize, positions: Vec<usize>) -> Self {
        Self { layer, component: Component::MlpOutput, positions }
    }
}

/// Values written at a hook site.
#[derive(Debug, Clone, PartialEq)]
pub enum Replacement {
    /// One row per listed position.
    Rows(Tensor),
    Zero,
}

/// A concrete replacement applied during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub site: HookSite,
    pub values: Replacement,
}

impl Intervention {
    pub fn zero(site: HookSite) -> Self {
        Self { site, values: Replacement::Zero }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    /// Queries after any rotary rotation, T×d_head.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// T×T, lower-triangular rows summing to 1.
    pub pattern: Tensor,
    /// T×d_head, before the output projection.
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub heads: Vec<HeadCache>,
    pub attn_out: Tensor,
    pub mlp_output: Tensor,
    pub block_output: Tensor,
    pub residual_post: Tensor,
}

/// Activations of one forward pass over a single prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub tokens: Vec<usize>,
    /// Residual stream after token and position embedding.
    pub embed: Tensor,
    pub layers: Vec<LayerCache>,
}

impl ActivationCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The full T-row activation addressed by `site`'s layer and component.
    pub fn site(&self, layer: usize, component: Component) -> Result<&Tensor> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidSite(format!("layer {layer} not cached")))?;
        Ok(match component {
            Component::HeadOutput(h) => {
                &l.heads.get(h).ok_or_else(|| Error::InvalidSite(format!("head {h} not cached")))?.output
            }
            Component::BlockOutput => &l.block_output,
            Component::MlpOutput => &l.mlp_output,
        })
    }

    /// Rows of `site` at its positions.
    pub fn rows(&self, site: &HookSite) -> Result<Tensor> {
        let t = self.site(site.layer, site.component)?;
        let mut data = Vec::with_capacity(site.positions.len() * t.cols());
        for &p in &site.positions {
            if p >= t.rows() {
                return Err(Error::InvalidSite(format!("position {p} outside cached length {}", t.rows())));
            }
            data.extend_from_slice(t.row(p));
        }
        Tensor::new(vec![site.positions.len(), t.cols()], data)
    }
}

/// Graph handles produced by [`Model::build`].
pub struct GraphForward {
    /// `(B·T)×V` logits, sequences stacked in batch order.
    pub logits: Var,
    /// One leaf per parameter, in canonical order.
    pub params: Vec<Var>,
    recorded: Option<Recorded>,
}

struct RecordedHead {
    q: Var,
    k: Var,
    v: Var,
    pattern: Var,
    output: Var,
}

struct RecordedLayer {
    heads: Vec<RecordedHead>,
    attn_out: Var,
    mlp_output: Var,
    block_output: Var,
    residual_post: Var,
}

struct Recorded {
    embed: Var,
    layers: Vec<RecordedLayer>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Random initialization: N(0, 0.02) matrices, unit norm gains, zero
    /// biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        Self::init_with_std(config, 0.02)
    }

    /// [`Model::init`] with matrices drawn from N(0, std²).
    pub fn init_with_std(config: ModelConfig, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bad_std = || Error::Config(format!("init std must be finite and non-negative, got {std}"));
        if !(std.is_finite() && std >= 0.0) {
            return Err(bad_std());
        }
        let normal = Normal::new(0.0, std).map_err(|_| bad_std())?;
        let mut map = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("ln1") || name.ends_with("ln2") || name == "ln_final" {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            map.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_params(config, map)
    }

    /// Builds a model from named tensors. The key set must match
    /// [`ModelConfig::param_shapes`] exactly.
    pub fn from_params(config: ModelConfig, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        let mut index = HashMap::new();
        for (i, (name, shape)) in shapes.into_iter().enumerate() {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            index.insert(name.clone(), i);
            names.push(name);
            params.push(Arc::new(t));
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config, names, params, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &*self.params[i])
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.params.iter().map(|p| &**p))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Mutable access to parameter storage, in canonical order. Only
    /// callable while no graph holds the weights.
    pub(crate) fn param_data_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|p| Arc::make_mut(p).data_mut()).collect()
    }

    fn p(&self, name: &str) -> usize {
        self.index[name]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("prompt".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::PromptTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfVocab { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn check_site(&self, site: &HookSite, len: usize) -> Result<()> {
        if site.layer >= self.config.n_layers {
            return Err(Error::InvalidSite(format!(
                "layer {} of a {}-layer model",
                site.layer, self.config.n_layers
            )));
        }
        if let Component::HeadOutput(h) = site.component {
            if h >= self.config.n_heads {
                return Err(Error::InvalidSite(format!("head {h} of {}", self.config.n_heads)));
            }
        }
        if let Some(&p) = site.positions.iter().find(|&&p| p >= len) {
            return Err(Error::InvalidSite(format!("position {p} in a prompt of length {len}")));
        }
        Ok(())
    }

    fn norm(&self, g: &mut Graph, x: Var, gain: Option<Var>) -> Result<Var> {
        match self.config.norm {
            NormKind::Rms => g.rms_norm(x, gain),
            NormKind::None => Ok(x),
        }
    }

    fn apply(
        &self,
        g: &mut Graph,
        x: Var,
        layer: usize,
        matches: impl Fn(Component) -> bool,
        interventions: &[Intervention],
    ) -> Result<Var> {
        let mut x = x;
        for iv in interventions.iter().filter(|iv| iv.site.layer == layer && matches(iv.site.component)) {
            let width = g.value(x).cols();
            let rows = match &iv.values {
                Replacement::Rows(t) => t.clone(),
                Replacement::Zero => Tensor::zeros(&[iv.site.positions.len(), width]),
            };
            x = g.replace_rows(x, &iv.site.positions, &rows)?;
        }
        Ok(x)
    }

    /// Records the forward pass over a batch of equal-length sequences in
    /// `g`. Interventions require a batch of one.
    pub fn build(
        &self,
        g: &mut Graph,
        batch: &[&[usize]],
        track_grads: bool,
        interventions: &[Intervention],
        record: bool,
    ) -> Result<GraphForward> {
        let cfg = &self.config;
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("batch".into()));
        }
        let t = batch[0].len();
        for seq in batch {
            self.check_tokens(seq)?;
            if seq.len() != t {
                return Err(Error::Dimension("batch sequences differ in length".into()));
            }
        }
        if !interventions.is_empty() && b != 1 {
            return Err(Error::Config("interventions need a batch of one".into()));
        }
        for iv in interventions {
            self.check_site(&iv.site, t)?;
            if let Replacement::Rows(r) = &iv.values {
                let width = match iv.site.component {
                    Component::HeadOutput(_) => cfg.d_head,
                    _ => cfg.d_model,
                };
                if r.shape() != [iv.site.positions.len(), width] {
                    return Err(Error::Dimension(format!(
                        "replacement of shape {:?} for {} positions of width {width}",
                        r.shape(),
                        iv.site.positions.len()
                    )));
                }
            }
        }

        let params: Vec<Var> = self.params.iter().map(|p| g.shared(Arc::clone(p), track_grads)).collect();
        let pv = |name: &str| params[self.p(name)];
        let gain = |name: &str| self.index.get(name).map(|&i| params[i]);

        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let mut x = g.embedding(pv("embed"), &ids)?;
        if cfg.pos_encoding == PosEncoding::LearnedAbsolute {
            let pe = g.embedding(pv("pos"), &positions)?;
            x = g.add(x, pe)?;
        }
        let embed = x;
        let (nh, dh) = (cfg.n_heads, cfg.d_head);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let h = self.norm(g, x, gain(&format!("layer.{l}.ln1")))?;
            let mut q = g.matmul(h, pv(&format!("layer.{l}.attn.q")))?;
            let mut k = g.matmul(h, pv(&format!("layer.{l}.attn.k")))?;
            let v = g.matmul(h, pv(&format!("layer.{l}.attn.v")))?;
            if cfg.pos_encoding == PosEncoding::Rotary {
                q = g.rotary(q, &positions, cfg.rotary_base, dh)?;
                k = g.rotary(k, &positions, cfg.rotary_base, dh)?;
            }
            let mut parts = Vec::with_capacity(b * nh);
            let mut heads = Vec::new();
            for s in 0..b {
                for hd in 0..nh {
                    let qh = g.block(q, s * t, t, hd * dh, dh)?;
                    let kh = g.block(k, s * t, t, hd * dh, dh)?;
                    let vh = g.block(v, s * t, t, hd * dh, dh)?;
                    let scores = g.matmul_t(qh, kh)?;
                    let scores = g.scale(scores, inv_sqrt)?;
                    let pattern = g.causal_softmax(scores)?;
                    let z = g.matmul(pattern, vh)?;
                    let z = self.apply(g, z, l, |c| c == Component::HeadOutput(hd), interventions)?;
                    if record {
                        heads.push(RecordedHead { q: qh, k: kh, v: vh, pattern, output: z });
                    }
                    parts.push((z, s * t, hd * dh));
                }
            }
            let z = g.assemble(&parts, b * t, cfg.d_model)?;
            let attn_out = g.matmul(z, pv(&format!("layer.{l}.attn.o")))?;
            let mid = g.add(x, attn_out)?;
            let h2 = self.norm(g, mid, gain(&format!("layer.{l}.ln2")))?;
            let pre = g.matmul(h2, pv(&format!("layer.{l}.mlp.in")))?;
            let pre = g.add_bias(pre, pv(&format!("layer.{l}.mlp.in_bias")))?;
            let act = g.gelu(pre)?;
            let mlp = g.matmul(act, pv(&format!("layer.{l}.mlp.out")))?;
            let mlp = g.add_bias(mlp, pv(&format!("layer.{l}.mlp.out_bias")))?;
            let mlp = self.apply(g, mlp, l, |c| c == Component::MlpOutput, interventions)?;
            let block = g.add(attn_out, mlp)?;
            let block = self.apply(g, block, l, |c| c == Component::BlockOutput, interventions)?;
            x = g.add(x, block)?;
            if record {
                layers.push(RecordedLayer {
                    heads,
                    attn_out,
                    mlp_output: mlp,
                    block_output: block,
                    residual_post: x,
                });
            }
        }
        let xf = self.norm(g, x, gain("ln_final"))?;
        let logits = g.matmul(xf, pv("unembed"))?;
        Ok(GraphForward { logits, params, recorded: record.then_some(Recorded { embed, layers }) })
    }

    fn extract_cache(g: &Graph, tokens: &[usize], rec: Recorded) -> ActivationCache {
        let val = |v: Var| g.value(v).clone();
        ActivationCache {
            tokens: tokens.to_vec(),
            embed: val(rec.embed),
            layers: rec
                .layers
                .into_iter()
                .map(|l| LayerCache {
                    heads: l
                        .heads
                        .into_iter()
                        .map(|h| HeadCache {
                            q: val(h.q),
                            k: val(h.k),
                            v: val(h.v),
                            pattern: val(h.pattern),
                            output: val(h.output),
                        })
                        .collect(),
                    attn_out: val(l.attn_out),
                    mlp_output: val(l.mlp_output),
                    block_output: val(l.block_output),
                    residual_post: val(l.residual_post),
                })
                .collect(),
        }
    }

    /// Logits at every position, T×V, under the given interventions.
    pub fn run(&self, tokens: &[usize], interventions: &[Intervention]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.build(&mut g, &[tokens], false, interventions, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Like [`Model::run`] and also returns the activation cache.
    pub fn run_with_cache(&self, tokens: &[usize], interventions: &[Intervention]) -> Result<(Tensor, ActivationCache)> {
        let mut g = Graph::new();
        let mut out = self.build(&mut g, &[tokens], false, interventions, true)?;
        let rec = out.recorded.take().expect("recorded");
        let cache = Self::extract_cache(&g, tokens, rec);
        Ok((g.value(out.logits).clone(), cache))
    }

    /// Logits at the final position.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let logits = self.run(tokens, &[])?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    pub fn forward_with_cache(&self, tokens: &[usize]) -> Result<(Vec<f64>, ActivationCache)> {
        let (logits, cache) = self.run_with_cache(tokens, &[])?;
        Ok((logits.row(logits.rows() - 1).to_vec(), cache))
    }

    /// Interventions that copy `source`'s activations at `sites`.
    pub fn interventions_from(&self, source: &ActivationCache, sites: &[HookSite]) -> Result<Vec<Intervention>> {
        sites
            .iter()
            .map(|site| {
                self.check_site(site, source.len())?;
                Ok(Intervention { site: site.clone(), values: Replacement::Rows(source.rows(site)?) })
            })
            .collect()
    }

    /// Final-position logits of `tokens` with `sites` overwritten from
    /// `source`, which must come from a prompt of the same length.
    pub fn forward_with_patch(&self, tokens: &[usize], source: &ActivationCache, sites: &[HookSite]) -> Result<Vec<f64>> {
        if tokens.len() != source.len() {
            return Err(Error::Pairing(format!(
                "patch target has {} tokens, source cache {}",
                tokens.len(),
                source.len()
            )));
        }
        let ivs = self.interventions_from(source, sites)?;
        let logits = self.run(tokens, &ivs)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    /// Scores each answer continuation of `prompt`.
    ///
    /// When every answer is a single token the score is that token's raw
    /// final-position logit. Otherwise every answer is scored by its summed
    /// teacher-forced log probability, so that the scores stay comparable.
    pub fn score_answers(&self, prompt: &[usize], answers: &[&[usize]], interventions: &[Intervention]) -> Result<Vec<f64>> {
        if answers.iter().any(|a| a.is_empty()) {
            return Err(Error::Empty("answer".into()));
        }
        if answers.iter().all(|a| a.len() == 1) {
            let logits = self.run(prompt, interventions)?;
            let last = logits.row(logits.rows() - 1);
            return answers
                .iter()
                .map(|a| {
                    last.get(a[0]).copied().ok_or(Error::OutOfVocab { token: a[0], vocab: last.len() })
                })
                .collect();
        }
        answers
            .iter()
            .map(|a| {
                let mut seq = prompt.to_vec();
                seq.extend_from_slice(&a[..a.len() - 1]);
                let logits = self.run(&seq, interventions)?;
                answer_log_prob(&logits, prompt.len(), a)
            })
            .collect()
    }
}

/// Summed log probability of `answer` given T×V teacher-forced logits whose
/// first `prompt_len` rows belong to the prompt.
pub fn answer_log_prob(logits: &Tensor, prompt_len: usize, answer: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (j, &tok) in answer.iter().enumerate() {
        let row = logits.row(prompt_len - 1 + j);
        if tok >= row.len() {
            return Err(Error::OutOfVocab { token: tok, vocab: row.len() });
        }
        total += log_softmax_at(row, tok);
    }
    Ok(total)
}
