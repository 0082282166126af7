//! Hand-wired transformers with known mechanisms.
//!
//! [`build_oracle`] wires a three-layer model that solves 2-shot (or
//! n-shot) identity rules in three steps:
//!
//! 1. Head (0, 0), abstraction. Each content token attends to the earliest
//!    position of its own example holding the same token and writes a
//!    symbol: `A` if that position is the first item, `B` if it is the
//!    second. The value reads only the within-example slot, never the token.
//! 2. Head (1, 0), symbolic induction. The final position attends to the
//!    last item of every in-context example and copies the symbol there
//!    into a "predicted symbol" subspace.
//! 3. Head (2, 0), retrieval. The final position attends to the query item
//!    whose bound symbol matches the prediction and copies its token
//!    identity to an output subspace read by the unembedding.
//!
//! The remaining heads of each layer are distractors that write into a
//! junk subspace nothing reads. Every head can fall back on BOS when no
//! intended key exists, so unmatched queries produce a zero output.
//!
//! Residual features live in disjoint one-hot blocks (see [`Layout`]).
//! Attention logits are integer "units" times `saturation_scale`, and every
//! intended key wins by at least one unit.
//!
//! [`build_literal_induction_oracle`] wires a two-layer previous-token plus
//! token-induction circuit.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, NormKind, PosEncoding};
use crate::tasks::{Vocab, BOS, N_RESERVED};
use crate::tensor::Tensor;

/// (layer, head) of the abstraction head.
pub const ABSTRACTION_HEAD: (usize, usize) = (0, 0);
/// (layer, head) of the symbolic induction head.
pub const INDUCTION_HEAD: (usize, usize) = (1, 0);
/// (layer, head) of the retrieval head.
pub const RETRIEVAL_HEAD: (usize, usize) = (2, 0);

/// Items, separators and newline of one identity-rule example.
const SLOTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub alphabet_size: usize,
    /// In-context examples before the query.
    pub n_incontext: usize,
    pub n_heads: usize,
    /// Multiplier from score units to attention logits.
    pub saturation_scale: f64,
    /// Logit assigned to the retrieved token.
    pub logit_scale: f64,
    pub max_seq_len: usize,
    /// Requested d_model; `None` sizes the model to fit the layout.
    pub d_model: Option<usize>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            alphabet_size: 64,
            n_incontext: 2,
            n_heads: 4,
            saturation_scale: 40.0,
            logit_scale: 20.0,
            max_seq_len: 128,
            d_model: None,
        }
    }
}

impl OracleSpec {
    fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 || self.n_incontext == 0 || self.n_heads == 0 || self.max_seq_len < 2 {
            return Err(Error::Config("oracle needs ≥2 tokens, ≥1 in-context example, ≥1 head".into()));
        }
        // One unit of margin must push every competitor below 1e-6 in total.
        let needed = (self.max_seq_len as f64 / 1e-6).ln();
        if self.saturation_scale.is_nan() || self.saturation_scale < needed {
            return Err(Error::Config(format!(
                "saturation_scale {} is below {needed:.2}, the minimum for ≥ 1−1e-6 attention on targets",
                self.saturation_scale
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        Ok(())
    }

    /// Token count of an identity prompt of this shape.
    pub fn template_len(&self) -> usize {
        1 + SLOTS * self.n_incontext + 4
    }
}

/// Offsets of the residual-stream feature blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub one: usize,
    pub bos: usize,
    pub tok: Range<usize>,
    pub slot: Range<usize>,
    pub example: Range<usize>,
    pub sym: Range<usize>,
    pub pred: Range<usize>,
    pub out: Range<usize>,
    pub junk: Range<usize>,
}

impl Layout {
    fn new(vocab: usize, examples: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let one = take(1).start;
        let bos = take(1).start;
        Self {
            one,
            bos,
            tok: take(vocab),
            slot: take(SLOTS),
            example: take(examples),
            sym: take(2),
            pred: take(2),
            out: take(vocab),
            junk: take(4),
        }
    }

    pub fn width(&self) -> usize {
        self.junk.end
    }
}

/// A hand-wired model with its vocabulary.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub model: Model,
    pub vocab: Vocab,
    pub spec: OracleSpec,
    pub layout: Layout,
}

struct Weights {
    map: BTreeMap<String, Tensor>,
}

impl Weights {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self { map: cfg.param_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect() }
    }

    fn set(&mut self, name: &str, r: usize, c: usize, v: f64) {
        let t = self.map.get_mut(name).expect("known parameter");
        let cols = t.shape()[1];
        t.data_mut()[r * cols + c] = v;
    }
}

fn even_ceil(n: usize) -> usize {
    n + n % 2
}

fn size_model(requested: Option<usize>, n_heads: usize, layout_width: usize, min_head: usize) -> Result<(usize, usize)> {
    let d_head = even_ceil(min_head.max(layout_width.div_ceil(n_heads)));
    match requested {
        None => Ok((n_heads * d_head, d_head)),
        Some(d) => {
            if d % n_heads != 0 || d / n_heads < min_head || d < layout_width {
                return Err(Error::Config(format!(
                    "d_model {d} cannot hold the oracle subspaces: need ≥ {layout_width} total and ≥ {min_head} per head"
                )));
            }
            Ok((d, d / n_heads))
        }
    }
}

pub fn build_oracle(spec: &OracleSpec) -> Result<Oracle> {
    spec.validate()?;
    let vocab = Vocab::synthetic(spec.alphabet_size)?;
    let v = vocab.len();
    let n_ex = spec.n_incontext + 1;
    if spec.template_len() > spec.max_seq_len {
        return Err(Error::Config("max_seq_len is shorter than the prompt template".into()));
    }
    let layout = Layout::new(v, n_ex);
    let alphabet = spec.alphabet_size;
    let (d_model, d_head) = size_model(spec.d_model, spec.n_heads, layout.width(), alphabet + n_ex + 1)?;
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: spec.n_heads,
        d_model,
        d_head,
        d_mlp: 1,
        vocab_size: v,
        max_seq_len: spec.max_seq_len,
        pos_encoding: PosEncoding::LearnedAbsolute,
        norm: NormKind::None,
        rotary_base: 10000.0,
        seed: 0,
    };
    let mut w = Weights::zeros(&cfg);
    let s = (d_head as f64).sqrt() * spec.saturation_scale;
    let lay = &layout;

    for t in 0..v {
        w.set("embed", t, lay.one, 1.0);
        w.set("embed", t, lay.tok.start + t, 1.0);
    }
    w.set("embed", BOS, lay.bos, 1.0);
    for p in 1..spec.template_len() {
        w.set("pos", p, lay.slot.start + (p - 1) % SLOTS, 1.0);
        w.set("pos", p, lay.example.start + (p - 1) / SLOTS, 1.0);
    }

    let col = |head: usize, j: usize| head * d_head + j;
    let content = N_RESERVED..v;
    let slot = |i: usize| lay.slot.start + i;

    // Abstraction head: 4·[same content token] + 4·[same example]
    // + 2·[key is item 1] + 1·[key is item 2] + 7·[key is BOS].
    let (l, h) = ABSTRACTION_HEAD;
    let (q, k, vv, o) = names(l);
    for (j, t) in content.clone().enumerate() {
        w.set(&q, lay.tok.start + t, col(h, j), 4.0 * s);
        w.set(&k, lay.tok.start + t, col(h, j), 1.0);
    }
    for e in 0..n_ex {
        w.set(&q, lay.example.start + e, col(h, alphabet + e), 4.0 * s);
        w.set(&k, lay.example.start + e, col(h, alphabet + e), 1.0);
    }
    let bias = col(h, alphabet + n_ex);
    w.set(&q, lay.one, bias, s);
    w.set(&k, slot(0), bias, 2.0);
    w.set(&k, slot(2), bias, 1.0);
    w.set(&k, lay.bos, bias, 7.0);
    w.set(&vv, slot(0), col(h, 0), 1.0);
    w.set(&vv, slot(2), col(h, 1), 1.0);
    w.set(&o, col(h, 0), lay.sym.start, 1.0);
    w.set(&o, col(h, 1), lay.sym.start + 1, 1.0);

    // Symbolic induction head: 4·[query is slot 3, key is slot 4]
    // + 3·[key is BOS].
    let (l, h) = INDUCTION_HEAD;
    let (q, k, vv, o) = names(l);
    w.set(&q, slot(3), col(h, 0), 4.0 * s);
    w.set(&k, slot(4), col(h, 0), 1.0);
    w.set(&q, lay.one, col(h, 1), 3.0 * s);
    w.set(&k, lay.bos, col(h, 1), 1.0);
    for i in 0..2 {
        w.set(&vv, lay.sym.start + i, col(h, i), 1.0);
        w.set(&o, col(h, i), lay.pred.start + i, 1.0);
    }

    // Retrieval head: 2·[predicted symbol = bound symbol]
    // + 2·[same example] + 3·[key is BOS].
    let (l, h) = RETRIEVAL_HEAD;
    let (q, k, vv, o) = names(l);
    for i in 0..2 {
        w.set(&q, lay.pred.start + i, col(h, i), 2.0 * s);
        w.set(&k, lay.sym.start + i, col(h, i), 1.0);
    }
    for e in 0..n_ex {
        w.set(&q, lay.example.start + e, col(h, 2 + e), 2.0 * s);
        w.set(&k, lay.example.start + e, col(h, 2 + e), 1.0);
    }
    w.set(&q, lay.one, col(h, 2 + n_ex), 3.0 * s);
    w.set(&k, lay.bos, col(h, 2 + n_ex), 1.0);
    for (j, t) in content.clone().enumerate() {
        w.set(&vv, lay.tok.start + t, col(h, j), 1.0);
        w.set(&o, col(h, j), lay.out.start + t, 1.0);
    }
    for t in content.clone() {
        w.set("unembed", lay.out.start + t, t, spec.logit_scale);
    }

    // Distractors: head 1 attends within its slot and writes a constant,
    // head 2 attends uniformly and writes a token hash, later heads sink
    // into BOS with a zero value.
    for l in 0..3 {
        let (q, k, vv, o) = names(l);
        for h in 1..spec.n_heads {
            match h {
                1 => {
                    for i in 0..SLOTS {
                        w.set(&q, slot(i), col(h, i), s);
                        w.set(&k, slot(i), col(h, i), 1.0);
                    }
                    w.set(&vv, lay.one, col(h, 0), 1.0);
                    w.set(&o, col(h, 0), lay.junk.start, 1.0);
                }
                2 => {
                    for t in 0..v {
                        w.set(&vv, lay.tok.start + t, col(h, 0), ((t * 7) % 5) as f64 / 4.0);
                    }
                    w.set(&o, col(h, 0), lay.junk.start + 1 + l, 1.0);
                }
                _ => {
                    w.set(&q, lay.one, col(h, 0), 3.0 * s);
                    w.set(&k, lay.bos, col(h, 0), 1.0);
                }
            }
        }
    }

    let model = Model::from_params(cfg, w.map)?;
    Ok(Oracle { model, vocab, spec: spec.clone(), layout })
}

fn names(l: usize) -> (String, String, String, String) {
    (
        format!("layer.{l}.attn.q"),
        format!("layer.{l}.attn.k"),
        format!("layer.{l}.attn.v"),
        format!("layer.{l}.attn.o"),
    )
}

/// Shape of the two-layer token-induction model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiteralSpec {
    pub alphabet_size: usize,
    pub max_seq_len: usize,
    pub saturation_scale: f64,
    pub logit_scale: f64,
}

impl Default for LiteralSpec {
    fn default() -> Self {
        Self { alphabet_size: 64, max_seq_len: 128, saturation_scale: 40.0, logit_scale: 20.0 }
    }
}

/// (layer, head) of the previous-token head.
pub const PREVIOUS_TOKEN_HEAD: (usize, usize) = (0, 0);
/// (layer, head) of the token-induction head.
pub const LITERAL_INDUCTION_HEAD: (usize, usize) = (1, 0);

/// Layer 0 copies each token into the next position's "previous token"
/// block; layer 1 attends from a token to the position just after its
/// previous occurrence and copies the token found there.
pub fn build_literal_induction_oracle(spec: &LiteralSpec) -> Result<(Model, Vocab)> {
    OracleSpec {
        alphabet_size: spec.alphabet_size,
        max_seq_len: spec.max_seq_len,
        saturation_scale: spec.saturation_scale,
        logit_scale: spec.logit_scale,
        ..OracleSpec::default()
    }
    .validate()?;
    let vocab = Vocab::synthetic(spec.alphabet_size)?;
    let v = vocab.len();
    let p = spec.max_seq_len;
    let (one, bos) = (0, 1);
    let tok = 2;
    let pos = tok + v;
    let prev = pos + p;
    let out = prev + v;
    let width = out + v;
    let (d_model, d_head) = size_model(None, 1, width, p.max(v + 1))?;
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 1,
        d_model,
        d_head,
        d_mlp: 1,
        vocab_size: v,
        max_seq_len: p,
        pos_encoding: PosEncoding::LearnedAbsolute,
        norm: NormKind::None,
        rotary_base: 10000.0,
        seed: 0,
    };
    let mut w = Weights::zeros(&cfg);
    let s = (d_head as f64).sqrt() * spec.saturation_scale;
    for t in 0..v {
        w.set("embed", t, one, 1.0);
        w.set("embed", t, tok + t, 1.0);
    }
    w.set("embed", BOS, bos, 1.0);
    for i in 0..p {
        w.set("pos", i, pos + i, 1.0);
    }
    let (q, k, vv, o) = names(0);
    for i in 1..p {
        w.set(&q, pos + i, i - 1, s);
    }
    for j in 0..p {
        w.set(&k, pos + j, j, 1.0);
    }
    for t in 0..v {
        w.set(&vv, tok + t, t, 1.0);
        w.set(&o, t, prev + t, 1.0);
    }
    let (q, k, vv, o) = names(1);
    for t in N_RESERVED..v {
        w.set(&q, tok + t, t, 4.0 * s);
        w.set(&k, prev + t, t, 1.0);
    }
    w.set(&q, one, v, 3.0 * s);
    w.set(&k, bos, v, 1.0);
    for t in N_RESERVED..v {
        w.set(&vv, tok + t, t, 1.0);
        w.set(&o, t, out + t, 1.0);
        w.set("unembed", out + t, t, spec.logit_scale);
    }
    Ok((Model::from_params(cfg, w.map)?, vocab))
}
