//! Prompt, answer and context-pair generators.
//!
//! Three prompt formats share one vocabulary layout:
//!
//! * identity rules, rendered without spaces: `X^Y^X\nP^Q^P\nks^ixe^`
//! * letter strings: `[i j k] [i j l]\n[w x y] [`
//! * verbal analogies: `lazy : idle\nenergetic :`
//!
//! Every prompt starts with BOS. Token ids `0..N_RESERVED` are reserved for
//! BOS and the separators; content tokens follow.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const CARET: usize = 1;
pub const NEWLINE: usize = 2;
pub const LBRACKET: usize = 3;
pub const RBRACKET: usize = 4;
pub const COLON: usize = 5;
pub const SPACE: usize = 6;
pub const N_RESERVED: usize = 7;

const RESERVED: [&str; N_RESERVED] = ["<bos>", "^", "\n", "[", "]", ":", " "];

/// Bijection between token strings and ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    strings: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `contents` in order.
    pub fn from_contents<S: AsRef<str>>(contents: &[S]) -> Result<Self> {
        let mut strings: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = strings.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        for c in contents {
            let c = c.as_ref();
            if c.is_empty() || c.chars().any(|ch| ch.is_whitespace() || "^[]:".contains(ch)) {
                return Err(Error::Config(format!("invalid content token {c:?}")));
            }
            if ids.insert(c.to_string(), strings.len()).is_some() {
                return Err(Error::Config(format!("duplicate content token {c:?}")));
            }
            strings.push(c.to_string());
        }
        Ok(Self { strings, ids })
    }

    /// `n` distinct pronounceable strings (`ba`, `be`, …, `bab`, …).
    pub fn synthetic(n: usize) -> Result<Self> {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        let mut out = Vec::with_capacity(n);
        'outer: for len in 2.. {
            let mut idx = vec![0usize; len];
            loop {
                let s: String = idx
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| if i % 2 == 0 { C[k] as char } else { V[k] as char })
                    .collect();
                out.push(s);
                if out.len() == n {
                    break 'outer;
                }
                let mut j = len;
                loop {
                    if j == 0 {
                        continue 'outer;
                    }
                    j -= 1;
                    let radix = if j % 2 == 0 { C.len() } else { V.len() };
                    idx[j] += 1;
                    if idx[j] < radix {
                        break;
                    }
                    idx[j] = 0;
                }
            }
        }
        Self::from_contents(&out)
    }

    /// The 26 lowercase letters, in alphabetical order.
    pub fn letters() -> Self {
        let letters: Vec<String> = ('a'..='z').map(String::from).collect();
        Self::from_contents(&letters).expect("letters are valid tokens")
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn content_ids(&self) -> Vec<usize> {
        (N_RESERVED..self.strings.len()).collect()
    }

    pub fn id(&self, s: &str) -> Option<usize> {
        self.ids.get(s).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.strings.get(id).map(String::as_str)
    }

    /// Splits text into tokens. `^ \n [ ] :` are single tokens, other
    /// whitespace separates, and every remaining run is a content token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<usize>| -> Result<()> {
            if !word.is_empty() {
                let id = self.id(word).ok_or_else(|| Error::Parse(format!("unknown token {word:?}")))?;
                out.push(id);
                word.clear();
            }
            Ok(())
        };
        for ch in text.chars() {
            let special = match ch {
                '^' => Some(CARET),
                '\n' => Some(NEWLINE),
                '[' => Some(LBRACKET),
                ']' => Some(RBRACKET),
                ':' => Some(COLON),
                _ => None,
            };
            if let Some(s) = special {
                flush(&mut word, &mut out)?;
                out.push(s);
            } else if ch.is_whitespace() {
                flush(&mut word, &mut out)?;
            } else {
                word.push(ch);
            }
        }
        flush(&mut word, &mut out)?;
        Ok(out)
    }

    fn display(&self, id: usize) -> &str {
        self.token(id).unwrap_or("<?>")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "ABA")]
    Aba,
    #[serde(rename = "ABB")]
    Abb,
    #[serde(rename = "AABA")]
    Aaba,
    #[serde(rename = "ABCB")]
    Abcb,
    #[serde(rename = "ABCC")]
    Abcc,
    #[serde(rename = "successor")]
    Successor,
    #[serde(rename = "predecessor")]
    Predecessor,
    #[serde(rename = "synonym")]
    Synonym,
    #[serde(rename = "antonym")]
    Antonym,
}

impl Rule {
    /// Variable index of each item of an identity rule.
    pub fn pattern(self) -> Option<&'static [usize]> {
        match self {
            Rule::Aba => Some(&[0, 1, 0]),
            Rule::Abb => Some(&[0, 1, 1]),
            Rule::Aaba => Some(&[0, 0, 1, 0]),
            Rule::Abcb => Some(&[0, 1, 2, 1]),
            Rule::Abcc => Some(&[0, 1, 2, 2]),
            _ => None,
        }
    }

    /// Number of distinct variables of an identity rule.
    pub fn n_vars(self) -> usize {
        self.pattern().map_or(0, |p| p.iter().max().map_or(0, |m| m + 1))
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::Aba => "ABA",
            Rule::Abb => "ABB",
            Rule::Aaba => "AABA",
            Rule::Abcb => "ABCB",
            Rule::Abcc => "ABCC",
            Rule::Successor => "successor",
            Rule::Predecessor => "predecessor",
            Rule::Synonym => "synonym",
            Rule::Antonym => "antonym",
        }
    }

    /// The partner rule used to build abstract-condition pairs.
    pub fn partner(self) -> Option<Rule> {
        match self {
            Rule::Aba => Some(Rule::Abb),
            Rule::Abb => Some(Rule::Aba),
            Rule::Successor => Some(Rule::Predecessor),
            Rule::Predecessor => Some(Rule::Successor),
            Rule::Synonym => Some(Rule::Antonym),
            Rule::Antonym => Some(Rule::Synonym),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Rule> {
        [
            Rule::Aba,
            Rule::Abb,
            Rule::Aaba,
            Rule::Abcb,
            Rule::Abcc,
            Rule::Successor,
            Rule::Predecessor,
            Rule::Synonym,
            Rule::Antonym,
        ]
        .into_iter()
        .find(|r| r.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::Parse(format!("unknown rule {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Identity,
    LetterString,
    Verbal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Bos,
    A,
    B,
    C,
    Content,
    Separator,
    /// The final position, where the answer is generated.
    QueryBlank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    /// `None` for BOS.
    pub example_index: Option<usize>,
    /// Offset of the token within its example, separators included.
    pub within_example_position: Option<usize>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub format: Format,
    pub tokens: Vec<usize>,
    pub annotations: Vec<Annotation>,
}

impl Prompt {
    /// Annotates a BOS-prefixed token sequence.
    pub fn parse(format: Format, tokens: Vec<usize>) -> Result<Self> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::Parse("prompt must start with BOS".into()));
        }
        if tokens[1..].contains(&BOS) {
            return Err(Error::Parse("BOS inside prompt".into()));
        }
        let mut annotations = vec![Annotation { example_index: None, within_example_position: None, role: Role::Bos }];
        let (mut ex, mut offset) = (0, 0);
        let mut seen: Vec<usize> = Vec::new();
        for &t in &tokens[1..] {
            let role = if t < N_RESERVED {
                let allowed: &[usize] = match format {
                    Format::Identity => &[CARET, NEWLINE],
                    Format::LetterString => &[LBRACKET, RBRACKET, NEWLINE],
                    Format::Verbal => &[COLON, NEWLINE],
                };
                if !allowed.contains(&t) {
                    return Err(Error::Parse(format!("token {t} is not a separator of {format:?} prompts")));
                }
                Role::Separator
            } else if format == Format::Identity {
                let var = match seen.iter().position(|&s| s == t) {
                    Some(i) => i,
                    None => {
                        seen.push(t);
                        seen.len() - 1
                    }
                };
                match var {
                    0 => Role::A,
                    1 => Role::B,
                    2 => Role::C,
                    _ => return Err(Error::Parse("more than three variables in one example".into())),
                }
            } else {
                Role::Content
            };
            annotations.push(Annotation { example_index: Some(ex), within_example_position: Some(offset), role });
            offset += 1;
            if t == NEWLINE {
                ex += 1;
                offset = 0;
                seen.clear();
            }
        }
        if let Some(last) = annotations.last_mut() {
            if last.role != Role::Bos {
                last.role = Role::QueryBlank;
            }
        }
        Ok(Self { format, tokens, annotations })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn final_position(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Number of examples, the query included.
    pub fn n_examples(&self) -> usize {
        self.annotations.iter().filter_map(|a| a.example_index).max().map_or(0, |m| m + 1)
    }

    /// Positions of example `ex` whose within-example offset is `offset`.
    pub fn position_of(&self, ex: usize, offset: usize) -> Option<usize> {
        self.annotations
            .iter()
            .position(|a| a.example_index == Some(ex) && a.within_example_position == Some(offset))
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        let body = &self.tokens[1..];
        for (i, &t) in body.iter().enumerate() {
            if i > 0 {
                let prev = body[i - 1];
                let space = match self.format {
                    Format::Identity => false,
                    Format::LetterString => {
                        (prev >= N_RESERVED && t >= N_RESERVED) || (prev == RBRACKET && t == LBRACKET)
                    }
                    Format::Verbal => (prev >= N_RESERVED && t == COLON) || (prev == COLON && t >= N_RESERVED),
                };
                if space {
                    out.push(' ');
                }
            }
            out.push_str(vocab.display(t));
        }
        out
    }

    /// Re-tokenizes rendered text into a prompt.
    pub fn from_text(format: Format, vocab: &Vocab, text: &str) -> Result<Self> {
        let mut tokens = vec![BOS];
        tokens.extend(vocab.tokenize(text)?);
        Self::parse(format, tokens)
    }

    /// A copy with `extra` tokens appended (teacher forcing).
    pub fn extended(&self, extra: &[usize]) -> Result<Self> {
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(extra);
        Self::parse(self.format, tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerSpec {
    pub tokens: Vec<usize>,
    pub display: String,
}

impl AnswerSpec {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("answer".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::OutOfVocab { token: t, vocab: vocab.len() });
        }
        let display = tokens.iter().map(|&t| vocab.display(t)).collect::<Vec<_>>().join(" ");
        Ok(Self { tokens, display })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Abstract,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Abstraction,
    SymbolicInduction,
    Retrieval,
}

impl HeadType {
    pub const ALL: [HeadType; 3] = [HeadType::Abstraction, HeadType::SymbolicInduction, HeadType::Retrieval];

    pub fn name(self) -> &'static str {
        match self {
            HeadType::Abstraction => "abstraction",
            HeadType::SymbolicInduction => "induction",
            HeadType::Retrieval => "retrieval",
        }
    }

    /// The pair condition that targets this head type.
    pub fn condition(self) -> Condition {
        match self {
            HeadType::Retrieval => Condition::Token,
            _ => Condition::Abstract,
        }
    }
}

/// One patch-and-read unit of a pair. Answers are read at `readout`; when
/// either answer has several tokens the readout must be the final position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchTarget {
    pub patch_positions: Vec<usize>,
    pub readout: usize,
    pub y: AnswerSpec,
    pub y_star: AnswerSpec,
}

/// A (c1, c2) prompt pair. The mediation score of a pair is the sum of the
/// scores of its targets, each patched independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPair {
    pub c1: Prompt,
    pub c2: Prompt,
    pub y_c1: AnswerSpec,
    pub y_c1_star: AnswerSpec,
    pub condition: Condition,
    pub target_head_type: HeadType,
    pub rule: Rule,
    pub targets: Vec<PatchTarget>,
}

impl ContextPair {
    /// Union of all patch positions, sorted.
    pub fn patch_positions(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.targets.iter().flat_map(|t| t.patch_positions.iter().copied()).collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// Draws `n_examples` groups of `k` tokens from `pool`, pairwise disjoint
/// across groups. `accept` may veto a group; vetoed draws are retried.
pub fn sample_token_sets<R: Rng + ?Sized>(
    rng: &mut R,
    pool: &[usize],
    n_examples: usize,
    k: usize,
    accept: impl Fn(&[usize]) -> bool,
) -> Result<Vec<Vec<usize>>> {
    let need = n_examples * k;
    if pool.len() < need {
        return Err(Error::VocabExhausted { need, have: pool.len() });
    }
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let mut found = None;
        for _ in 0..10_000 {
            let free: Vec<usize> = pool.iter().copied().filter(|t| !used.contains(t)).collect();
            if free.len() < k {
                break;
            }
            let group: Vec<usize> = sample(rng, free.len(), k).into_iter().map(|i| free[i]).collect();
            if accept(&group) {
                found = Some(group);
                break;
            }
        }
        let group = found.ok_or(Error::VocabExhausted { need, have: pool.len() })?;
        used.extend(group.iter().copied());
        out.push(group);
    }
    Ok(out)
}

/// Identity-rule prompt over explicit token sets, the last set being the
/// query. Returns the prompt and the rule-consistent answer.
pub fn identity_prompt(rule: Rule, sets: &[Vec<usize>], vocab: &Vocab) -> Result<(Prompt, AnswerSpec)> {
    let pattern = rule.pattern().ok_or_else(|| Error::Config(format!("{} is not an identity rule", rule.name())))?;
    if sets.len() < 2 {
        return Err(Error::Config("need at least one in-context example and a query".into()));
    }
    let mut tokens = vec![BOS];
    let mut answer = 0;
    for (e, set) in sets.iter().enumerate() {
        if set.len() != rule.n_vars() {
            return Err(Error::Config(format!("{} needs {} tokens per example", rule.name(), rule.n_vars())));
        }
        let query = e + 1 == sets.len();
        for (i, &v) in pattern.iter().enumerate() {
            if query && i + 1 == pattern.len() {
                answer = set[v];
                break;
            }
            tokens.push(set[v]);
            tokens.push(if i + 1 == pattern.len() { NEWLINE } else { CARET });
        }
    }
    Ok((Prompt::parse(Format::Identity, tokens)?, AnswerSpec::new(vec![answer], vocab)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub rule: Rule,
    pub n_shots: usize,
    pub seed: u64,
}

/// Seeded identity-rule generator over a content-token pool.
#[derive(Debug, Clone)]
pub struct IdentityTask<'a> {
    pub vocab: &'a Vocab,
    pub pool: Vec<usize>,
    pub n_shots: usize,
}

impl<'a> IdentityTask<'a> {
    pub fn new(vocab: &'a Vocab, n_shots: usize) -> Result<Self> {
        if n_shots == 0 {
            return Err(Error::Config("n_shots must be at least 1".into()));
        }
        Ok(Self { vocab, pool: vocab.content_ids(), n_shots })
    }

    pub fn with_pool(mut self, pool: Vec<usize>) -> Self {
        self.pool = pool;
        self
    }

    pub fn sets<R: Rng + ?Sized>(&self, rng: &mut R, rule: Rule) -> Result<Vec<Vec<usize>>> {
        sample_token_sets(rng, &self.pool, self.n_shots + 1, rule.n_vars(), |_| true)
    }

    pub fn prompt<R: Rng + ?Sized>(&self, rng: &mut R, rule: Rule) -> Result<(Prompt, AnswerSpec)> {
        identity_prompt(rule, &self.sets(rng, rule)?, self.vocab)
    }

    /// Abstract-condition pair for `rule` ∈ {ABA, ABB}. c2 applies the
    /// partner rule to the same tokens with the first two items of every
    /// example swapped, so both contexts share their final tokens.
    pub fn abstract_pair<R: Rng + ?Sized>(&self, rng: &mut R, rule: Rule, target: HeadType) -> Result<ContextPair> {
        let sets = self.sets(rng, rule)?;
        abstract_pair_from_sets(rule, &sets, target, self.vocab)
    }

    /// Token-condition pair: c2 is c1 with the query's two tokens swapped.
    pub fn token_pair<R: Rng + ?Sized>(&self, rng: &mut R, rule: Rule) -> Result<ContextPair> {
        let sets = self.sets(rng, rule)?;
        token_pair_from_sets(rule, &sets, self.vocab)
    }

    /// The pair type appropriate for `target`.
    pub fn pair<R: Rng + ?Sized>(&self, rng: &mut R, rule: Rule, target: HeadType) -> Result<ContextPair> {
        match target.condition() {
            Condition::Abstract => self.abstract_pair(rng, rule, target),
            Condition::Token => self.token_pair(rng, rule),
        }
    }
}

fn check_ab(rule: Rule) -> Result<()> {
    if !matches!(rule, Rule::Aba | Rule::Abb) {
        return Err(Error::Config(format!("pairs are defined for ABA and ABB, not {}", rule.name())));
    }
    Ok(())
}

/// Positions of the last content token of every in-context example.
pub fn example_final_positions(p: &Prompt) -> Vec<usize> {
    let n_context = p.n_examples().saturating_sub(1);
    let mut last = vec![None; n_context];
    for (i, a) in p.annotations.iter().enumerate() {
        if let Some(e) = a.example_index {
            if e < n_context && p.tokens[i] >= N_RESERVED {
                last[e] = Some(i);
            }
        }
    }
    last.into_iter().flatten().collect()
}

pub fn abstract_pair_from_sets(rule: Rule, sets: &[Vec<usize>], target: HeadType, vocab: &Vocab) -> Result<ContextPair> {
    check_ab(rule)?;
    let partner = rule.partner().expect("ABA/ABB have partners");
    let swapped: Vec<Vec<usize>> = sets.iter().map(|s| vec![s[1], s[0]]).collect();
    let (c1, y) = identity_prompt(rule, sets, vocab)?;
    let (c2, _) = identity_prompt(partner, &swapped, vocab)?;
    let q = sets.last().expect("non-empty");
    // The query read under the partner rule.
    let y_star = AnswerSpec::new(vec![if rule == Rule::Aba { q[1] } else { q[0] }], vocab)?;
    let patch_positions = match target {
        HeadType::Abstraction => example_final_positions(&c1),
        _ => vec![c1.final_position()],
    };
    let readout = c1.final_position();
    Ok(ContextPair {
        targets: vec![PatchTarget { patch_positions, readout, y: y.clone(), y_star: y_star.clone() }],
        c1,
        c2,
        y_c1: y,
        y_c1_star: y_star,
        condition: Condition::Abstract,
        target_head_type: target,
        rule,
    })
}

pub fn token_pair_from_sets(rule: Rule, sets: &[Vec<usize>], vocab: &Vocab) -> Result<ContextPair> {
    check_ab(rule)?;
    let mut swapped = sets.to_vec();
    swapped.last_mut().expect("non-empty").swap(0, 1);
    let (c1, y) = identity_prompt(rule, sets, vocab)?;
    let (c2, y_star) = identity_prompt(rule, &swapped, vocab)?;
    let readout = c1.final_position();
    Ok(ContextPair {
        targets: vec![PatchTarget { patch_positions: vec![readout], readout, y: y.clone(), y_star: y_star.clone() }],
        c1,
        c2,
        y_c1: y,
        y_c1_star: y_star,
        condition: Condition::Token,
        target_head_type: HeadType::Retrieval,
        rule,
    })
}

/// The four contexts built from one token set for similarity analyses:
/// c1, c1 with swapped query, c2, c2 with swapped query (abstract pair
/// from the ABA side).
pub fn four_contexts(sets: &[Vec<usize>], vocab: &Vocab) -> Result<[Prompt; 4]> {
    let swapped: Vec<Vec<usize>> = sets.iter().map(|s| vec![s[1], s[0]]).collect();
    let mut q_swapped = sets.to_vec();
    q_swapped.last_mut().expect("non-empty").swap(0, 1);
    let mut both = swapped.clone();
    both.last_mut().expect("non-empty").swap(0, 1);
    Ok([
        identity_prompt(Rule::Aba, sets, vocab)?.0,
        identity_prompt(Rule::Aba, &q_swapped, vocab)?.0,
        identity_prompt(Rule::Abb, &swapped, vocab)?.0,
        identity_prompt(Rule::Abb, &both, vocab)?.0,
    ])
}

// ---------------------------------------------------------------- letters

/// Source and completion letter offsets (0 = `a`) of a letter-string
/// example with base `x`. Successor: `[x x+1 x+2] → [x x+1 x+3]`.
/// Predecessor: `[x+1 x+2 x+3] → [x x+2 x+3]`. Both completions share
/// their first and third letters.
pub fn letter_example(rule: Rule, x: usize) -> Result<([usize; 3], [usize; 3])> {
    if x + 3 > 25 {
        return Err(Error::DegenerateLetters(format!("base letter {x} runs past z")));
    }
    match rule {
        Rule::Successor => Ok(([x, x + 1, x + 2], [x, x + 1, x + 3])),
        Rule::Predecessor => Ok(([x + 1, x + 2, x + 3], [x, x + 2, x + 3])),
        _ => Err(Error::Config(format!("{} is not a letter-string rule", rule.name()))),
    }
}

/// The completion `rule` gives for an arbitrary source string.
pub fn apply_letter_rule(rule: Rule, src: [usize; 3]) -> Result<[usize; 3]> {
    match rule {
        Rule::Successor if src[2] < 25 => Ok([src[0], src[1], src[2] + 1]),
        Rule::Predecessor if src[0] > 0 => Ok([src[0] - 1, src[1], src[2]]),
        Rule::Successor | Rule::Predecessor => {
            Err(Error::DegenerateLetters(format!("{} has no {} at the transformed slot", fmt_letters(&src), rule.name())))
        }
        _ => Err(Error::Config(format!("{} is not a letter-string rule", rule.name()))),
    }
}

fn fmt_letters(l: &[usize]) -> String {
    l.iter().map(|&i| (b'a' + i as u8) as char).collect()
}

/// Letter-string problems. The vocabulary must be [`Vocab::letters`].
#[derive(Debug, Clone)]
pub struct LetterTask<'a> {
    pub vocab: &'a Vocab,
    pub n_shots: usize,
}

/// Smallest and largest base letter for which both rules, applied to
/// either source form, stay inside the alphabet.
pub const LETTER_BASE_RANGE: (usize, usize) = (1, 21);

impl<'a> LetterTask<'a> {
    pub fn new(vocab: &'a Vocab, n_shots: usize) -> Result<Self> {
        if vocab.id("a") != Some(N_RESERVED) || vocab.id("z") != Some(N_RESERVED + 25) {
            return Err(Error::Config("letter tasks need the letters vocabulary".into()));
        }
        if n_shots == 0 {
            return Err(Error::Config("n_shots must be at least 1".into()));
        }
        Ok(Self { vocab, n_shots })
    }

    fn id(l: usize) -> usize {
        N_RESERVED + l
    }

    /// Prompt for explicit bases, the last base being the query; the query
    /// is followed by `appended` completion letters.
    pub fn prompt(&self, rule: Rule, bases: &[usize], appended: &[usize]) -> Result<(Prompt, [usize; 3])> {
        let mut tokens = vec![BOS];
        let mut answer = [0; 3];
        for (e, &x) in bases.iter().enumerate() {
            let (src, dst) = letter_example(rule, x)?;
            tokens.push(LBRACKET);
            tokens.extend(src.iter().map(|&l| Self::id(l)));
            tokens.push(RBRACKET);
            tokens.push(LBRACKET);
            if e + 1 == bases.len() {
                answer = dst;
                tokens.extend(appended.iter().map(|&l| Self::id(l)));
            } else {
                tokens.extend(dst.iter().map(|&l| Self::id(l)));
                tokens.push(RBRACKET);
                tokens.push(NEWLINE);
            }
        }
        Ok((Prompt::parse(Format::LetterString, tokens)?, answer))
    }

    fn bases<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, avoid: &[usize]) -> Result<Vec<usize>> {
        let (lo, hi) = LETTER_BASE_RANGE;
        let pool: Vec<usize> = (lo..=hi).filter(|x| !avoid.iter().any(|a| a.abs_diff(*x) <= 4)).collect();
        if pool.len() < n {
            return Err(Error::VocabExhausted { need: n, have: pool.len() });
        }
        Ok(sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
    }

    fn answer(&self, letters: &[usize]) -> Result<AnswerSpec> {
        AnswerSpec::new(vec![Self::id(letters[0])], self.vocab)
    }

    /// A successor/predecessor pair with shared in-context bases and query
    /// base, for the given target head type. Both prompts carry their own
    /// correct first two completion letters, so that all three letters can
    /// be read out.
    pub fn pair<R: Rng + ?Sized>(&self, rng: &mut R, rule: Rule, target: HeadType) -> Result<ContextPair> {
        if !matches!(rule, Rule::Successor | Rule::Predecessor) {
            return Err(Error::Config(format!("{} is not a letter-string rule", rule.name())));
        }
        let bases = self.bases(rng, self.n_shots + 1, &[])?;
        match target {
            HeadType::Retrieval => {
                let q2 = self.bases(rng, 1, &bases)?[0];
                let mut bases2 = bases.clone();
                *bases2.last_mut().expect("non-empty") = q2;
                let (_, a1) = self.prompt(rule, &bases, &[])?;
                let (_, a2) = self.prompt(rule, &bases2, &[])?;
                let (c1, _) = self.prompt(rule, &bases, &a1[..2])?;
                let (c2, _) = self.prompt(rule, &bases2, &a2[..2])?;
                let open = c1.final_position() - 2;
                let targets = (0..3)
                    .map(|k| {
                        Ok(PatchTarget {
                            patch_positions: vec![open + k],
                            readout: open + k,
                            y: self.answer(&a1[k..])?,
                            y_star: self.answer(&a2[k..])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ContextPair {
                    y_c1: AnswerSpec::new(a1.iter().map(|&l| Self::id(l)).collect(), self.vocab)?,
                    y_c1_star: AnswerSpec::new(a2.iter().map(|&l| Self::id(l)).collect(), self.vocab)?,
                    c1,
                    c2,
                    condition: Condition::Token,
                    target_head_type: target,
                    rule,
                    targets,
                })
            }
            _ => {
                let partner = rule.partner().expect("letter rules have partners");
                let (_, a1) = self.prompt(rule, &bases, &[])?;
                let (_, a2) = self.prompt(partner, &bases, &[])?;
                let (c1, _) = self.prompt(rule, &bases, &a1[..2])?;
                let (c2, _) = self.prompt(partner, &bases, &a2[..2])?;
                // c1's query source read under the partner rule.
                let q = *bases.last().expect("non-empty");
                let (src, _) = letter_example(rule, q)?;
                let star = apply_letter_rule(partner, src)?;
                let open = c1.final_position() - 2;
                let readouts = [(open, 0usize), (open + 2, 2usize)];
                let abstraction_positions: Vec<usize> = (0..self.n_shots)
                    .flat_map(|e| {
                        let start = c1.position_of(e, 6).expect("completion letter");
                        [start, start + 2]
                    })
                    .collect();
                let targets = readouts
                    .iter()
                    .map(|&(pos, k)| {
                        Ok(PatchTarget {
                            patch_positions: match target {
                                HeadType::Abstraction => abstraction_positions.clone(),
                                _ => vec![pos],
                            },
                            readout: pos,
                            y: self.answer(&a1[k..])?,
                            y_star: self.answer(&star[k..])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ContextPair {
                    y_c1: AnswerSpec::new(a1.iter().map(|&l| Self::id(l)).collect(), self.vocab)?,
                    y_c1_star: AnswerSpec::new(star.iter().map(|&l| Self::id(l)).collect(), self.vocab)?,
                    c1,
                    c2,
                    condition: Condition::Abstract,
                    target_head_type: target,
                    rule,
                    targets,
                })
            }
        }
    }
}

// ---------------------------------------------------------------- verbal

/// `(syn1, syn2, ant1, ant2)`: the first two words are synonyms, the last
/// two are synonyms, and the two pairs are antonyms of each other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSet {
    pub syn1: String,
    pub syn2: String,
    pub ant1: String,
    pub ant2: String,
}

pub fn parse_wordsets(text: &str) -> Result<Vec<WordSet>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let words: Vec<&str> = line.split(',').map(str::trim).collect();
        if words.len() != 4 {
            return Err(Error::Wordset { line: i + 1, reason: format!("expected 4 words, found {}", words.len()) });
        }
        if let Some(w) = words.iter().find(|w| w.is_empty() || w.chars().any(|c| c.is_whitespace() || "^[]:".contains(c))) {
            return Err(Error::Wordset { line: i + 1, reason: format!("invalid word {w:?}") });
        }
        let distinct: HashSet<&&str> = words.iter().collect();
        if distinct.len() != 4 {
            return Err(Error::Wordset { line: i + 1, reason: "words must be distinct".into() });
        }
        out.push(WordSet {
            syn1: words[0].into(),
            syn2: words[1].into(),
            ant1: words[2].into(),
            ant2: words[3].into(),
        });
    }
    Ok(out)
}

pub fn load_wordsets(path: &Path) -> Result<Vec<WordSet>> {
    parse_wordsets(&std::fs::read_to_string(path)?)
}

/// The word sets shipped with the crate.
pub fn builtin_wordsets() -> Vec<WordSet> {
    parse_wordsets(include_str!("../data/wordsets.txt")).expect("shipped wordsets parse")
}

/// Vocabulary holding every word of `sets` as a single token.
pub fn wordset_vocab(sets: &[WordSet]) -> Result<Vocab> {
    let mut words = Vec::new();
    let mut seen = HashSet::new();
    for s in sets {
        for w in [&s.syn1, &s.syn2, &s.ant1, &s.ant2] {
            if seen.insert(w.clone()) {
                words.push(w.clone());
            }
        }
    }
    Vocab::from_contents(&words)
}

#[derive(Debug, Clone)]
pub struct VerbalTask<'a> {
    pub vocab: &'a Vocab,
    pub sets: &'a [WordSet],
    pub n_shots: usize,
}

impl<'a> VerbalTask<'a> {
    pub fn new(vocab: &'a Vocab, sets: &'a [WordSet], n_shots: usize) -> Result<Self> {
        if sets.len() < n_shots + 2 {
            return Err(Error::Config(format!("{} word sets cannot fill {n_shots}-shot pairs", sets.len())));
        }
        Ok(Self { vocab, sets, n_shots })
    }

    fn word(&self, w: &str) -> Result<usize> {
        self.vocab.id(w).ok_or_else(|| Error::Parse(format!("word {w:?} not in vocabulary")))
    }

    /// Example `(cue, answer)` of a set under a relation. Both relations
    /// share the answer `syn2`.
    fn example(rule: Rule, s: &WordSet) -> (&str, &str) {
        match rule {
            Rule::Antonym => (&s.ant1, &s.syn2),
            _ => (&s.syn1, &s.syn2),
        }
    }

    /// Prompt over explicit set indices, the last being the query. Returns
    /// the prompt, the correct answer and the wrong-relation foil.
    pub fn prompt(&self, rule: Rule, rows: &[usize]) -> Result<(Prompt, AnswerSpec, AnswerSpec)> {
        if !matches!(rule, Rule::Synonym | Rule::Antonym) {
            return Err(Error::Config(format!("{} is not a verbal rule", rule.name())));
        }
        let mut tokens = vec![BOS];
        for (e, &r) in rows.iter().enumerate() {
            let (cue, ans) = Self::example(rule, &self.sets[r]);
            tokens.push(self.word(cue)?);
            tokens.push(COLON);
            if e + 1 < rows.len() {
                tokens.push(self.word(ans)?);
                tokens.push(NEWLINE);
            }
        }
        let q = &self.sets[*rows.last().expect("non-empty")];
        let answer = AnswerSpec::new(vec![self.word(&q.syn2)?], self.vocab)?;
        let foil = AnswerSpec::new(vec![self.word(&q.ant2)?], self.vocab)?;
        Ok((Prompt::parse(Format::Verbal, tokens)?, answer, foil))
    }

    /// A synonym/antonym pair. For abstraction and induction targets c2
    /// applies the other relation to the same sets, so both prompts share
    /// every answer word. For retrieval c2 uses the same relation with a
    /// different query set.
    pub fn pair<R: Rng + ?Sized>(&self, rng: &mut R, rule: Rule, target: HeadType) -> Result<ContextPair> {
        let n = self.n_shots + 2;
        let rows: Vec<usize> = sample(rng, self.sets.len(), n).into_vec();
        let main = &rows[..self.n_shots + 1];
        let (c1, y, foil) = self.prompt(rule, main)?;
        let final_pos = c1.final_position();
        match target {
            HeadType::Retrieval => {
                let mut other = main.to_vec();
                *other.last_mut().expect("non-empty") = rows[n - 1];
                let (c2, y2, _) = self.prompt(rule, &other)?;
                Ok(ContextPair {
                    targets: vec![PatchTarget {
                        patch_positions: vec![final_pos],
                        readout: final_pos,
                        y: y.clone(),
                        y_star: y2.clone(),
                    }],
                    c1,
                    c2,
                    y_c1: y,
                    y_c1_star: y2,
                    condition: Condition::Token,
                    target_head_type: target,
                    rule,
                })
            }
            _ => {
                let partner = rule.partner().expect("verbal rules have partners");
                let (c2, _, _) = self.prompt(partner, main)?;
                let patch_positions = match target {
                    HeadType::Abstraction => (0..self.n_shots).map(|e| c1.position_of(e, 2).expect("answer word")).collect(),
                    _ => vec![final_pos],
                };
                Ok(ContextPair {
                    targets: vec![PatchTarget {
                        patch_positions,
                        readout: final_pos,
                        y: y.clone(),
                        y_star: foil.clone(),
                    }],
                    c1,
                    c2,
                    y_c1: y,
                    y_c1_star: foil,
                    condition: Condition::Abstract,
                    target_head_type: target,
                    rule,
                })
            }
        }
    }
}

/// One JSON line of a prompt dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub tokens: Vec<usize>,
    pub annotations: Vec<Annotation>,
    pub answer: AnswerSpec,
}

pub fn dump_prompts(items: &[(Prompt, AnswerSpec)]) -> Result<String> {
    let mut out = String::new();
    for (p, a) in items {
        let rec = PromptRecord { tokens: p.tokens.clone(), annotations: p.annotations.clone(), answer: a.clone() };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}
