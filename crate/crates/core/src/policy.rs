//! Autoregressive linear-softmax policy over the trace vocabulary.
//!
//! Logits are `W·φ` for a sparse feature vector `φ` built from the episode
//! context, an optional privileged block, the previous token, a position
//! bucket and the grammar slot the prefix has reached. The context and
//! privileged blocks each have one copy per slot class ([`Gate`]); only the
//! copy for the current slot is active. Because the model is
//! linear in `W`, log-likelihood gradients are available in closed form.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{SymbolKind, Tag, TokenId, Vocabulary};

/// Where the prefix sits in the trace grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Start,
    /// Inside `<think>`, after `groups` complete evidence groups (capped at 2).
    ThinkBody {
        groups: u8,
    },
    ObjName,
    ObjClose,
    ExpectBox,
    /// Box coordinate `coord` (0..4); `filled` once its digit is written.
    BoxCoord {
        answer: bool,
        coord: u8,
        filled: bool,
    },
    ExpectTime,
    /// Timestamp digits written so far (capped at 2).
    Time {
        answer: bool,
        digits: u8,
    },
    AfterThink,
    AnswerLetter,
    /// Inside `<answer>` after the letter and `items` grounding items.
    AnswerBody {
        items: u8,
    },
    Done,
    Malformed,
}

/// Which copies of the context and privileged blocks a slot reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Structure,
    TimeFirst,
    TimeSecond,
    BoxX,
    BoxY,
    Letter,
}

impl Gate {
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Cap on evidence groups in the think section and items in the answer.
const MAX_GROUPS: u8 = 2;
/// Cap on digits per timestamp.
const MAX_TIME_DIGITS: u8 = 2;

impl Slot {
    pub const COUNT: usize = 37;

    pub fn index(self) -> usize {
        match self {
            Slot::Start => 0,
            Slot::ThinkBody { groups } => 1 + groups as usize,
            Slot::ObjName => 4,
            Slot::ObjClose => 5,
            Slot::ExpectBox => 6,
            Slot::BoxCoord { answer, coord, filled } => 7 + 8 * answer as usize + 2 * coord as usize + filled as usize,
            Slot::ExpectTime => 23,
            Slot::Time { answer, digits } => 24 + 3 * answer as usize + digits as usize,
            Slot::AfterThink => 30,
            Slot::AnswerLetter => 31,
            Slot::AnswerBody { items } => 32 + items as usize,
            Slot::Done => 35,
            Slot::Malformed => 36,
        }
    }

    pub fn gate(self) -> Gate {
        match self {
            Slot::Time { digits: 0, .. } => Gate::TimeFirst,
            Slot::Time { .. } => Gate::TimeSecond,
            Slot::BoxCoord { coord, .. } if coord % 2 == 0 => Gate::BoxX,
            Slot::BoxCoord { .. } => Gate::BoxY,
            Slot::AnswerLetter => Gate::Letter,
            _ => Gate::Structure,
        }
    }

    /// Tokens the grammar allows next.
    pub fn valid_tokens(self, vocab: &Vocabulary) -> Vec<TokenId> {
        let digits = || (0..10).map(|d| vocab.digit(d));
        match self {
            Slot::Start => vec![vocab.tag(Tag::ThinkOpen)],
            Slot::ThinkBody { groups } if groups >= MAX_GROUPS => vec![vocab.tag(Tag::ThinkClose)],
            Slot::ThinkBody { groups } => {
                let mut v = vec![vocab.tag(Tag::ObjOpen), vocab.tag(Tag::TimeOpen)];
                if groups > 0 {
                    v.push(vocab.tag(Tag::ThinkClose));
                }
                v
            }
            Slot::ObjName => (0..vocab.n_objects()).map(|i| vocab.object(i)).collect(),
            Slot::ObjClose => vec![vocab.tag(Tag::ObjClose)],
            Slot::ExpectBox => vec![vocab.tag(Tag::BoxOpen)],
            Slot::BoxCoord { filled: false, .. } => digits().collect(),
            Slot::BoxCoord { coord, .. } if coord < 3 => vec![vocab.separator()],
            Slot::BoxCoord { .. } => vec![vocab.tag(Tag::BoxClose)],
            Slot::ExpectTime => vec![vocab.tag(Tag::TimeOpen)],
            Slot::Time { digits: 0, .. } => digits().collect(),
            Slot::Time { digits, .. } if digits < MAX_TIME_DIGITS => digits_and(vocab, vocab.tag(Tag::TimeClose)),
            Slot::Time { .. } => vec![vocab.tag(Tag::TimeClose)],
            Slot::AfterThink => vec![vocab.tag(Tag::AnswerOpen)],
            Slot::AnswerLetter => (0..vocab.n_letters()).map(|i| vocab.letter(i)).collect(),
            Slot::AnswerBody { items } if items >= MAX_GROUPS => vec![vocab.tag(Tag::AnswerClose)],
            Slot::AnswerBody { .. } => {
                vec![vocab.tag(Tag::TimeOpen), vocab.tag(Tag::BoxOpen), vocab.tag(Tag::AnswerClose)]
            }
            Slot::Done | Slot::Malformed => vec![vocab.eos()],
        }
    }

    /// Slot after emitting `token`; any token outside `valid_tokens` leads
    /// to `Malformed`. Returning to a body slot reports a zero count, which
    /// [`Grammar`] replaces with the tracked one.
    pub fn advance(self, token: TokenId, vocab: &Vocabulary) -> Slot {
        let kind = vocab.kind(token);
        let tag = vocab.tag_of(token);
        let is_digit = matches!(kind, SymbolKind::Digit(_));
        match (self, tag) {
            (Slot::Start, Some(Tag::ThinkOpen)) => Slot::ThinkBody { groups: 0 },
            (Slot::ThinkBody { groups }, Some(Tag::ObjOpen)) if groups < MAX_GROUPS => Slot::ObjName,
            (Slot::ThinkBody { groups }, Some(Tag::TimeOpen)) if groups < MAX_GROUPS => {
                Slot::Time { answer: false, digits: 0 }
            }
            (Slot::ThinkBody { groups }, Some(Tag::ThinkClose)) if groups > 0 => Slot::AfterThink,
            (Slot::ObjName, None) if matches!(kind, SymbolKind::Object(_)) => Slot::ObjClose,
            (Slot::ObjClose, Some(Tag::ObjClose)) => Slot::ExpectBox,
            (Slot::ExpectBox, Some(Tag::BoxOpen)) => Slot::BoxCoord { answer: false, coord: 0, filled: false },
            (Slot::BoxCoord { answer, coord, filled: false }, None) if is_digit => {
                Slot::BoxCoord { answer, coord, filled: true }
            }
            (Slot::BoxCoord { answer, coord, filled: true }, None) if coord < 3 && token == vocab.separator() => {
                Slot::BoxCoord { answer, coord: coord + 1, filled: false }
            }
            (Slot::BoxCoord { answer, coord: 3, filled: true }, Some(Tag::BoxClose)) => {
                if answer {
                    Slot::AnswerBody { items: 0 }
                } else {
                    Slot::ExpectTime
                }
            }
            (Slot::ExpectTime, Some(Tag::TimeOpen)) => Slot::Time { answer: false, digits: 0 },
            (Slot::Time { answer, digits }, None) if is_digit && digits < MAX_TIME_DIGITS => {
                Slot::Time { answer, digits: digits + 1 }
            }
            (Slot::Time { answer, digits }, Some(Tag::TimeClose)) if digits > 0 => {
                if answer {
                    Slot::AnswerBody { items: 0 }
                } else {
                    Slot::ThinkBody { groups: 0 }
                }
            }
            (Slot::AfterThink, Some(Tag::AnswerOpen)) => Slot::AnswerLetter,
            (Slot::AnswerLetter, None) if matches!(kind, SymbolKind::Letter(_)) => Slot::AnswerBody { items: 0 },
            (Slot::AnswerBody { items }, Some(Tag::TimeOpen)) if items < MAX_GROUPS => {
                Slot::Time { answer: true, digits: 0 }
            }
            (Slot::AnswerBody { items }, Some(Tag::BoxOpen)) if items < MAX_GROUPS => {
                Slot::BoxCoord { answer: true, coord: 0, filled: false }
            }
            (Slot::AnswerBody { .. }, Some(Tag::AnswerClose)) => Slot::Done,
            _ => Slot::Malformed,
        }
    }
}

fn digits_and(vocab: &Vocabulary, extra: TokenId) -> Vec<TokenId> {
    let mut v: Vec<TokenId> = (0..10).map(|d| vocab.digit(d)).collect();
    v.push(extra);
    v
}

/// Grammar automaton state: the current slot plus the group and item counts
/// that `Slot` alone forgets while inside a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grammar {
    pub slot: Slot,
    groups: u8,
    items: u8,
}

impl Default for Grammar {
    fn default() -> Self {
        Self { slot: Slot::Start, groups: 0, items: 0 }
    }
}

impl Grammar {
    pub fn advance(&mut self, token: TokenId, vocab: &Vocabulary) {
        let mut next = self.slot.advance(token, vocab);
        match next {
            Slot::ThinkBody { .. } => {
                if self.slot != Slot::Start {
                    self.groups = (self.groups + 1).min(MAX_GROUPS);
                }
                next = Slot::ThinkBody { groups: self.groups };
            }
            Slot::AnswerBody { .. } => {
                if self.slot != Slot::AnswerLetter {
                    self.items = (self.items + 1).min(MAX_GROUPS);
                }
                next = Slot::AnswerBody { items: self.items };
            }
            _ => {}
        }
        self.slot = next;
    }

    pub fn from_prefix(prefix: &[TokenId], vocab: &Vocabulary) -> Self {
        let mut g = Self::default();
        for &t in prefix {
            g.advance(t, vocab);
        }
        g
    }
}

/// Offsets of the feature blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub context_dim: usize,
    pub privileged_dim: usize,
    pub vocab_size: usize,
    pub position_buckets: usize,
    pub max_len: usize,
}

impl FeatureLayout {
    pub fn context_offset(&self, gate: Gate) -> usize {
        gate.index() * self.context_dim
    }

    /// Start of the gated privileged block for `gate`.
    pub fn privileged_offset(&self, gate: Gate) -> usize {
        Gate::COUNT * self.context_dim + gate.index() * self.privileged_dim
    }

    pub fn prev_token_offset(&self) -> usize {
        Gate::COUNT * (self.context_dim + self.privileged_dim)
    }

    /// Index of the begin-of-sequence marker in the previous-token block.
    pub fn bos_index(&self) -> usize {
        self.prev_token_offset() + self.vocab_size
    }

    pub fn position_offset(&self) -> usize {
        self.bos_index() + 1
    }

    pub fn slot_offset(&self) -> usize {
        self.position_offset() + self.position_buckets
    }

    pub fn bias_index(&self) -> usize {
        self.slot_offset() + Slot::COUNT
    }

    pub fn dim(&self) -> usize {
        self.bias_index() + 1
    }

    /// Bucket of 1-based position `t`.
    pub fn position_bucket(&self, t: usize) -> usize {
        let b = (t.saturating_sub(1)) * self.position_buckets / self.max_len.max(1);
        b.min(self.position_buckets - 1)
    }
}

/// Sparse feature vector: parallel index/value arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Features {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl Features {
    fn push(&mut self, i: usize, v: f64) {
        if v != 0.0 {
            self.idx.push(i);
            self.val.push(v);
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut d = vec![0.0; dim];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            d[i] += v;
        }
        d
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx.iter().copied().zip(self.val.iter().copied())
    }
}

/// Conditioning for one next-token prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub features: Features,
    pub prev_token: Option<TokenId>,
    /// 1-based position of the token being predicted.
    pub position: usize,
    pub bucket: usize,
    pub slot: Slot,
}

/// Builds the state for predicting token `t` (1-based) after `prefix`, which
/// must hold the first `t - 1` tokens.
pub fn featurize(
    layout: &FeatureLayout,
    vocab: &Vocabulary,
    context: &[f64],
    privileged: Option<&[f64]>,
    prefix: &[TokenId],
    t: usize,
) -> Result<PolicyState> {
    let grammar = Grammar::from_prefix(&prefix[..t.saturating_sub(1).min(prefix.len())], vocab);
    let prev = if t > 1 { prefix.get(t - 2).copied() } else { None };
    featurize_at(layout, context, privileged, prev, t, grammar.slot)
}

/// Like [`featurize`] but with the grammar slot already known.
pub fn featurize_at(
    layout: &FeatureLayout,
    context: &[f64],
    privileged: Option<&[f64]>,
    prev_token: Option<TokenId>,
    t: usize,
    slot: Slot,
) -> Result<PolicyState> {
    if context.len() != layout.context_dim {
        return Err(Error::DimensionMismatch { expected: layout.context_dim, got: context.len() });
    }
    let mut f = Features::default();
    let base = layout.context_offset(slot.gate());
    for (i, &x) in context.iter().enumerate() {
        f.push(base + i, x);
    }
    if let Some(p) = privileged {
        if p.len() != layout.privileged_dim {
            return Err(Error::DimensionMismatch { expected: layout.privileged_dim, got: p.len() });
        }
        let off = layout.privileged_offset(slot.gate());
        for (i, &x) in p.iter().enumerate() {
            f.push(off + i, x);
        }
    }
    let prev_index = match prev_token {
        Some(tok) if tok < layout.vocab_size => layout.prev_token_offset() + tok,
        Some(tok) => return Err(Error::DimensionMismatch { expected: layout.vocab_size, got: tok + 1 }),
        None => layout.bos_index(),
    };
    f.push(prev_index, 1.0);
    let bucket = layout.position_bucket(t);
    f.push(layout.position_offset() + bucket, 1.0);
    f.push(layout.slot_offset() + slot.index(), 1.0);
    f.push(layout.bias_index(), 1.0);
    Ok(PolicyState { features: f, prev_token, position: t, bucket, slot })
}

/// Row-major `vocab_size × dim` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

pub const PARAMS_MAGIC: &str = "VISDPARAMS";
pub const PARAMS_VERSION: u32 = 1;

impl PolicyParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self { vocab_size, dim, weights: vec![0.0; vocab_size * dim] }
    }

    pub fn get(&self, token: TokenId, feature: usize) -> f64 {
        self.weights[token * self.dim + feature]
    }

    pub fn get_mut(&mut self, token: TokenId, feature: usize) -> &mut f64 {
        &mut self.weights[token * self.dim + feature]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size && self.dim == other.dim
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", self.vocab_size, self.dim, other.vocab_size, other.dim)))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn logits(&self, state: &PolicyState) -> Result<Vec<f64>> {
        if let Some(&max) = state.features.idx.iter().max() {
            if max >= self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: max + 1 });
            }
        }
        Ok((0..self.vocab_size)
            .map(|v| {
                let row = &self.weights[v * self.dim..(v + 1) * self.dim];
                state.features.iter().map(|(i, x)| row[i] * x).sum()
            })
            .collect())
    }

    /// Text format: a `VISDPARAMS <version> <vocab> <dim>` header line, then
    /// one weight per line in row-major order.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::with_capacity(self.weights.len() * 8 + 32);
        let _ = writeln!(s, "{PARAMS_MAGIC} {PARAMS_VERSION} {} {}", self.vocab_size, self.dim);
        for w in &self.weights {
            let _ = writeln!(s, "{w}");
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::ParamFormat("empty input".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad = |m: &str| Error::ParamFormat(m.to_string());
        if fields.len() != 4 || fields[0] != PARAMS_MAGIC {
            return Err(bad("missing header"));
        }
        if fields[1].parse::<u32>().ok() != Some(PARAMS_VERSION) {
            return Err(bad("unsupported version"));
        }
        let vocab_size: usize = fields[2].parse().map_err(|_| bad("vocab size"))?;
        let dim: usize = fields[3].parse().map_err(|_| bad("feature dim"))?;
        let mut weights = Vec::with_capacity(vocab_size * dim);
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let w: f64 = line.parse().map_err(|_| bad("weight value"))?;
            if !w.is_finite() {
                return Err(bad("non-finite weight"));
            }
            weights.push(w);
        }
        if weights.len() != vocab_size * dim {
            return Err(bad("weight count does not match header"));
        }
        Ok(Self { vocab_size, dim, weights })
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Log-softmax, evaluated as `l - max - ln Σ exp(l - max)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - max - lse).collect()
}

pub fn distribution(params: &PolicyParams, state: &PolicyState) -> Result<Vec<f64>> {
    Ok(softmax(&params.logits(state)?))
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Adds `coef · ∇_W log π(token | state)` into `grad` (same layout as the
/// weights) and returns the log-probability.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    state: &PolicyState,
    token: TokenId,
    coef: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if token >= params.vocab_size {
        return Err(Error::DimensionMismatch { expected: params.vocab_size, got: token + 1 });
    }
    if grad.len() != params.weights.len() {
        return Err(Error::DimensionMismatch { expected: params.weights.len(), got: grad.len() });
    }
    let logits = params.logits(state)?;
    let logp = log_softmax(&logits);
    if coef != 0.0 {
        for (v, lp) in logp.iter().enumerate() {
            let r = coef * (f64::from(u8::from(v == token)) - lp.exp());
            if r == 0.0 {
                continue;
            }
            let row = &mut grad[v * params.dim..(v + 1) * params.dim];
            for (i, x) in state.features.iter() {
                row[i] += r * x;
            }
        }
    }
    Ok(logp[token])
}

/// Log-probability of `token` and its dense gradient with respect to `W`.
pub fn logprob_and_grad(params: &PolicyParams, state: &PolicyState, token: TokenId) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.weights.len()];
    let lp = accumulate_logprob_grad(params, state, token, 1.0, &mut grad)?;
    Ok((lp, grad))
}

/// Everything fixed for the length of one rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutContext<'a> {
    pub layout: &'a FeatureLayout,
    pub vocab: &'a Vocabulary,
    pub context: &'a [f64],
}

/// A sampled completion with its sampling-time log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    /// Full sampling-time next-token distributions.
    pub dists: Vec<Vec<f64>>,
    pub states: Vec<PolicyState>,
    /// True when the rollout ended by emitting end-of-sequence.
    pub terminated: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Inverse-CDF draw from `probs`.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples tokens until end-of-sequence or `max_len` tokens.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    ctx: &RolloutContext<'_>,
    rng: &mut R,
    max_len: usize,
) -> Result<Rollout> {
    let max_len = max_len.max(1);
    let mut grammar = Grammar::default();
    let mut out =
        Rollout { tokens: Vec::new(), logprobs: Vec::new(), dists: Vec::new(), states: Vec::new(), terminated: false };
    let mut prev = None;
    for t in 1..=max_len {
        let state = featurize_at(ctx.layout, ctx.context, None, prev, t, grammar.slot)?;
        let logp = log_softmax(&params.logits(&state)?);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let token = sample_index(&probs, rng);
        out.tokens.push(token);
        out.logprobs.push(logp[token]);
        out.dists.push(probs);
        out.states.push(state);
        if token == ctx.vocab.eos() {
            out.terminated = true;
            break;
        }
        grammar.advance(token, ctx.vocab);
        prev = Some(token);
    }
    Ok(out)
}

/// Adds `strength` to the logit of every grammar-valid token in each slot,
/// through the slot one-hot features.
pub fn add_format_prior(params: &mut PolicyParams, layout: &FeatureLayout, vocab: &Vocabulary, strength: f64) {
    for slot in all_slots() {
        let col = layout.slot_offset() + slot.index();
        for tok in slot.valid_tokens(vocab) {
            *params.get_mut(tok, col) += strength;
        }
    }
}

/// Every slot value, in index order.
pub fn all_slots() -> Vec<Slot> {
    let mut v = vec![Slot::Start];
    v.extend((0..=MAX_GROUPS).map(|groups| Slot::ThinkBody { groups }));
    v.extend([Slot::ObjName, Slot::ObjClose, Slot::ExpectBox]);
    for answer in [false, true] {
        for coord in 0..4 {
            for filled in [false, true] {
                v.push(Slot::BoxCoord { answer, coord, filled });
            }
        }
    }
    v.push(Slot::ExpectTime);
    for answer in [false, true] {
        v.extend((0..=MAX_TIME_DIGITS).map(|digits| Slot::Time { answer, digits }));
    }
    v.extend([Slot::AfterThink, Slot::AnswerLetter]);
    v.extend((0..=MAX_GROUPS).map(|items| Slot::AnswerBody { items }));
    v.extend([Slot::Done, Slot::Malformed]);
    v
}
