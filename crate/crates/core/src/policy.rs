//! Autoregressive toy policies with closed-form score gradients.
//!
//! Two families are provided:
//!
//! * [`Family::NgramSoftmax`]: a logits table keyed by the last `order`
//!   context tokens. Contexts shorter than `order` are left-padded with a
//!   reserved begin-of-sequence id equal to the vocabulary size.
//! * [`Family::LinearSoftmax`]: `logits = W · features(context)` where the
//!   features are a one-hot of the last context token (or BOS) concatenated
//!   with a one-hot log2 bucket of the context length.
//!
//! Parameters are laid out row-major over `(row, token)`, where a row is an
//! n-gram key or a feature index. Each family activates one (n-gram) or two
//! (linear) rows per context, so the gradient of `log π(token)` is
//! `onehot(token) - softmax(logits)` on every active row and zero elsewhere.

use std::sync::Arc;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Token alphabet. The id `size` is reserved as begin-of-sequence padding and
/// is never sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocabulary {
    size: usize,
    eos_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: usize, eos_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocabulary(format!("size {size} < 2")));
        }
        if eos_id as usize >= size {
            return Err(Error::InvalidVocabulary(format!(
                "eos id {eos_id} not below size {size}"
            )));
        }
        Ok(Self { size, eos_id })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn bos_id(&self) -> TokenId {
        self.size as TokenId
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                size: self.size,
            })
        }
    }
}

/// Prompt plus response tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    /// True iff the response ends with eos or reached the maximum horizon.
    pub terminated: bool,
}

impl TokenSequence {
    pub fn new(prompt: Vec<TokenId>) -> Self {
        Self {
            prompt,
            response: Vec::new(),
            terminated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Context preceding response position `position` (0-based).
    pub fn context(&self, position: usize) -> Context<'_> {
        Context {
            prompt: &self.prompt,
            response: &self.response[..position],
        }
    }

    pub fn checked_context(&self, position: usize) -> Result<Context<'_>> {
        if position > self.response.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: self.response.len(),
            });
        }
        Ok(self.context(position))
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.prompt
            .iter()
            .chain(&self.response)
            .try_for_each(|&t| vocab.check(t))
    }
}

/// A borrowed conditioning context: the prompt followed by a response prefix.
/// Policies are functions of the concatenated token list only.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    prompt: &'a [TokenId],
    response: &'a [TokenId],
}

impl<'a> Context<'a> {
    pub fn new(prompt: &'a [TokenId], response: &'a [TokenId]) -> Self {
        Self { prompt, response }
    }

    pub fn flat(tokens: &'a [TokenId]) -> Self {
        Self {
            prompt: tokens,
            response: &[],
        }
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token `back` places before the end (`back = 1` is the last token).
    fn from_end(&self, back: usize) -> Option<TokenId> {
        let r = self.response.len();
        if back <= r {
            Some(self.response[r - back])
        } else {
            let p = self.prompt.len();
            let back = back - r;
            (back <= p).then(|| self.prompt[p - back])
        }
    }

    pub fn to_vec(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.prompt);
        v.extend_from_slice(self.response);
        v
    }
}

/// Policy family and its shape hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    NgramSoftmax { order: usize },
    LinearSoftmax { buckets: usize },
}

impl Family {
    pub const NGRAM_TAG: u64 = 0;
    pub const LINEAR_TAG: u64 = 1;

    pub fn tag(&self) -> u64 {
        match self {
            Family::NgramSoftmax { .. } => Self::NGRAM_TAG,
            Family::LinearSoftmax { .. } => Self::LINEAR_TAG,
        }
    }

    /// The shape hyperparameter stored in checkpoint headers.
    pub fn order(&self) -> usize {
        match *self {
            Family::NgramSoftmax { order } => order,
            Family::LinearSoftmax { buckets } => buckets,
        }
    }

    pub fn from_tag(tag: u64, order: usize) -> Result<Self> {
        match tag {
            Self::NGRAM_TAG => Ok(Family::NgramSoftmax { order }),
            Self::LINEAR_TAG => Ok(Family::LinearSoftmax { buckets: order }),
            other => Err(Error::FamilyMismatch(format!("unknown family tag {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::NgramSoftmax { .. } => "ngram",
            Family::LinearSoftmax { .. } => "linear",
        }
    }

    /// Number of parameter rows (each row holds `vocab.size()` logits).
    pub fn rows(&self, vocab: &Vocabulary) -> Result<usize> {
        let v1 = vocab.size() + 1;
        match *self {
            Family::NgramSoftmax { order } => {
                if order == 0 {
                    return Err(Error::InvalidParams("n-gram order must be >= 1".into()));
                }
                (0..order)
                    .try_fold(1usize, |acc, _| acc.checked_mul(v1))
                    .ok_or_else(|| Error::InvalidParams("n-gram table too large".into()))
            }
            Family::LinearSoftmax { buckets } => {
                if buckets == 0 {
                    return Err(Error::InvalidParams("bucket count must be >= 1".into()));
                }
                Ok(v1 + buckets)
            }
        }
    }

    pub fn dimension(&self, vocab: &Vocabulary) -> Result<usize> {
        self.rows(vocab)?
            .checked_mul(vocab.size())
            .ok_or_else(|| Error::InvalidParams("parameter count overflows".into()))
    }
}

/// Log2 bucket of a context length, capped at `buckets - 1`.
pub fn length_bucket(len: usize, buckets: usize) -> usize {
    let b = (usize::BITS - (len + 1).leading_zeros() - 1) as usize;
    b.min(buckets - 1)
}

/// Rows of the parameter table that a context reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveRows {
    One(usize),
    Two(usize, usize),
}

impl ActiveRows {
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let (a, b) = match self {
            ActiveRows::One(a) => (a, None),
            ActiveRows::Two(a, b) => (a, Some(b)),
        };
        std::iter::once(a).chain(b)
    }
}

/// Next-token distribution in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDistribution {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ConditionalDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let lse = logsumexp(&logits);
        let log_probs = logits.iter().map(|&l| l - lse).collect();
        Self { logits, log_probs }
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_prob(&self, token: TokenId) -> f64 {
        self.log_probs[token as usize]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>()
    }

    pub fn total_mass(&self) -> f64 {
        self.log_probs.iter().map(|l| l.exp()).sum()
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Dense vector in canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    /// Number of rollouts aggregated into this vector.
    pub sample_count: usize,
}

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            sample_count: 0,
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            values,
            sample_count: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &GradientVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.sample_count += other.sample_count;
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Student or teacher parameters for one of the built-in families.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    family: Family,
    vocab: Vocabulary,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn new(family: Family, vocab: Vocabulary, values: Vec<f64>) -> Result<Self> {
        let dim = family.dimension(&vocab)?;
        if values.len() != dim {
            return Err(Error::InvalidParams(format!(
                "{} family expects {dim} parameters, got {}",
                family.name(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            family,
            vocab,
            values,
        })
    }

    pub fn zeros(family: Family, vocab: Vocabulary) -> Result<Self> {
        let dim = family.dimension(&vocab)?;
        Self::new(family, vocab, vec![0.0; dim])
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.vocab.size()
    }

    fn row(&self, r: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.values[r * v..(r + 1) * v]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let v = self.vocab.size();
        &mut self.values[r * v..(r + 1) * v]
    }

    /// Maps a token to its context-key digit, with BOS for ids past the
    /// sampleable range.
    fn digit(&self, token: Option<TokenId>) -> usize {
        match token {
            Some(t) if (t as usize) < self.vocab.size() => t as usize,
            _ => self.vocab.size(),
        }
    }

    pub fn active_rows(&self, ctx: Context<'_>) -> ActiveRows {
        let v1 = self.vocab.size() + 1;
        match self.family {
            Family::NgramSoftmax { order } => {
                let key = (1..=order)
                    .rev()
                    .fold(0usize, |key, back| key * v1 + self.digit(ctx.from_end(back)));
                ActiveRows::One(key)
            }
            Family::LinearSoftmax { buckets } => {
                let last = self.digit(ctx.from_end(1));
                ActiveRows::Two(last, v1 + length_bucket(ctx.len(), buckets))
            }
        }
    }

    pub fn logits(&self, ctx: Context<'_>) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab.size()];
        for r in self.active_rows(ctx).iter() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w;
            }
        }
        out
    }

    pub fn distribution(&self, ctx: Context<'_>) -> ConditionalDistribution {
        ConditionalDistribution::from_logits(self.logits(ctx))
    }

    /// Conditional distribution at response position `position` of `seq`.
    pub fn next_distribution(
        &self,
        seq: &TokenSequence,
        position: usize,
    ) -> Result<ConditionalDistribution> {
        let ctx = seq.checked_context(position)?;
        Ok(self.distribution(ctx))
    }

    /// Adds `scale · ∇ log π(token | ctx)` into `out`, given the distribution
    /// already evaluated at `ctx`.
    pub fn accumulate_logprob_grad(
        &self,
        ctx: Context<'_>,
        dist: &ConditionalDistribution,
        token: TokenId,
        scale: f64,
        out: &mut [f64],
    ) {
        if scale == 0.0 {
            return;
        }
        let v = self.vocab.size();
        for r in self.active_rows(ctx).iter() {
            let row = &mut out[r * v..(r + 1) * v];
            for (j, (o, lp)) in row.iter_mut().zip(&dist.log_probs).enumerate() {
                let indicator = if j == token as usize { 1.0 } else { 0.0 };
                *o += scale * (indicator - lp.exp());
            }
        }
    }

    /// Exact gradient of `log π(token)` at response position `position`.
    pub fn logprob_grad(
        &self,
        seq: &TokenSequence,
        position: usize,
        token: TokenId,
    ) -> Result<GradientVector> {
        self.vocab.check(token)?;
        let ctx = seq.checked_context(position)?;
        let dist = self.distribution(ctx);
        let mut g = GradientVector::zeros(self.dim());
        self.accumulate_logprob_grad(ctx, &dist, token, 1.0, &mut g.values);
        g.sample_count = 1;
        Ok(g)
    }

    pub fn check_compatible(&self, other: &PolicyParams) -> Result<()> {
        if self.family != other.family {
            return Err(Error::FamilyMismatch(format!(
                "{:?} vs {:?}",
                self.family, other.family
            )));
        }
        if self.vocab.size() != other.vocab.size() {
            return Err(Error::VocabularyMismatch {
                student: self.vocab.size(),
                teacher: other.vocab.size(),
            });
        }
        Ok(())
    }

    pub fn check_gradient(&self, grad: &GradientVector) -> Result<()> {
        if grad.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: grad.dim(),
            });
        }
        Ok(())
    }
}

/// A source of teacher conditionals. Implemented by frozen in-process
/// policies and by remote backends.
pub trait TeacherPolicy: Send + Sync {
    fn vocabulary(&self) -> Vocabulary;

    fn distribution(&self, ctx: Context<'_>) -> Result<ConditionalDistribution>;

    /// Teacher log-probabilities of `seq.response[from..]`, one per position.
    fn response_logprobs(&self, seq: &TokenSequence, from: usize) -> Result<Vec<f64>> {
        (from..seq.len())
            .map(|t| {
                let d = self.distribution(seq.context(t))?;
                Ok(d.log_prob(seq.response[t]))
            })
            .collect()
    }

    /// Set when the teacher's scores are an approximation of its true
    /// distribution (e.g. top-k renormalized).
    fn approximation(&self) -> Option<String> {
        None
    }
}

/// Immutable snapshot of a policy. Gradient queries are rejected.
#[derive(Debug, Clone)]
pub struct FrozenPolicy {
    params: Arc<PolicyParams>,
}

pub fn teacher_freeze(params: &PolicyParams) -> FrozenPolicy {
    FrozenPolicy {
        params: Arc::new(params.clone()),
    }
}

impl FrozenPolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn next_distribution(
        &self,
        seq: &TokenSequence,
        position: usize,
    ) -> Result<ConditionalDistribution> {
        self.params.next_distribution(seq, position)
    }

    pub fn logprob_grad(
        &self,
        _seq: &TokenSequence,
        _position: usize,
        _token: TokenId,
    ) -> Result<GradientVector> {
        Err(Error::FrozenPolicy)
    }
}

impl TeacherPolicy for FrozenPolicy {
    fn vocabulary(&self) -> Vocabulary {
        self.params.vocab()
    }

    fn distribution(&self, ctx: Context<'_>) -> Result<ConditionalDistribution> {
        Ok(self.params.distribution(ctx))
    }
}
