//! Tabular autoregressive softmax policy.
//!
//! Every reachable context `(prompt, prefix)` owns one logit vector of length
//! `V`. Contexts that have never been written read as the run's base logit
//! vector, so evaluation never mutates the table; only [`PolicyParams::apply_update`]
//! materializes entries.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Identifier of a registered prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PromptId(pub u32);

/// Ordered token alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabSpec {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl VocabSpec {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate token symbol {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps a whitespace-separated string onto token ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("symbol {w:?} not in vocabulary")))
            })
            .collect()
    }
}

/// A decoding state: the prompt plus the tokens emitted so far.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Context {
    pub prompt: PromptId,
    pub prefix: Vec<TokenId>,
}

impl Context {
    pub fn root(prompt: PromptId) -> Self {
        Self {
            prompt,
            prefix: Vec::new(),
        }
    }

    pub fn new(prompt: PromptId, prefix: &[TokenId]) -> Self {
        Self {
            prompt,
            prefix: prefix.to_vec(),
        }
    }

    /// Contexts visited while emitting `tokens`, one per step.
    pub fn chain(prompt: PromptId, tokens: &[TokenId]) -> impl Iterator<Item = Context> + '_ {
        (0..tokens.len()).map(move |t| Context::new(prompt, &tokens[..t]))
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Sparse parameter-shaped vector keyed by context.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector {
    vocab_size: usize,
    blocks: BTreeMap<Context, Vec<f64>>,
}

impl GradientVector {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            blocks: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn block(&self, ctx: &Context) -> Option<&[f64]> {
        self.blocks.get(ctx).map(Vec::as_slice)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.blocks.iter().map(|(c, v)| (c, v.as_slice()))
    }

    pub fn contexts(&self) -> impl Iterator<Item = &Context> {
        self.blocks.keys()
    }

    fn block_mut(&mut self, ctx: &Context) -> &mut Vec<f64> {
        let v = self.vocab_size;
        self.blocks.entry(ctx.clone()).or_insert_with(|| vec![0.0; v])
    }

    /// `self[ctx] += scale * values`.
    pub fn add_to_block(&mut self, ctx: &Context, scale: f64, values: &[f64]) {
        assert_eq!(values.len(), self.vocab_size, "block length must equal V");
        for (dst, &src) in self.block_mut(ctx).iter_mut().zip(values) {
            *dst += scale * src;
        }
    }

    pub fn set_entry(&mut self, ctx: &Context, token: TokenId, value: f64) {
        self.block_mut(ctx)[token] = value;
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        for (ctx, block) in &other.blocks {
            self.add_to_block(ctx, scale, block);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks.values_mut() {
            block.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Exact inner product; contexts missing on either side contribute zero.
    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.blocks
            .iter()
            .filter_map(|(ctx, a)| {
                other
                    .blocks
                    .get(ctx)
                    .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn block_norm(&self, ctx: &Context) -> f64 {
        self.block(ctx)
            .map(|b| b.iter().map(|x| x * x).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    /// Keeps only the block for `ctx`.
    pub fn restricted_to(&self, ctx: &Context) -> GradientVector {
        let mut out = GradientVector::zeros(self.vocab_size);
        if let Some(b) = self.block(ctx) {
            out.add_to_block(ctx, 1.0, b);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        let mut worst: f64 = 0.0;
        for (ctx, a) in &self.blocks {
            match other.blocks.get(ctx) {
                Some(b) => a.iter().zip(b).for_each(|(x, y)| worst = worst.max((x - y).abs())),
                None => a.iter().for_each(|x| worst = worst.max(x.abs())),
            }
        }
        for (ctx, b) in &other.blocks {
            if !self.blocks.contains_key(ctx) {
                b.iter().for_each(|y| worst = worst.max(y.abs()));
            }
        }
        worst
    }
}

/// The differentiable object: a logit table over reachable contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    max_len: usize,
    num_prompts: u32,
    base_logits: Vec<f64>,
    table: BTreeMap<Context, Vec<f64>>,
}

pub const DEFAULT_MAX_LEN: usize = 8;

impl PolicyParams {
    /// Uniform policy (all-zero base logits) over `vocab_size` tokens.
    pub fn uniform(vocab_size: usize, max_len: usize, num_prompts: u32) -> Result<Self> {
        Self::with_base(vec![0.0; vocab_size], max_len, num_prompts)
    }

    pub fn with_base(base_logits: Vec<f64>, max_len: usize, num_prompts: u32) -> Result<Self> {
        if base_logits.len() < 2 {
            return Err(Error::Config("vocabulary size must be at least 2".into()));
        }
        if base_logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("base logits must be finite".into()));
        }
        if num_prompts == 0 {
            return Err(Error::Config("at least one prompt must be registered".into()));
        }
        Ok(Self {
            vocab_size: base_logits.len(),
            max_len,
            num_prompts,
            base_logits,
            table: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn base_logits(&self) -> &[f64] {
        &self.base_logits
    }

    /// Contexts with a materialized logit vector.
    pub fn stored_contexts(&self) -> impl Iterator<Item = &Context> {
        self.table.keys()
    }

    fn check_context(&self, ctx: &Context) -> Result<()> {
        if ctx.prompt.0 >= self.num_prompts {
            return Err(Error::Config(format!("unknown prompt id {}", ctx.prompt.0)));
        }
        if ctx.prefix.len() > self.max_len {
            return Err(Error::Input(format!(
                "prefix length {} exceeds max trajectory length {}",
                ctx.prefix.len(),
                self.max_len
            )));
        }
        Ok(())
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::Input(format!(
                "token {token} out of range for vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn logits(&self, ctx: &Context) -> Result<&[f64]> {
        self.check_context(ctx)?;
        Ok(self.table.get(ctx).map(Vec::as_slice).unwrap_or(&self.base_logits))
    }

    /// Overwrites the logit vector at `ctx`.
    pub fn set_logits(&mut self, ctx: &Context, logits: Vec<f64>) -> Result<()> {
        self.check_context(ctx)?;
        if logits.len() != self.vocab_size || logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!(
                "logits must be {} finite values",
                self.vocab_size
            )));
        }
        self.table.insert(ctx.clone(), logits);
        Ok(())
    }

    pub fn probs(&self, ctx: &Context) -> Result<Vec<f64>> {
        Ok(softmax(self.logits(ctx)?))
    }

    pub fn log_prob(&self, ctx: &Context, token: TokenId) -> Result<f64> {
        self.check_token(token)?;
        let logits = self.logits(ctx)?;
        Ok(logits[token] - logsumexp(logits))
    }

    /// `log π(tokens | prompt)` via the chain rule.
    pub fn sequence_log_prob(&self, prompt: PromptId, tokens: &[TokenId]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::Input("sequence must be nonempty".into()));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max trajectory length {}",
                tokens.len(),
                self.max_len
            )));
        }
        Context::chain(prompt, tokens)
            .zip(tokens)
            .map(|(ctx, &tok)| self.log_prob(&ctx, tok))
            .sum()
    }

    /// `onehot(token) − softmax(logits)`, the score block at `ctx`.
    pub fn score_block(&self, ctx: &Context, token: TokenId) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let mut block = self.probs(ctx)?;
        block.iter_mut().for_each(|p| *p = -*p);
        block[token] += 1.0;
        Ok(block)
    }

    /// `∇_θ log π(token | ctx)`; nonzero only on the `ctx` block.
    pub fn score_gradient(&self, ctx: &Context, token: TokenId) -> Result<GradientVector> {
        let mut g = GradientVector::zeros(self.vocab_size);
        g.add_to_block(ctx, 1.0, &self.score_block(ctx, token)?);
        Ok(g)
    }

    /// Conditional Fisher information `diag(p) − p pᵀ` at `ctx`, row-major.
    pub fn fisher_matrix(&self, ctx: &Context) -> Result<Vec<Vec<f64>>> {
        let p = self.probs(ctx)?;
        Ok(p.iter()
            .enumerate()
            .map(|(i, &pi)| {
                p.iter()
                    .enumerate()
                    .map(|(j, &pj)| if i == j { pi - pi * pj } else { -pi * pj })
                    .collect()
            })
            .collect())
    }

    /// `KL(π_self(·|ctx) ‖ π_other(·|ctx))`.
    pub fn kl_conditional(&self, other: &PolicyParams, ctx: &Context) -> Result<f64> {
        if other.vocab_size != self.vocab_size {
            return Err(Error::Input("policies have different vocabulary sizes".into()));
        }
        let xa = self.logits(ctx)?;
        let xb = other.logits(ctx)?;
        let delta: Vec<f64> = xa.iter().zip(xb).map(|(a, b)| a - b).collect();
        let pa = softmax(xa);
        let kl: f64 = if delta.iter().all(|d| d.abs() < 1.0) {
            // log-partition difference as ln(1 + Σ p_b (e^δ − 1)), exact for tiny steps
            let pb = softmax(xb);
            let dlse = pb.iter().zip(&delta).map(|(p, d)| p * d.exp_m1()).sum::<f64>().ln_1p();
            pa.iter().zip(&delta).map(|(p, d)| p * (d - dlse)).sum()
        } else {
            let la = log_softmax(xa);
            let lb = log_softmax(xb);
            la.iter().zip(&lb).zip(&pa).map(|((a, b), p)| p * (a - b)).sum()
        };
        Ok(kl.max(0.0))
    }

    /// `θ + eta · grad`, blockwise. Blocks for contexts never written start from the base logits.
    pub fn apply_update(&self, grad: &GradientVector, eta: f64) -> Result<PolicyParams> {
        let mut next = self.clone();
        next.apply_update_in_place(grad, eta)?;
        Ok(next)
    }

    pub fn apply_update_in_place(&mut self, grad: &GradientVector, eta: f64) -> Result<()> {
        if !eta.is_finite() {
            return Err(Error::Input(format!("step size must be finite, got {eta}")));
        }
        if grad.vocab_size() != self.vocab_size {
            return Err(Error::Input("gradient shape does not match policy".into()));
        }
        if eta == 0.0 {
            return Ok(());
        }
        for (ctx, block) in grad.blocks() {
            self.check_context(ctx)?;
            if block.iter().all(|&x| x == 0.0) {
                continue;
            }
            let base = &self.base_logits;
            let entry = self.table.entry(ctx.clone()).or_insert_with(|| base.clone());
            for (w, &g) in entry.iter_mut().zip(block) {
                *w += eta * g;
            }
        }
        Ok(())
    }

    /// Materializes every context in `contexts` so that finite differences can perturb them.
    pub fn materialize<'a>(&mut self, contexts: impl IntoIterator<Item = &'a Context>) -> Result<()> {
        for ctx in contexts {
            self.check_context(ctx)?;
            let base = &self.base_logits;
            self.table.entry(ctx.clone()).or_insert_with(|| base.clone());
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` over every stored parameter of `params`.
///
/// Contexts that are only implicitly at the base logits are not perturbed;
/// call [`PolicyParams::materialize`] first for the contexts of interest.
pub fn finite_diff_gradient<F>(f: F, params: &PolicyParams, step: f64) -> Result<GradientVector>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut grad = GradientVector::zeros(params.vocab_size);
    let mut probe = params.clone();
    let contexts: Vec<Context> = params.table.keys().cloned().collect();
    for ctx in &contexts {
        for k in 0..params.vocab_size {
            let orig = params.table[ctx][k];
            probe.table.get_mut(ctx).expect("stored")[k] = orig + step;
            let up = f(&probe)?;
            probe.table.get_mut(ctx).expect("stored")[k] = orig - step;
            let down = f(&probe)?;
            probe.table.get_mut(ctx).expect("stored")[k] = orig;
            grad.set_entry(ctx, k, (up - down) / (2.0 * step));
        }
    }
    Ok(grad)
}
