//! Group sampling from a frozen old policy, terminal rewards, group-relative
//! advantages and importance ratios.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Context, PolicyParams, PromptId, TokenId, VocabSpec};

/// Standard deviations below this floor mark a group as degenerate.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: PromptId,
    pub tokens: Vec<TokenId>,
    pub reward: Option<f64>,
    /// Per-token `log π_old`, cached when the trajectory was produced.
    pub old_logps: Vec<f64>,
    /// Hit the length limit without emitting the terminator.
    pub truncated: bool,
}

impl Trajectory {
    /// Wraps a fixed token sequence, caching its log-probabilities under `params_old`.
    pub fn from_tokens(params_old: &PolicyParams, prompt: PromptId, tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("trajectory must contain at least one token".into()));
        }
        let old_logps = Context::chain(prompt, &tokens)
            .zip(&tokens)
            .map(|(ctx, &tok)| params_old.log_prob(&ctx, tok))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt,
            tokens,
            reward: None,
            old_logps,
            truncated: false,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(context, token)` pairs along the trajectory.
    pub fn steps(&self) -> impl Iterator<Item = (Context, TokenId)> + '_ {
        Context::chain(self.prompt, &self.tokens).zip(self.tokens.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `R_i − mean(R)`.
    #[default]
    Mean,
    /// `(R_i − mean(R)) / std(R)` with the population standard deviation.
    Standardized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub prompt: PromptId,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub mode: Option<AdvantageMode>,
    /// All advantages were forced to zero (no distinguishing reward signal).
    pub degenerate: bool,
}

impl GroupBatch {
    pub fn new(prompt: PromptId, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::Input(format!(
                "a group needs at least 2 trajectories, got {}",
                trajectories.len()
            )));
        }
        if let Some(t) = trajectories.iter().find(|t| t.prompt != prompt) {
            return Err(Error::Input(format!(
                "trajectory for prompt {} placed in group for prompt {}",
                t.prompt.0, prompt.0
            )));
        }
        if let Some(t) = trajectories.iter().find(|t| t.old_logps.len() != t.tokens.len()) {
            return Err(Error::Input(format!(
                "cached log-probabilities ({}) do not match trajectory length ({})",
                t.old_logps.len(),
                t.tokens.len()
            )));
        }
        Ok(Self {
            prompt,
            trajectories,
            advantages: Vec::new(),
            mode: None,
            degenerate: false,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn rewards(&self) -> Result<Vec<f64>> {
        self.trajectories
            .iter()
            .map(|t| {
                t.reward
                    .ok_or_else(|| Error::Input("rewards have not been assigned".into()))
            })
            .collect()
    }

    pub fn assign_rewards(&mut self, reward_fn: &dyn RewardFn) -> Result<()> {
        if self.trajectories.iter().any(|t| t.reward.is_some()) {
            return Err(Error::Input("rewards are already assigned".into()));
        }
        let rewards: Vec<f64> = self.trajectories.iter().map(|t| reward_fn.reward(&t.tokens)).collect();
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::Input(format!("verifier returned non-finite reward {r}")));
        }
        for (t, r) in self.trajectories.iter_mut().zip(rewards) {
            t.reward = Some(r);
        }
        Ok(())
    }

    /// Fills `advantages` from the assigned rewards.
    pub fn compute_advantages(&mut self, mode: AdvantageMode) -> Result<&[f64]> {
        let rewards = self.rewards()?;
        let (adv, degenerate) = match mode {
            AdvantageMode::Mean => {
                let adv = advantages_mean(&rewards);
                let degenerate = adv.iter().all(|&a| a == 0.0);
                (adv, degenerate)
            }
            AdvantageMode::Standardized => advantages_standardized(&rewards),
        };
        self.advantages = adv;
        self.mode = Some(mode);
        self.degenerate = degenerate;
        Ok(&self.advantages)
    }
}

/// Sampling configuration for one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub group_size: usize,
    pub max_len: usize,
    /// Terminator token. Without one every trajectory runs to `max_len`.
    pub eos: Option<TokenId>,
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; return the last token with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws one trajectory by ancestral sampling from `params_old`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params_old: &PolicyParams,
    prompt: PromptId,
    max_len: usize,
    eos: Option<TokenId>,
    rng: &mut R,
) -> Result<Trajectory> {
    if max_len == 0 {
        return Err(Error::Config("max trajectory length must be positive".into()));
    }
    let mut tokens = Vec::with_capacity(max_len);
    let mut old_logps = Vec::with_capacity(max_len);
    let mut terminated = false;
    while tokens.len() < max_len {
        let ctx = Context::new(prompt, &tokens);
        let probs = params_old.probs(&ctx)?;
        let tok = sample_categorical(&probs, rng);
        old_logps.push(params_old.log_prob(&ctx, tok)?);
        tokens.push(tok);
        if Some(tok) == eos {
            terminated = true;
            break;
        }
    }
    Ok(Trajectory {
        prompt,
        tokens,
        reward: None,
        old_logps,
        truncated: eos.is_some() && !terminated,
    })
}

/// Samples `group_size` trajectories sequentially from one generator.
pub fn sample_group_with<R: Rng + ?Sized>(
    params_old: &PolicyParams,
    prompt: PromptId,
    config: SamplerConfig,
    rng: &mut R,
) -> Result<GroupBatch> {
    if config.group_size < 2 {
        return Err(Error::Input(format!(
            "group size must be at least 2, got {}",
            config.group_size
        )));
    }
    let trajectories = (0..config.group_size)
        .map(|_| sample_trajectory(params_old, prompt, config.max_len, config.eos, rng))
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::new(prompt, trajectories)
}

pub fn sample_group(
    params_old: &PolicyParams,
    prompt: PromptId,
    config: SamplerConfig,
    seed: u64,
) -> Result<GroupBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_group_with(params_old, prompt, config, &mut rng)
}

/// Terminal verifier mapping a finished token sequence to a reward.
pub trait RewardFn {
    fn reward(&self, tokens: &[TokenId]) -> f64;
}

impl<F: Fn(&[TokenId]) -> f64> RewardFn for F {
    fn reward(&self, tokens: &[TokenId]) -> f64 {
        self(tokens)
    }
}

/// Named verifiers that can be referenced from a run configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Verifier {
    /// Always 0.
    Zero,
    /// 1 when the last non-terminator token equals `token`, else 0.
    FinalTokenEquals { token: TokenId, eos: Option<TokenId> },
}

impl Verifier {
    /// Parses `zero` or `final_token_equals:<symbol>`.
    pub fn parse(name: &str, vocab: &VocabSpec, eos: Option<TokenId>) -> Result<Self> {
        if name == "zero" {
            return Ok(Verifier::Zero);
        }
        if let Some(sym) = name.strip_prefix("final_token_equals:") {
            let token = vocab
                .id(sym)
                .ok_or_else(|| Error::Config(format!("reward token {sym:?} not in vocabulary")))?;
            return Ok(Verifier::FinalTokenEquals { token, eos });
        }
        Err(Error::Config(format!("unknown reward function {name:?}")))
    }
}

impl RewardFn for Verifier {
    fn reward(&self, tokens: &[TokenId]) -> f64 {
        match *self {
            Verifier::Zero => 0.0,
            Verifier::FinalTokenEquals { token, eos } => {
                let body = match (tokens.last(), eos) {
                    (Some(&last), Some(e)) if last == e => &tokens[..tokens.len() - 1],
                    _ => tokens,
                };
                if body.last() == Some(&token) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `Â_i = R_i − mean(R)`.
pub fn advantages_mean(rewards: &[f64]) -> Vec<f64> {
    let m = mean(rewards);
    rewards.iter().map(|r| r - m).collect()
}

/// `(R_i − mean) / std` with population std. Returns zeros and `true` when `std < 1e-12`.
pub fn advantages_standardized(rewards: &[f64]) -> (Vec<f64>, bool) {
    let centered = advantages_mean(rewards);
    let var = centered.iter().map(|c| c * c).sum::<f64>() / rewards.len() as f64;
    let std = var.sqrt();
    if std < STD_FLOOR {
        return (vec![0.0; rewards.len()], true);
    }
    (centered.into_iter().map(|c| c / std).collect(), false)
}

/// `ln r_{i,t}` for every token of `traj` under `params`.
pub fn log_ratios(params: &PolicyParams, traj: &Trajectory) -> Result<Vec<f64>> {
    traj.steps()
        .zip(&traj.old_logps)
        .map(|((ctx, tok), &old)| Ok(params.log_prob(&ctx, tok)? - old))
        .collect()
}

/// Token-level importance ratios `r_{i,t} = π_θ / π_old` for each trajectory of the group.
pub fn token_ratios(params: &PolicyParams, group: &GroupBatch) -> Result<Vec<Vec<f64>>> {
    group
        .trajectories
        .iter()
        .map(|t| Ok(log_ratios(params, t)?.into_iter().map(f64::exp).collect()))
        .collect()
}

/// `exp(Σ_t α_t ln r_t)` with `α_t = 1/T` (geometric mean) when `length_norm`, else `1` (product).
pub fn sequence_weight_with(params: &PolicyParams, traj: &Trajectory, length_norm: bool) -> Result<f64> {
    let total: f64 = log_ratios(params, traj)?.iter().sum();
    let alpha = if length_norm { 1.0 / traj.len() as f64 } else { 1.0 };
    Ok((alpha * total).exp())
}

/// Length-normalized sequence weight: the geometric mean of the token ratios.
pub fn sequence_weight(params: &PolicyParams, traj: &Trajectory) -> Result<f64> {
    sequence_weight_with(params, traj, true)
}
