//! Constructed groups and policies used by the experiments.

use crate::error::{Error, Result};
use crate::policy::{Context, PolicyParams, PromptId, TokenId, VocabSpec};
use crate::rollout::{GroupBatch, Trajectory};

pub const TOY_PROMPT: PromptId = PromptId(0);
pub const TOY_EOS: &str = "<eos>";
pub const TOY_SYMBOLS: [&str; 8] = ["<eos>", "The", "answer", "is", "25", "20", "10+10", "="];
pub const TOY_TEXTS: [&str; 3] = ["The answer is 25 <eos>", "The answer is 20 <eos>", "10+10 = 20 <eos>"];
pub const TOY_REWARD: &str = "final_token_equals:20";

pub fn toy_vocab() -> VocabSpec {
    VocabSpec::new(TOY_SYMBOLS).expect("toy vocabulary is valid")
}

/// Token ids of the wrong answer and the two equivalent correct answers.
pub fn toy_sequences(vocab: &VocabSpec) -> Result<[Vec<TokenId>; 3]> {
    Ok([
        vocab.encode(TOY_TEXTS[0])?,
        vocab.encode(TOY_TEXTS[1])?,
        vocab.encode(TOY_TEXTS[2])?,
    ])
}

/// The three toy answers as a group scored under `params_old`.
pub fn toy_group(params_old: &PolicyParams, vocab: &VocabSpec) -> Result<GroupBatch> {
    let trajectories = toy_sequences(vocab)?
        .into_iter()
        .map(|tokens| Trajectory::from_tokens(params_old, TOY_PROMPT, tokens))
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::new(TOY_PROMPT, trajectories)
}

/// Sets the distribution at `ctx` so that `π(tok)/π_uniform(tok) = ratio` for
/// each listed token; unlisted tokens share the remaining mass equally.
pub fn set_ratios(params: &mut PolicyParams, ctx: &Context, ratios: &[(TokenId, f64)]) -> Result<()> {
    let v = params.vocab_size();
    let p_old = 1.0 / v as f64;
    let mut probs = vec![f64::NAN; v];
    let mut listed_mass = 0.0;
    for &(tok, ratio) in ratios {
        if tok >= v || !probs[tok].is_nan() {
            return Err(Error::Input(format!("token {tok} is out of range or listed twice")));
        }
        if !(ratio > 0.0) || !ratio.is_finite() {
            return Err(Error::Input(format!("ratio must be positive and finite, got {ratio}")));
        }
        probs[tok] = ratio * p_old;
        listed_mass += ratio * p_old;
    }
    let free = probs.iter().filter(|p| p.is_nan()).count();
    let rest = 1.0 - listed_mass;
    if free == 0 || !(rest > 0.0) {
        return Err(Error::Input(format!(
            "ratios {ratios:?} leave no probability mass for the other tokens"
        )));
    }
    for p in probs.iter_mut().filter(|p| p.is_nan()) {
        *p = rest / free as f64;
    }
    params.set_logits(ctx, probs.iter().map(|p| p.ln()).collect())
}

/// A group whose members share a common prefix and differ only in their final token.
#[derive(Debug, Clone)]
pub struct SharedPrefixSetup {
    pub vocab: VocabSpec,
    pub params_old: PolicyParams,
    pub params: PolicyParams,
    pub group: GroupBatch,
    /// Length of the common prefix.
    pub n_shared: usize,
}

impl SharedPrefixSetup {
    /// The `(h*, a*)` pair emitted by every member at step `t`.
    pub fn shared_at(&self, t: usize) -> (Context, TokenId) {
        let prefix: Vec<TokenId> = (0..t).collect();
        (Context::new(self.group.prompt, &prefix), t)
    }
}

/// Builds a group where every member emits tokens `0, 1, …, n−1` (`n =
/// shared_ratios.len()`) and then member `i` emits token `n + i`. The old
/// policy is uniform; under the current policy the shared token at step `t`
/// has ratio `shared_ratios[t]` and member `i`'s final token has ratio
/// `final_ratios[i]`.
pub fn shared_prefix_setup(
    shared_ratios: &[f64],
    final_ratios: &[f64],
    symbols: Option<&[&str]>,
) -> Result<SharedPrefixSetup> {
    let n = shared_ratios.len();
    let g = final_ratios.len();
    if g < 2 {
        return Err(Error::Input("need at least 2 group members".into()));
    }
    let v = (n + g).max(4);
    let vocab = match symbols {
        Some(s) => VocabSpec::new(s.iter().copied())?,
        None => VocabSpec::new((0..v).map(|i| format!("t{i}")))?,
    };
    if vocab.size() < n + g {
        return Err(Error::Input(format!(
            "vocabulary of {} symbols is too small for {n} shared and {g} final tokens",
            vocab.size()
        )));
    }
    let params_old = PolicyParams::uniform(vocab.size(), n + 1, 1)?;
    let mut params = params_old.clone();
    let prompt = PromptId(0);
    let prefix: Vec<TokenId> = (0..n).collect();
    for (t, &rho) in shared_ratios.iter().enumerate() {
        set_ratios(&mut params, &Context::new(prompt, &prefix[..t]), &[(t, rho)])?;
    }
    let finals: Vec<(TokenId, f64)> = final_ratios.iter().enumerate().map(|(i, &l)| (n + i, l)).collect();
    set_ratios(&mut params, &Context::new(prompt, &prefix), &finals)?;
    let trajectories = (0..g)
        .map(|i| {
            let mut tokens = prefix.clone();
            tokens.push(n + i);
            Trajectory::from_tokens(&params_old, prompt, tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    let group = GroupBatch::new(prompt, trajectories)?;
    Ok(SharedPrefixSetup {
        vocab,
        params_old,
        params,
        group,
        n_shared: n,
    })
}

pub const MINIMAL_PREFIX_SYMBOLS: [&str; 4] = ["answer", "is", "25", "20"];
pub const CLIP_BREAK_SYMBOLS: [&str; 4] = ["a", "b", "c", "d"];

/// `answer is 25` vs `answer is 20` with prefix ratios `rho` and final ratios `lambda`.
pub fn minimal_prefix_setup(rho: &[f64], lambda: &[f64]) -> Result<SharedPrefixSetup> {
    if rho.len() != 2 || lambda.len() != 2 {
        return Err(Error::Config(
            "minimal_prefix needs two prefix and two final ratios".into(),
        ));
    }
    shared_prefix_setup(rho, lambda, Some(&MINIMAL_PREFIX_SYMBOLS))
}

/// `a b` vs `a c` with the shared `a` at ratio `w` and the final tokens on-policy.
pub fn clip_break_setup(w: f64) -> Result<SharedPrefixSetup> {
    shared_prefix_setup(&[w], &[1.0, 1.0], Some(&CLIP_BREAK_SYMBOLS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::sequence_weight_with;

    #[test]
    fn toy_sequences_have_expected_lengths() {
        let vocab = toy_vocab();
        let seqs = toy_sequences(&vocab).unwrap();
        assert_eq!(seqs.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5, 4]);
        assert_eq!(seqs[1][..3], seqs[0][..3]);
    }

    #[test]
    fn shared_prefix_ratios_are_as_constructed() {
        let setup = minimal_prefix_setup(&[1.2, 0.9], &[0.9, 1.1]).unwrap();
        for (traj, lam) in setup.group.trajectories.iter().zip([0.9, 1.1]) {
            let s = sequence_weight_with(&setup.params, traj, false).unwrap();
            assert!((s - 1.2 * 0.9 * lam).abs() < 1e-12);
        }
        let (ctx, tok) = setup.shared_at(1);
        assert_eq!(ctx.prefix, vec![0]);
        assert_eq!(tok, 1);
    }

    #[test]
    fn infeasible_ratios_are_rejected() {
        assert!(shared_prefix_setup(&[4.5], &[1.0, 1.0], None).is_err());
        assert!(shared_prefix_setup(&[1.0], &[2.0, 2.0], None).is_err());
        assert!(shared_prefix_setup(&[1.0], &[1.0], None).is_err());
    }
}
