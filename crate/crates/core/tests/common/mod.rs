#![allow(dead_code)]

use std::collections::BTreeMap;

use groupgrad_core::rollout::{sample_group_with, SamplerConfig};
use groupgrad_core::EstimatorFamily;
use groupgrad_core::{Context, GradientVector, GroupBatch, PolicyParams, PromptId, TokenId};
use rand::Rng;

pub const P: PromptId = PromptId(0);

/// Central differences of `f` over the logits at each context in `contexts`.
/// Written against `set_logits` only, independent of the library's helper.
pub fn fd_oracle<F>(f: F, params: &PolicyParams, contexts: &[Context], h: f64) -> BTreeMap<Context, Vec<f64>>
where
    F: Fn(&PolicyParams) -> f64,
{
    let mut out = BTreeMap::new();
    for ctx in contexts {
        let base = params.logits(ctx).unwrap().to_vec();
        let mut block = vec![0.0; base.len()];
        for k in 0..base.len() {
            let mut up = params.clone();
            let mut l = base.clone();
            l[k] += h;
            up.set_logits(ctx, l).unwrap();
            let mut down = params.clone();
            let mut l = base.clone();
            l[k] -= h;
            down.set_logits(ctx, l).unwrap();
            block[k] = (f(&up) - f(&down)) / (2.0 * h);
        }
        out.insert(ctx.clone(), block);
    }
    out
}

pub fn max_diff(g: &GradientVector, oracle: &BTreeMap<Context, Vec<f64>>) -> f64 {
    let mut worst: f64 = 0.0;
    for (ctx, want) in oracle {
        let got = g
            .block(ctx)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; want.len()]);
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    for (ctx, block) in g.blocks() {
        if !oracle.contains_key(ctx) {
            worst = worst.max(block.iter().fold(0.0, |m, x| m.max(x.abs())));
        }
    }
    worst
}

/// Softmax written out directly.
pub fn probs_oracle(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    logits.iter().map(|x| x.exp() / z).collect()
}

pub fn distinct_contexts(group: &GroupBatch) -> Vec<Context> {
    let mut v: Vec<Context> = group
        .trajectories
        .iter()
        .flat_map(|t| t.steps().map(|(c, _)| c).collect::<Vec<_>>())
        .collect();
    v.sort();
    v.dedup();
    v
}

/// Random old policy at the root, a sampled group, standardized random
/// rewards, and a current policy with every visited context perturbed.
pub fn random_group<R: Rng>(
    rng: &mut R,
    vocab: usize,
    g: usize,
    max_len: usize,
    scale: f64,
) -> (PolicyParams, PolicyParams, GroupBatch) {
    let mut old = PolicyParams::uniform(vocab, max_len, 1).unwrap();
    old.set_logits(
        &Context::root(P),
        (0..vocab).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let cfg = SamplerConfig {
        group_size: g,
        max_len,
        eos: Some(0),
    };
    let mut group = sample_group_with(&old, P, cfg, rng).unwrap();
    let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..1.0)).collect();
    let n = g as f64;
    let m = rewards.iter().sum::<f64>() / n;
    let sd = (rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n).sqrt();
    group.advantages = rewards.iter().map(|r| (r - m) / sd).collect();
    for (t, r) in group.trajectories.iter_mut().zip(rewards) {
        t.reward = Some(r);
    }
    let mut params = old.clone();
    for ctx in distinct_contexts(&group) {
        let l: Vec<f64> = old
            .logits(&ctx)
            .unwrap()
            .iter()
            .map(|x| x + rng.gen_range(-scale..scale))
            .collect();
        params.set_logits(&ctx, l).unwrap();
    }
    (old, params, group)
}

/// Token ratios `π/π_old` recomputed from probabilities.
pub fn ratios_oracle(params: &PolicyParams, old: &PolicyParams, tokens: &[TokenId]) -> Vec<f64> {
    (0..tokens.len())
        .map(|t| {
            let ctx = Context::new(P, &tokens[..t]);
            let p = probs_oracle(params.logits(&ctx).unwrap())[tokens[t]];
            let q = probs_oracle(old.logits(&ctx).unwrap())[tokens[t]];
            p / q
        })
        .collect()
}

/// Gradient coefficient along the score of `(ctx, tok)`: `⟨block, score⟩/‖score‖²`
/// with the score built from [`probs_oracle`].
pub fn coef_along_score(g: &GradientVector, params: &PolicyParams, ctx: &Context, tok: TokenId) -> f64 {
    let mut score: Vec<f64> = probs_oracle(params.logits(ctx).unwrap()).iter().map(|p| -p).collect();
    score[tok] += 1.0;
    let nn: f64 = score.iter().map(|x| x * x).sum();
    g.block(ctx)
        .map(|b| b.iter().zip(&score).map(|(x, y)| x * y).sum::<f64>() / nn)
        .unwrap_or(0.0)
}

/// Policy with `π(tok | ctx) = ratio / V` at listed positions, uniform old policy.
/// Returns `(old, new, group)` for members sharing `shared.len()` tokens and
/// then emitting distinct final tokens.
pub fn shared_construction(shared: &[f64], finals: &[f64], adv: &[f64]) -> (PolicyParams, PolicyParams, GroupBatch) {
    let n = shared.len();
    let g = finals.len();
    let v = (n + g).max(4);
    let old = PolicyParams::uniform(v, n + 1, 1).unwrap();
    let mut new = old.clone();
    let set = |params: &mut PolicyParams, ctx: &Context, listed: &[(usize, f64)]| {
        let mut p = vec![-1.0; v];
        let mut used = 0.0;
        for &(t, r) in listed {
            p[t] = r / v as f64;
            used += p[t];
        }
        let free = p.iter().filter(|&&x| x < 0.0).count() as f64;
        for x in p.iter_mut().filter(|x| **x < 0.0) {
            *x = (1.0 - used) / free;
        }
        params.set_logits(ctx, p.iter().map(|x| x.ln()).collect()).unwrap();
    };
    let prefix: Vec<usize> = (0..n).collect();
    for (t, &r) in shared.iter().enumerate() {
        set(&mut new, &Context::new(P, &prefix[..t]), &[(t, r)]);
    }
    let listed: Vec<(usize, f64)> = finals.iter().enumerate().map(|(i, &l)| (n + i, l)).collect();
    set(&mut new, &Context::new(P, &prefix), &listed);
    let trajectories = (0..g)
        .map(|i| {
            let mut toks = prefix.clone();
            toks.push(n + i);
            groupgrad_core::Trajectory::from_tokens(&old, P, toks).unwrap()
        })
        .collect();
    let mut group = GroupBatch::new(P, trajectories).unwrap();
    group.advantages = adv.to_vec();
    (old, new, group)
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Scalar surrogate of each family, written from the objective definitions.
pub fn surrogate(
    family: EstimatorFamily,
    eps: f64,
    anchor: &PolicyParams,
    old: &PolicyParams,
    group: &groupgrad_core::GroupBatch,
    params: &PolicyParams,
) -> f64 {
    let g = group.size() as f64;
    let mut total = 0.0;
    for (traj, &a) in group.trajectories.iter().zip(&group.advantages) {
        let r = ratios_oracle(params, old, &traj.tokens);
        let t_len = r.len() as f64;
        let alpha = 1.0 / t_len;
        total += match family {
            EstimatorFamily::GrpoToken => r.iter().map(|x| alpha * a * x).sum::<f64>(),
            EstimatorFamily::GrpoClipped => r
                .iter()
                .map(|&x| alpha * (x * a).min(clip(x, 1.0 - eps, 1.0 + eps) * a))
                .sum(),
            EstimatorFamily::GrpoSymclip => {
                let r0 = ratios_oracle(anchor, old, &traj.tokens);
                r.iter()
                    .zip(&r0)
                    .map(|(&x, &x0)| alpha * a * clip(x0, 0.0, 1.0 + eps) / x0 * x)
                    .sum()
            }
            EstimatorFamily::GspoSeq => r.iter().product::<f64>().powf(alpha) * a,
            EstimatorFamily::GspoClipped => {
                let s = r.iter().product::<f64>().powf(alpha);
                (s * a).min(clip(s, 1.0 - eps, 1.0 + eps) * a)
            }
        };
    }
    total / g
}

/// Distance of any clipped quantity from a clipping knot.
pub fn margin(
    family: EstimatorFamily,
    eps: f64,
    params: &PolicyParams,
    old: &PolicyParams,
    group: &groupgrad_core::GroupBatch,
) -> f64 {
    let mut m = f64::INFINITY;
    for traj in &group.trajectories {
        let r = ratios_oracle(params, old, &traj.tokens);
        let vals = match family {
            EstimatorFamily::GspoClipped => vec![r.iter().product::<f64>().powf(1.0 / r.len() as f64)],
            _ => r,
        };
        for v in vals {
            m = m.min((v - (1.0 - eps)).abs()).min((v - (1.0 + eps)).abs());
        }
    }
    m
}

pub fn outside_band(
    family: EstimatorFamily,
    eps: f64,
    params: &PolicyParams,
    old: &PolicyParams,
    group: &groupgrad_core::GroupBatch,
) -> bool {
    group.trajectories.iter().any(|traj| {
        let r = ratios_oracle(params, old, &traj.tokens);
        let vals = match family {
            EstimatorFamily::GspoClipped => vec![r.iter().product::<f64>().powf(1.0 / r.len() as f64)],
            _ => r,
        };
        vals.iter().any(|v| (v - 1.0).abs() > eps)
    })
}
