//! Fast self-checks run by `groupgrad verify`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scenarios::shared_prefix_setup;
use crate::diagnostics::kl_drift_check;
use crate::error::Result;
use crate::objectives::{
    branch_margin, estimator_gradient, score_direction_coefficient, surrogate_fn, EstimatorFamily, EstimatorSpec,
};
use crate::policy::{finite_diff_gradient, Context, PolicyParams, PromptId};
use crate::rollout::{advantages_standardized, sample_group_with, GroupBatch, SamplerConfig};
use crate::transforms::{grad_dfpo, orth_proj, TransformKind, TransformSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Copy of `params` with every context visited by `group` set to random logits.
pub fn perturbed_policy<R: Rng + ?Sized>(
    params: &PolicyParams,
    group: &GroupBatch,
    scale: f64,
    rng: &mut R,
) -> Result<PolicyParams> {
    let mut next = params.clone();
    for traj in &group.trajectories {
        for (ctx, _) in traj.steps() {
            let logits: Vec<f64> = params
                .logits(&ctx)?
                .iter()
                .map(|x| x + scale * (2.0 * rng.gen::<f64>() - 1.0))
                .collect();
            next.set_logits(&ctx, logits)?;
        }
    }
    Ok(next)
}

/// A sampled group with standardized advantages plus a nearby current policy.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    vocab: usize,
    group_size: usize,
    max_len: usize,
    scale: f64,
) -> Result<(PolicyParams, GroupBatch)> {
    let old = PolicyParams::uniform(vocab, max_len, 1)?;
    let old = {
        let mut p = old;
        p.set_logits(
            &Context::root(PromptId(0)),
            (0..vocab).map(|_| rng.gen::<f64>()).collect(),
        )?;
        p
    };
    let cfg = SamplerConfig {
        group_size,
        max_len,
        eos: Some(0),
    };
    let mut group = sample_group_with(&old, PromptId(0), cfg, rng)?;
    let rewards: Vec<f64> = (0..group_size).map(|_| rng.gen::<f64>()).collect();
    let (adv, degenerate) = advantages_standardized(&rewards);
    for (t, r) in group.trajectories.iter_mut().zip(&rewards) {
        t.reward = Some(*r);
    }
    group.advantages = adv;
    group.degenerate = degenerate;
    let mut params = perturbed_policy(&old, &group, scale, rng)?;
    params.materialize(
        group
            .trajectories
            .iter()
            .flat_map(|t| t.steps().map(|(c, _)| c))
            .collect::<Vec<_>>()
            .iter(),
    )?;
    Ok((params, group))
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn score_vs_finite_differences(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (params, group) = random_instance(&mut rng, 5, 3, 4, 1.0)?;
        let traj = &group.trajectories[0];
        let (ctx, tok) = traj.steps().next().expect("nonempty");
        let analytic = params.score_gradient(&ctx, tok)?;
        let fd = finite_diff_gradient(|p| p.log_prob(&ctx, tok), &params, 1e-5)?;
        worst = worst.max(analytic.max_abs_diff(&fd));
    }
    Ok((worst < 1e-7, format!("max |score − fd| = {worst:.2e}")))
}

fn estimators_vs_surrogates(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let families = [
        EstimatorFamily::GrpoToken,
        EstimatorFamily::GrpoClipped,
        EstimatorFamily::GrpoSymclip,
        EstimatorFamily::GspoSeq,
        EstimatorFamily::GspoClipped,
    ];
    while checked < 10 {
        let (params, group) = random_instance(&mut rng, 4, 3, 3, 0.4)?;
        for family in families {
            let spec = EstimatorSpec::new(family, 0.2, true);
            if branch_margin(&params, &group, &spec)? < 1e-3 {
                continue;
            }
            let g = estimator_gradient(&params, &group, &group.advantages, &spec)?;
            let f = surrogate_fn(&params, &group, &group.advantages, spec)?;
            let fd = finite_diff_gradient(f, &params, 1e-5)?;
            worst = worst.max(g.max_abs_diff(&fd));
        }
        checked += 1;
    }
    Ok((
        worst < 1e-7,
        format!("max |grad − fd| = {worst:.2e} over {checked} groups"),
    ))
}

/// `(GRPO coefficient, GSPO coefficient, DFPO min-replace coefficient)` on the
/// shared root token of a `G=2, T=2` group with `s = (0.9, 1.1)`, `Â = (−1, 1)`.
pub fn shared_token_coefficients() -> Result<(f64, f64, f64)> {
    let mut setup = shared_prefix_setup(&[1.0], &[0.81, 1.21], None)?;
    setup.group.advantages = vec![-1.0, 1.0];
    let (ctx, tok) = setup.shared_at(0);
    let adv = setup.group.advantages.clone();
    let coef = |family| -> Result<f64> {
        let spec = EstimatorSpec::new(family, 0.2, true);
        let g = estimator_gradient(&setup.params, &setup.group, &adv, &spec)?;
        score_direction_coefficient(&g, &setup.params, &ctx, tok)
    };
    let grpo = coef(EstimatorFamily::GrpoToken)?;
    let gspo = coef(EstimatorFamily::GspoSeq)?;
    let dfpo = grad_dfpo(
        &setup.params,
        &setup.group,
        &adv,
        &EstimatorSpec::new(EstimatorFamily::GspoClipped, 0.2, true),
        &TransformSpec::new(TransformKind::MinReplace),
    )?;
    let dfpo = score_direction_coefficient(&dfpo, &setup.params, &ctx, tok)?;
    Ok((grpo, gspo, dfpo))
}

fn shared_token_check() -> Result<(bool, String)> {
    let (grpo, gspo, dfpo) = shared_token_coefficients()?;
    let ok = grpo.abs() <= 1e-12 && (gspo - 0.05).abs() <= 1e-9 && dfpo.abs() <= 1e-12;
    Ok((
        ok,
        format!("grpo {grpo:.3e}, gspo {gspo:.6}, dfpo(min_replace) {dfpo:.3e}"),
    ))
}

fn orth_proj_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g = rng.gen_range(2..10);
        let w: Vec<f64> = (0..g).map(|_| rng.gen_range(0.5..1.5)).collect();
        let a: Vec<f64> = (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = orth_proj(&w, &a)?;
        let d: f64 = out.weights.iter().zip(&a).map(|(x, y)| x * y).sum();
        worst = worst.max(d.abs());
    }
    Ok((worst <= 1e-12, format!("max |Âᵀs̃| = {worst:.2e}")))
}

fn kl_second_order_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, group) = random_instance(&mut rng, 6, 4, 3, 0.5)?;
    let spec = EstimatorSpec::new(EstimatorFamily::GspoSeq, 0.2, true);
    let g = estimator_gradient(&params, &group, &group.advantages, &spec)?;
    let root = Context::root(PromptId(0));
    let scale = 1e-3 / g.block_norm(&root).max(1e-12);
    let d = kl_drift_check(&params, &root, &g, scale)?;
    let rel = d.relative_error();
    Ok((rel < 1e-2, format!("relative error {rel:.2e} at ‖ηg‖ = 1e-3")))
}

/// Runs the self-check suite with `seed`.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    vec![
        check("score_matches_finite_differences", || score_vs_finite_differences(seed)),
        check("estimators_match_surrogates", || estimators_vs_surrogates(seed)),
        check("shared_token_coefficients", shared_token_check),
        check("orth_proj_is_orthogonal", || orth_proj_check(seed)),
        check("kl_drift_second_order", || kl_second_order_check(seed)),
    ]
}
