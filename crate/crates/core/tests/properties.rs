mod common;

use common::*;
use groupgrad_core::diagnostics::{asym, jitter2, quad_form, steps_to_threshold};
use groupgrad_core::objectives::{estimator_gradient, postclip_weights, score_direction_coefficient};
use groupgrad_core::rollout::{advantages_mean, advantages_standardized, sequence_weight, token_ratios};
use groupgrad_core::transforms::{
    dfpo_weights, grad_dfpo, grad_with_frozen_weights, min_replace, orth_proj, positive_orth_proj_qp,
    truncate_rebalance,
};
use groupgrad_core::{Context, EstimatorFamily, EstimatorSpec, PolicyParams, TransformKind, TransformSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..12)
}

/// Zero-mean advantages with both signs present, paired with positive weights.
fn group_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..10)
        .prop_flat_map(|g| {
            (
                prop::collection::vec(0.0f64..1.0, g),
                prop::collection::vec(0.3f64..2.0, g),
            )
        })
        .prop_filter_map("rewards must differ", |(r, w)| {
            let (adv, degenerate) = advantages_standardized(&r);
            (!degenerate).then_some((adv, w))
        })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_normalizes(logits in logits_strategy()) {
        let mut p = PolicyParams::uniform(logits.len(), 4, 1).unwrap();
        let ctx = Context::root(P);
        p.set_logits(&ctx, logits.clone()).unwrap();
        let total: f64 = (0..logits.len()).map(|t| p.log_prob(&ctx, t).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_is_psd(logits in logits_strategy(), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::uniform(logits.len(), 4, 1).unwrap();
        let ctx = Context::root(P);
        p.set_logits(&ctx, logits.clone()).unwrap();
        let f = p.fisher_matrix(&ctx).unwrap();
        for _ in 0..20 {
            let v: Vec<f64> = (0..logits.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assert!(quad_form(&f, &v) >= -1e-12);
        }
    }

    #[test]
    fn advantages_sum_to_zero(rewards in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        prop_assert!(advantages_mean(&rewards).iter().sum::<f64>().abs() < 1e-10);
        let (adv, _) = advantages_standardized(&rewards);
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn ratios_are_one_on_policy_and_weights_match_likelihood_ratio(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (old, params, group) = random_group(&mut rng, 5, 4, 4, 0.5);
        for row in token_ratios(&old, &group).unwrap() {
            for r in row {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
        }
        for traj in &group.trajectories {
            let lr = params.sequence_log_prob(P, &traj.tokens).unwrap() - old.sequence_log_prob(P, &traj.tokens).unwrap();
            let want = (lr / traj.len() as f64).exp();
            prop_assert!((sequence_weight(&params, traj).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_aware_weight_reproduces_clipped_min((adv, s) in group_strategy(), eps in 0.05f64..0.5) {
        let (c, s_bar) = postclip_weights(&s, &adv, eps).unwrap();
        for i in 0..s.len() {
            let want = (s[i] * adv[i]).min(s[i].clamp(1.0 - eps, 1.0 + eps) * adv[i]);
            prop_assert!((adv[i] * s_bar[i] - want).abs() < 1e-15);
            prop_assert!((c[i] - s[i].clamp(1.0 - eps, 1.0 + eps)).abs() == 0.0);
        }
    }

    #[test]
    fn gspo_shared_block_does_not_cancel(u1 in 0.8f64..1.2, u2 in 0.8f64..1.2, a in 0.1f64..2.0, rho in 0.8f64..1.2) {
        // T = 2 with shared first token at ratio ρ and final ratios chosen so s_i = u_i
        let (_, params, group) = shared_construction(&[rho], &[u1 * u1 / rho, u2 * u2 / rho], &[-a, a]);
        let spec = EstimatorSpec::new(EstimatorFamily::GspoSeq, 0.2, true);
        let g = estimator_gradient(&params, &group, &group.advantages, &spec).unwrap();
        let root = Context::root(P);
        // the shared score direction has norm ‖e_0 − p‖ at the root
        let coef = coef_along_score(&g, &params, &root, 0);
        let score_norm = {
            let p = probs_oracle(params.logits(&root).unwrap());
            let mut s: Vec<f64> = p.iter().map(|x| -x).collect();
            s[0] += 1.0;
            s.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        prop_assert!((coef - a * (u2 - u1) / 4.0).abs() < 1e-10);
        prop_assert!((g.block_norm(&root) - coef.abs() * score_norm).abs() < 1e-12);
    }

    #[test]
    fn transforms_are_orthogonal_to_advantages((adv, s) in group_strategy()) {
        prop_assert!(dot(&adv, &orth_proj(&s, &adv).unwrap().weights).abs() < 1e-10);
        let tr = truncate_rebalance(&s, &adv, 1e-8).unwrap();
        prop_assert!(!tr.degenerate);
        prop_assert!(dot(&adv, &tr.weights).abs() < 1e-10);
        prop_assert!(tr.weights.iter().all(|&w| w > 0.0));
        let qp = positive_orth_proj_qp(&s, &adv).unwrap();
        prop_assert!(dot(&adv, &qp.weights).abs() < 1e-10);
        prop_assert!(qp.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn qp_is_no_worse_than_other_feasible_points((adv, s) in group_strategy()) {
        let qp = positive_orth_proj_qp(&s, &adv).unwrap();
        let obj = |v: &[f64]| v.iter().zip(&s).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let tr = truncate_rebalance(&s, &adv, 1e-8).unwrap();
        prop_assert!(obj(&qp.weights) <= obj(&tr.weights) + 1e-9);
        let op = orth_proj(&s, &adv).unwrap();
        if op.weights.iter().all(|&x| x >= 0.0) {
            prop_assert!((obj(&qp.weights) - obj(&op.weights)).abs() < 1e-9);
        }
    }

    #[test]
    fn min_replace_never_reverses_updates((adv, s) in group_strategy(), eps in 0.05f64..0.5) {
        let (_, s_bar) = postclip_weights(&s, &adv, eps).unwrap();
        let m = min_replace(&s_bar).unwrap();
        let s_min = s_bar.iter().copied().fold(f64::INFINITY, f64::min);
        for i in 0..s.len() {
            prop_assert_eq!((adv[i] * m[i]).signum(), (adv[i] * s_bar[i]).signum());
            let phi = s_min / s_bar[i];
            prop_assert!(phi > 0.0 && phi <= 1.0);
        }
    }

    #[test]
    fn jitter2_ignores_affine_trends(series in prop::collection::vec(-5.0f64..5.0, 3..30), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let shifted: Vec<f64> = series.iter().enumerate().map(|(t, x)| x + a + b * t as f64).collect();
        prop_assert!((jitter2(&series).unwrap() - jitter2(&shifted).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn steps_to_threshold_is_monotone_in_kappa(mut series in prop::collection::vec(0.0f64..1.0, 1..30), k1 in 0.0f64..1.0, k2 in 0.0f64..1.0) {
        series.sort_by(f64::total_cmp);
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        match (steps_to_threshold(&series, lo), steps_to_threshold(&series, hi)) {
            (Some(a), Some(b)) => prop_assert!(a <= b),
            (None, Some(_)) => prop_assert!(false),
            _ => {}
        }
    }

    #[test]
    fn asym_of_constant_products_is_zero(c in -3.0f64..3.0, g in 2usize..10) {
        prop_assert!(asym(&vec![1.0; g], &vec![c; g]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn frozen_weight_gradient_depends_only_on_weight_values(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, params, group) = random_group(&mut rng, 4, 4, 3, 0.3);
        let est = EstimatorSpec::new(EstimatorFamily::GspoClipped, 0.2, true);
        let tf = TransformSpec::new(TransformKind::MinReplace);
        let (stages, _) = dfpo_weights(&params, &group, &group.advantages, &est, &tf).unwrap();
        let injected: Vec<f64> = stages.s_tilde.iter().map(|w| w * 1.0).collect();
        let a = grad_dfpo(&params, &group, &group.advantages, &est, &tf).unwrap();
        let b = grad_with_frozen_weights(&params, &group, &group.advantages, &injected, true).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn min_replace_gradient_is_not_a_rescaled_identity_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let est = EstimatorSpec::new(EstimatorFamily::GspoClipped, 0.2, true);
    let mut generic = 0;
    for _ in 0..20 {
        let (_, params, group) = random_group(&mut rng, 4, 4, 3, 0.3);
        let adv = group.advantages.clone();
        let base = grad_dfpo(
            &params,
            &group,
            &adv,
            &est,
            &TransformSpec::new(TransformKind::Identity),
        )
        .unwrap();
        let minrep = grad_dfpo(
            &params,
            &group,
            &adv,
            &est,
            &TransformSpec::new(TransformKind::MinReplace),
        )
        .unwrap();
        // best least-squares scale, then the residual
        let lambda = minrep.dot(&base) / base.dot(&base);
        let mut resid = minrep.clone();
        resid.add_scaled(&base, -lambda);
        if resid.norm() > 1e-6 {
            generic += 1;
        }
    }
    assert!(generic >= 18, "only {generic} of 20 groups escaped a global rescaling");
}

#[test]
fn min_replace_lowers_asym() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5000 {
        let g = rng.gen_range(2..9);
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (adv, _) = advantages_standardized(&rewards);
        let s: Vec<f64> = (0..g).map(|_| rng.gen_range(0.5..1.5)).collect();
        let m = min_replace(&s).unwrap();
        assert!(asym(&m, &adv).unwrap() <= asym(&s, &adv).unwrap() + 1e-12);
    }
}

#[test]
fn shared_coefficient_matches_score_projection() {
    let (_, params, group) = shared_construction(&[1.0], &[0.81, 1.21], &[-1.0, 1.0]);
    let spec = EstimatorSpec::new(EstimatorFamily::GspoSeq, 0.2, true);
    let g = estimator_gradient(&params, &group, &group.advantages, &spec).unwrap();
    let root = Context::root(P);
    let lib = score_direction_coefficient(&g, &params, &root, 0).unwrap();
    assert!((lib - coef_along_score(&g, &params, &root, 0)).abs() < 1e-15);
}
