mod common;

use common::*;
use groupgrad_core::diagnostics::kl_drift_check;
use groupgrad_core::objectives::estimator_gradient;
use groupgrad_core::transforms::{dfpo_pipeline_value, grad_dfpo};
use groupgrad_core::{
    Context, EstimatorFamily, EstimatorSpec, GradientVector, PolicyParams, TransformKind, TransformSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FAMILIES: [EstimatorFamily; 5] = [
    EstimatorFamily::GrpoToken,
    EstimatorFamily::GrpoClipped,
    EstimatorFamily::GrpoSymclip,
    EstimatorFamily::GspoSeq,
    EstimatorFamily::GspoClipped,
];

#[test]
fn score_matches_finite_differences_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let v = rng.gen_range(2..9);
        let mut params = PolicyParams::uniform(v, 4, 1).unwrap();
        let ctx = Context::new(P, &[rng.gen_range(0..v)]);
        params
            .set_logits(&ctx, (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .unwrap();
        let tok = rng.gen_range(0..v);
        let oracle = fd_oracle(
            |p| p.log_prob(&ctx, tok).unwrap(),
            &params,
            std::slice::from_ref(&ctx),
            1e-5,
        );
        let g = params.score_gradient(&ctx, tok).unwrap();
        assert!(max_diff(&g, &oracle) < 1e-7);
    }
}

#[test]
fn fisher_matches_outer_product_formula_and_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = vec![0.3, -1.2, 0.8, 0.0];
    let mut params = PolicyParams::uniform(4, 4, 1).unwrap();
    let ctx = Context::root(P);
    params.set_logits(&ctx, logits.clone()).unwrap();
    let p = probs_oracle(&logits);
    let f = params.fisher_matrix(&ctx).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] };
            assert!((f[i][j] - want).abs() < 1e-15);
        }
    }
    let n = 200_000;
    let mut acc = vec![vec![0.0; 4]; 4];
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut c = 0.0;
        let mut tok = 3;
        for (k, &pk) in p.iter().enumerate() {
            c += pk;
            if u < c {
                tok = k;
                break;
            }
        }
        let s = params.score_block(&ctx, tok).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                acc[i][j] += s[i] * s[j] / n as f64;
            }
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            assert!((acc[i][j] - f[i][j]).abs() < 5e-3, "entry ({i},{j})");
        }
    }
}

#[test]
fn estimator_gradients_match_surrogate_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let eps = 0.2;
    for family in FAMILIES {
        let mut accepted = 0;
        let mut clipped_seen = 0;
        while accepted < 50 {
            let (old, params, group) = random_group(&mut rng, 4, 3, 3, 0.35);
            if margin(family, eps, &params, &old, &group) < 1e-3 {
                continue;
            }
            let spec = EstimatorSpec::new(family, eps, true);
            let g = estimator_gradient(&params, &group, &group.advantages, &spec).unwrap();
            let contexts = distinct_contexts(&group);
            let oracle = fd_oracle(
                |p| surrogate(family, eps, &params, &old, &group, p),
                &params,
                &contexts,
                1e-5,
            );
            let err = max_diff(&g, &oracle);
            assert!(err < 1e-7, "{} group {accepted}: {err:e}", family.name());
            if family.is_clipped() && outside_band(family, eps, &params, &old, &group) {
                clipped_seen += 1;
            }
            accepted += 1;
        }
        if family.is_clipped() {
            assert!(clipped_seen > 0, "{} never left the clip band", family.name());
        }
    }
}

#[test]
fn decoupled_gradient_treats_weights_as_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let est = EstimatorSpec::new(EstimatorFamily::GspoClipped, 0.2, true);
    let mut differs = 0;
    for kind in [
        TransformKind::Identity,
        TransformKind::MinReplace,
        TransformKind::OrthProj,
        TransformKind::TruncateRebalance,
    ] {
        let tf = TransformSpec::new(kind);
        for _ in 0..10 {
            let (_, params, group) = random_group(&mut rng, 4, 4, 3, 0.3);
            let adv = group.advantages.clone();
            let (stages, _) = groupgrad_core::transforms::dfpo_weights(&params, &group, &adv, &est, &tf).unwrap();
            // frozen surrogate: (1/G) Σ w_i Â_i (1/T_i) Σ_t log π
            let frozen = |p: &PolicyParams| {
                let mut total = 0.0;
                for ((traj, &a), &w) in group.trajectories.iter().zip(&adv).zip(&stages.s_tilde) {
                    let lp: f64 = traj
                        .steps()
                        .map(|(c, t)| probs_oracle(p.logits(&c).unwrap())[t].ln())
                        .sum();
                    total += w * a * lp / traj.len() as f64;
                }
                total / group.size() as f64
            };
            let contexts = distinct_contexts(&group);
            let g = grad_dfpo(&params, &group, &adv, &est, &tf).unwrap();
            let oracle = fd_oracle(frozen, &params, &contexts, 1e-5);
            assert!(max_diff(&g, &oracle) < 1e-7);

            let live = fd_oracle(
                |p| dfpo_pipeline_value(p, &group, &adv, &est, &tf).unwrap(),
                &params,
                &contexts,
                1e-6,
            );
            if max_diff(&g, &live) > 1e-4 {
                differs += 1;
            }
        }
    }
    assert!(
        differs > 0,
        "differentiating through the transform never changed the gradient"
    );
    let no_stop = TransformSpec {
        stop_grad: false,
        ..TransformSpec::new(TransformKind::MinReplace)
    };
    let (_, params, group) = random_group(&mut rng, 4, 3, 3, 0.3);
    assert!(grad_dfpo(&params, &group, &group.advantages.clone(), &est, &no_stop).is_err());
}

#[test]
fn kl_drift_error_shrinks_with_step_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let v = rng.gen_range(2..7);
        let mut params = PolicyParams::uniform(v, 2, 1).unwrap();
        let ctx = Context::root(P);
        params
            .set_logits(&ctx, (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let mut g = GradientVector::zeros(v);
        let dir: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        g.add_to_block(&ctx, 1.0 / norm, &dir);
        let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&eta| kl_drift_check(&params, &ctx, &g, eta).unwrap().relative_error())
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }
}
