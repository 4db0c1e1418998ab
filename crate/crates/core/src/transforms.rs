//! Intra-group weight transforms and the decoupled (DFPO) gradient estimator.
//!
//! Transforms map the post-clip weight vector `s̄` to `s̃`. The estimator then
//! treats `s̃` as constants: no gradient flows through the transform, through
//! the clipping, or through `s` itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{postclip_weights, sequence_weights, EstimatorSpec, WeightStages};
use crate::policy::{GradientVector, PolicyParams};
use crate::rollout::GroupBatch;

/// Groups with a side-sum below this are flagged instead of rebalanced.
pub const SIDE_SUM_FLOOR: f64 = 1e-10;

/// Largest group the exact active-set QP accepts.
pub const QP_MAX_GROUP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    #[default]
    Identity,
    MinReplace,
    OrthProj,
    PositiveOrthProjQp,
    TruncateRebalance,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::MinReplace => "min_replace",
            TransformKind::OrthProj => "orth_proj",
            TransformKind::PositiveOrthProjQp => "positive_orth_proj_qp",
            TransformKind::TruncateRebalance => "truncate_rebalance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default = "default_floor_eps")]
    pub floor_eps: f64,
    /// Treat `s̃` as constants. Turning this off is rejected by [`grad_dfpo`];
    /// see [`dfpo_pipeline_value`] for the differentiable negative control.
    #[serde(default = "default_true")]
    pub stop_grad: bool,
    /// Transform the raw `s` instead of the post-clip `s̄`.
    #[serde(default)]
    pub on_raw: bool,
}

fn default_floor_eps() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::new(TransformKind::Identity)
    }
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        Self {
            kind,
            floor_eps: default_floor_eps(),
            stop_grad: true,
            on_raw: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor_eps > 0.0) || !self.floor_eps.is_finite() {
            return Err(Error::Config(format!(
                "floor_eps must be positive, got {}",
                self.floor_eps
            )));
        }
        Ok(())
    }
}

/// Transformed weights plus a flag for groups where the transform was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformOutput {
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

impl TransformOutput {
    fn applied(weights: Vec<f64>) -> Self {
        Self {
            weights,
            degenerate: false,
        }
    }

    fn skipped(weights: &[f64]) -> Self {
        Self {
            weights: weights.to_vec(),
            degenerate: true,
        }
    }
}

fn check_lengths(w: &[f64], adv: &[f64]) -> Result<()> {
    if w.len() != adv.len() {
        return Err(Error::Input(format!(
            "weights ({}) and advantages ({}) differ in length",
            w.len(),
            adv.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn has_both_signs(adv: &[f64]) -> bool {
    adv.iter().any(|&a| a > 0.0) && adv.iter().any(|&a| a < 0.0)
}

/// Replaces every weight by the group minimum.
pub fn min_replace(s_bar: &[f64]) -> Result<Vec<f64>> {
    if s_bar.is_empty() {
        return Err(Error::Input("empty weight vector".into()));
    }
    if let Some(x) = s_bar.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::Input(format!("min-replace needs positive weights, got {x}")));
    }
    let m = s_bar.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(vec![m; s_bar.len()])
}

/// Euclidean projection of `w` onto the hyperplane `Âᵀv = 0`.
pub fn orth_proj(w: &[f64], adv: &[f64]) -> Result<TransformOutput> {
    check_lengths(w, adv)?;
    let nn = dot(adv, adv);
    if nn == 0.0 {
        return Ok(TransformOutput::skipped(w));
    }
    let lambda = dot(adv, w) / nn;
    Ok(TransformOutput::applied(
        w.iter().zip(adv).map(|(x, a)| x - lambda * a).collect(),
    ))
}

/// Exact solution of `min ½‖v − s̄‖²  s.t.  Âᵀv = 0, v ≥ 0` by enumerating
/// every support set.
///
/// For a support `F` the equality-constrained minimizer is the projection of
/// `s̄_F` onto `Â_Fᵀv_F = 0` with the complement pinned at zero. The global
/// optimum is one of these candidates, so the feasible candidate with the
/// smallest objective is optimal.
pub fn positive_orth_proj_qp(s_bar: &[f64], adv: &[f64]) -> Result<TransformOutput> {
    check_lengths(s_bar, adv)?;
    let g = s_bar.len();
    if g > QP_MAX_GROUP {
        return Err(Error::Input(format!(
            "exact QP supports groups up to {QP_MAX_GROUP}, got {g}"
        )));
    }
    if !has_both_signs(adv) {
        return Ok(TransformOutput::skipped(s_bar));
    }
    let feas_tol = 1e-12 * (1.0 + s_bar.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut v = vec![0.0; g];
    for mask in 0u32..(1u32 << g) {
        let free = |i: usize| mask & (1 << i) != 0;
        let mut nn = 0.0;
        let mut as_ = 0.0;
        for i in (0..g).filter(|&i| free(i)) {
            nn += adv[i] * adv[i];
            as_ += adv[i] * s_bar[i];
        }
        let lambda = if nn > 0.0 { as_ / nn } else { 0.0 };
        let mut feasible = true;
        for i in 0..g {
            v[i] = if free(i) { s_bar[i] - lambda * adv[i] } else { 0.0 };
            if v[i] < -feas_tol {
                feasible = false;
                break;
            }
        }
        if !feasible {
            continue;
        }
        let obj: f64 = v.iter().zip(s_bar).map(|(x, s)| (x - s) * (x - s)).sum::<f64>() * 0.5;
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, v.iter().map(|x| x.max(0.0)).collect()));
        }
    }
    // v = 0 is always feasible, so `best` is set.
    let (_, weights) = best.expect("zero vector is feasible");
    Ok(TransformOutput::applied(weights))
}

/// Truncate-and-rebalance with the scale factor that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Rebalance {
    pub weights: Vec<f64>,
    /// Scale on the positive-advantage side (1 when untouched).
    pub alpha: f64,
    /// Scale on the negative-advantage side (1 when untouched).
    pub beta: f64,
    pub degenerate: bool,
}

/// `s⁺ = max(s̄, ε)`, then scale one advantage side so that `Âᵀs̃ = 0`.
pub fn truncate_rebalance_detail(s_bar: &[f64], adv: &[f64], floor_eps: f64) -> Result<Rebalance> {
    check_lengths(s_bar, adv)?;
    let skipped = || Rebalance {
        weights: s_bar.to_vec(),
        alpha: 1.0,
        beta: 1.0,
        degenerate: true,
    };
    if !has_both_signs(adv) {
        return Ok(skipped());
    }
    let s_plus: Vec<f64> = s_bar.iter().map(|&x| x.max(floor_eps)).collect();
    let pos: f64 = s_plus
        .iter()
        .zip(adv)
        .filter(|(_, &a)| a > 0.0)
        .map(|(s, a)| a * s)
        .sum();
    let neg: f64 = s_plus
        .iter()
        .zip(adv)
        .filter(|(_, &a)| a < 0.0)
        .map(|(s, a)| -a * s)
        .sum();
    if pos < SIDE_SUM_FLOOR || neg < SIDE_SUM_FLOOR {
        return Ok(skipped());
    }
    let delta = dot(adv, &s_plus);
    let (alpha, beta) = if delta > 0.0 {
        (neg / pos, 1.0)
    } else if delta < 0.0 {
        (1.0, pos / neg)
    } else {
        (1.0, 1.0)
    };
    let weights = s_plus
        .iter()
        .zip(adv)
        .map(|(&s, &a)| {
            if a > 0.0 {
                alpha * s
            } else if a < 0.0 {
                beta * s
            } else {
                s
            }
        })
        .collect();
    Ok(Rebalance {
        weights,
        alpha,
        beta,
        degenerate: false,
    })
}

pub fn truncate_rebalance(s_bar: &[f64], adv: &[f64], floor_eps: f64) -> Result<TransformOutput> {
    let r = truncate_rebalance_detail(s_bar, adv, floor_eps)?;
    Ok(TransformOutput {
        weights: r.weights,
        degenerate: r.degenerate,
    })
}

/// Applies the transform named by `spec`. All-zero advantages skip every transform.
pub fn apply_transform(spec: &TransformSpec, w: &[f64], adv: &[f64]) -> Result<TransformOutput> {
    spec.validate()?;
    check_lengths(w, adv)?;
    if spec.kind != TransformKind::Identity && adv.iter().all(|&a| a == 0.0) {
        return Ok(TransformOutput::skipped(w));
    }
    match spec.kind {
        TransformKind::Identity => Ok(TransformOutput::applied(w.to_vec())),
        TransformKind::MinReplace => Ok(TransformOutput::applied(min_replace(w)?)),
        TransformKind::OrthProj => orth_proj(w, adv),
        TransformKind::PositiveOrthProjQp => positive_orth_proj_qp(w, adv),
        TransformKind::TruncateRebalance => truncate_rebalance(w, adv, spec.floor_eps),
    }
}

/// Runs the weight pipeline `s → c → s̄ → s̃` at `params`.
pub fn dfpo_weights(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    estimator: &EstimatorSpec,
    transform: &TransformSpec,
) -> Result<(WeightStages, bool)> {
    estimator.validate()?;
    let s = sequence_weights(params, group, estimator.length_norm)?;
    let (c, s_bar) = postclip_weights(&s, adv, estimator.clip_eps)?;
    let input = if transform.on_raw { &s } else { &s_bar };
    let out = apply_transform(transform, input, adv)?;
    Ok((
        WeightStages {
            s,
            c,
            s_bar,
            s_tilde: out.weights,
        },
        out.degenerate,
    ))
}

/// Per-token coefficients `(1/G) w_i Â_i α_{i,t}` for frozen trajectory weights.
pub fn frozen_weight_coefficients(
    group: &GroupBatch,
    adv: &[f64],
    weights: &[f64],
    length_norm: bool,
) -> Result<Vec<Vec<f64>>> {
    if weights.len() != group.size() || adv.len() != group.size() {
        return Err(Error::Input("weights and advantages need one entry per member".into()));
    }
    let inv_g = 1.0 / group.size() as f64;
    Ok(group
        .trajectories
        .iter()
        .zip(weights.iter().zip(adv))
        .map(|(t, (&w, &a))| {
            let alpha = if length_norm { 1.0 / t.len() as f64 } else { 1.0 };
            vec![inv_g * w * a * alpha; t.len()]
        })
        .collect())
}

/// `(1/G) Σ_i w_i Â_i Σ_t α_{i,t} ∇log π` with `w` held constant.
pub fn grad_with_frozen_weights(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    weights: &[f64],
    length_norm: bool,
) -> Result<GradientVector> {
    let coefs = frozen_weight_coefficients(group, adv, weights, length_norm)?;
    crate::objectives::assemble_gradient(params, group, &coefs)
}

/// Decoupled group-relative gradient with stop-gradient on `s̃`.
pub fn grad_dfpo(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    estimator: &EstimatorSpec,
    transform: &TransformSpec,
) -> Result<GradientVector> {
    if !transform.stop_grad {
        return Err(Error::Config(
            "differentiating through the transform is not a supported training mode".into(),
        ));
    }
    let (stages, _) = dfpo_weights(params, group, adv, estimator, transform)?;
    grad_with_frozen_weights(params, group, adv, &stages.s_tilde, estimator.length_norm)
}

/// `(1/G) Σ_i Â_i s̃_i(θ)` with the whole pipeline live. Its finite-difference
/// gradient is the "no stop-gradient" negative control.
pub fn dfpo_pipeline_value(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    estimator: &EstimatorSpec,
    transform: &TransformSpec,
) -> Result<f64> {
    let (stages, _) = dfpo_weights(params, group, adv, estimator, transform)?;
    Ok(stages.s_tilde.iter().zip(adv).map(|(w, a)| w * a).sum::<f64>() / group.size() as f64)
}

/// Bias and shrinkage analytics for Min-Replace on one group.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    /// `φ_i = s̄_min / s̄_i`.
    pub phi: Vec<f64>,
    /// `ĝ_min − ĝ_base` for this group.
    pub bias_vector: GradientVector,
    pub bias_norm: f64,
    /// `(1/G) Σ |Â_i| (s̄_i − s̄_min) ‖G_i‖`.
    pub bias_norm_bound: f64,
    /// `max_i |ln s̄_i|`.
    pub trust_delta: f64,
}

impl BiasReport {
    pub fn bound_holds(&self) -> bool {
        self.bias_norm <= self.bias_norm_bound + 1e-9
    }

    /// `φ_i ∈ [e^{−2δ}, 1]` and `φ_i > 0`.
    pub fn shrink_in_trust_region(&self) -> bool {
        let lo = (-2.0 * self.trust_delta).exp();
        self.phi.iter().all(|&p| p > 0.0 && p <= 1.0 && p >= lo * (1.0 - 1e-12))
    }
}

pub fn minrep_bias_report(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    estimator: &EstimatorSpec,
) -> Result<BiasReport> {
    let (stages, _) = dfpo_weights(
        params,
        group,
        adv,
        estimator,
        &TransformSpec::new(TransformKind::Identity),
    )?;
    let s_bar = stages.s_bar;
    let s_min = s_bar.iter().copied().fold(f64::INFINITY, f64::min);
    let phi: Vec<f64> = s_bar.iter().map(|s| s_min / s).collect();
    let g = group.size() as f64;

    let mut bias_vector = GradientVector::zeros(params.vocab_size());
    let mut bound = 0.0;
    for (i, traj) in group.trajectories.iter().enumerate() {
        let alpha = estimator.alpha(traj.len());
        let mut traj_grad = GradientVector::zeros(params.vocab_size());
        for (ctx, tok) in traj.steps() {
            traj_grad.add_to_block(&ctx, alpha, &params.score_block(&ctx, tok)?);
        }
        bias_vector.add_scaled(&traj_grad, adv[i] * (s_min - s_bar[i]) / g);
        bound += adv[i].abs() * (s_bar[i] - s_min) * traj_grad.norm() / g;
    }
    let trust_delta = s_bar.iter().map(|s| s.ln().abs()).fold(0.0, f64::max);
    Ok(BiasReport {
        phi,
        bias_norm: bias_vector.norm(),
        bias_vector,
        bias_norm_bound: bound,
        trust_delta,
    })
}
