//! Gradient estimators for the group-relative objective families.
//!
//! Every estimator is expressed as a table of per-token coefficients `k_{i,t}`
//! so that the gradient is `Σ_{i,t} k_{i,t} · ∇ log π(a_{i,t} | h_{i,t})`.
//! The coefficient tables double as the per-token contributions used by the
//! energy diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Context, GradientVector, PolicyParams, TokenId};
use crate::rollout::{log_ratios, GroupBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorFamily {
    /// Token-factorized GRPO, linear region.
    GrpoToken,
    /// Token-factorized GRPO with the asymmetric `min(rÂ, clip(r)Â)` surrogate.
    GrpoClipped,
    /// Token-factorized GRPO with the sign-independent weight `clip(r, 0, 1+ε)`.
    GrpoSymclip,
    /// Sequence-coupled GSPO, linear region.
    GspoSeq,
    /// Sequence-coupled GSPO with `min(sÂ, clip(s)Â)`.
    GspoClipped,
}

impl EstimatorFamily {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorFamily::GrpoToken => "grpo_token",
            EstimatorFamily::GrpoClipped => "grpo_clipped",
            EstimatorFamily::GrpoSymclip => "grpo_symclip",
            EstimatorFamily::GspoSeq => "gspo_seq",
            EstimatorFamily::GspoClipped => "gspo_clipped",
        }
    }

    pub fn is_clipped(self) -> bool {
        matches!(
            self,
            EstimatorFamily::GrpoClipped | EstimatorFamily::GrpoSymclip | EstimatorFamily::GspoClipped
        )
    }

    pub fn is_sequence_coupled(self) -> bool {
        matches!(self, EstimatorFamily::GspoSeq | EstimatorFamily::GspoClipped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub family: EstimatorFamily,
    #[serde(default = "default_clip_eps")]
    pub clip_eps: f64,
    /// `α_{i,t} = 1/T_i` when set, else `1`.
    #[serde(default = "default_length_norm")]
    pub length_norm: bool,
}

fn default_clip_eps() -> f64 {
    0.2
}

fn default_length_norm() -> bool {
    true
}

impl EstimatorSpec {
    pub fn new(family: EstimatorFamily, clip_eps: f64, length_norm: bool) -> Self {
        Self {
            family,
            clip_eps,
            length_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps >= 0.0) || !self.clip_eps.is_finite() {
            return Err(Error::Config(format!(
                "clip_eps must be finite and ≥ 0, got {}",
                self.clip_eps
            )));
        }
        if self.family.is_clipped() && self.clip_eps >= 1.0 {
            return Err(Error::Config(format!(
                "clip_eps must be < 1 for {}, got {}",
                self.family.name(),
                self.clip_eps
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, len: usize) -> f64 {
        if self.length_norm {
            1.0 / len as f64
        } else {
            1.0
        }
    }
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Weight vectors at each stage of the clipping/transform pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct WeightStages {
    pub s: Vec<f64>,
    pub c: Vec<f64>,
    pub s_bar: Vec<f64>,
    pub s_tilde: Vec<f64>,
}

/// Sign-aware post-clip weight: `min(s, c)` for `Â ≥ 0`, `max(s, c)` otherwise,
/// so that `Â·s̄ = min(sÂ, cÂ)`.
pub fn sign_aware(s: f64, c: f64, adv: f64) -> f64 {
    if adv >= 0.0 {
        s.min(c)
    } else {
        s.max(c)
    }
}

/// Returns `(c, s̄)` with `c_i = clip(s_i, 1−ε, 1+ε)`.
pub fn postclip_weights(s: &[f64], adv: &[f64], eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.len() != adv.len() {
        return Err(Error::Input(format!(
            "weights ({}) and advantages ({}) differ in length",
            s.len(),
            adv.len()
        )));
    }
    if let Some(x) = s.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::Input(format!("sequence weights must be positive, got {x}")));
    }
    let c: Vec<f64> = s.iter().map(|&x| clip(x, 1.0 - eps, 1.0 + eps)).collect();
    let s_bar = s
        .iter()
        .zip(&c)
        .zip(adv)
        .map(|((&si, &ci), &ai)| sign_aware(si, ci, ai))
        .collect();
    Ok((c, s_bar))
}

/// True when `min(xÂ, clip(x)Â)` selects the unclipped branch (ties count as unclipped).
fn unclipped_branch(x: f64, adv: f64, eps: f64) -> bool {
    let c = clip(x, 1.0 - eps, 1.0 + eps);
    x * adv <= c * adv
}

fn check_advantages(group: &GroupBatch, adv: &[f64]) -> Result<()> {
    if adv.len() != group.size() {
        return Err(Error::Input(format!(
            "advantage vector has length {}, group has {} members",
            adv.len(),
            group.size()
        )));
    }
    Ok(())
}

/// Per-trajectory sequence weights `s_i = exp(Σ_t α_{i,t} ln r_{i,t})`.
pub fn sequence_weights(params: &PolicyParams, group: &GroupBatch, length_norm: bool) -> Result<Vec<f64>> {
    group
        .trajectories
        .iter()
        .map(|t| crate::rollout::sequence_weight_with(params, t, length_norm))
        .collect()
}

/// Per-token score coefficients for the estimator described by `spec`.
pub fn token_coefficients(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    check_advantages(group, adv)?;
    let inv_g = 1.0 / group.size() as f64;
    let eps = spec.clip_eps;
    group
        .trajectories
        .iter()
        .zip(adv)
        .map(|(traj, &a)| {
            let alpha = spec.alpha(traj.len());
            let lr = log_ratios(params, traj)?;
            let coefs = match spec.family {
                EstimatorFamily::GrpoToken => lr.iter().map(|l| inv_g * a * alpha * l.exp()).collect(),
                EstimatorFamily::GrpoClipped => lr
                    .iter()
                    .map(|l| {
                        let r = l.exp();
                        if unclipped_branch(r, a, eps) {
                            inv_g * a * alpha * r
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                EstimatorFamily::GrpoSymclip => lr
                    .iter()
                    .map(|l| inv_g * a * alpha * clip(l.exp(), 0.0, 1.0 + eps))
                    .collect(),
                EstimatorFamily::GspoSeq | EstimatorFamily::GspoClipped => {
                    let s = (alpha * lr.iter().sum::<f64>()).exp();
                    let live = spec.family == EstimatorFamily::GspoSeq || unclipped_branch(s, a, eps);
                    let k = if live { inv_g * a * s * alpha } else { 0.0 };
                    vec![k; traj.len()]
                }
            };
            Ok(coefs)
        })
        .collect()
}

/// `Σ_{i,t} coef_{i,t} · score(h_{i,t}, a_{i,t})`, accumulated in trajectory order.
pub fn assemble_gradient(params: &PolicyParams, group: &GroupBatch, coefs: &[Vec<f64>]) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros(params.vocab_size());
    for (traj, k) in group.trajectories.iter().zip(coefs) {
        for ((ctx, tok), &kt) in traj.steps().zip(k) {
            if kt != 0.0 {
                grad.add_to_block(&ctx, kt, &params.score_block(&ctx, tok)?);
            }
        }
    }
    Ok(grad)
}

pub fn estimator_gradient(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<GradientVector> {
    let coefs = token_coefficients(params, group, adv, spec)?;
    assemble_gradient(params, group, &coefs)
}

fn with_family(spec: &EstimatorSpec, family: EstimatorFamily) -> EstimatorSpec {
    EstimatorSpec { family, ..*spec }
}

/// `(1/G) Σ_i Â_i Σ_t α_{i,t} r_{i,t} ∇log π`.
pub fn grad_grpo_token(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<GradientVector> {
    estimator_gradient(params, group, adv, &with_family(spec, EstimatorFamily::GrpoToken))
}

/// `(1/G) Σ_i s_i Â_i Σ_t α_{i,t} ∇log π`, the exact gradient of `(1/G) Σ s_i Â_i`.
pub fn grad_gspo_seq(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<GradientVector> {
    estimator_gradient(params, group, adv, &with_family(spec, EstimatorFamily::GspoSeq))
}

/// Gradient of `(1/G) Σ min(s_i Â_i, c_i Â_i)`; zero for members whose clipped branch is active.
pub fn grad_gspo_clipped(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<GradientVector> {
    estimator_gradient(params, group, adv, &with_family(spec, EstimatorFamily::GspoClipped))
}

/// Tokenwise gradient of `min(r Â, clip(r) Â)`.
pub fn grad_grpo_clipped(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<GradientVector> {
    estimator_gradient(params, group, adv, &with_family(spec, EstimatorFamily::GrpoClipped))
}

/// `(1/G) Σ_i Σ_t α Â_i φ(r_{i,t}) ∇log π` with `φ(r) = clip(r, 0, 1+ε)` held fixed.
pub fn grad_grpo_symclip(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<GradientVector> {
    estimator_gradient(params, group, adv, &with_family(spec, EstimatorFamily::GrpoSymclip))
}

/// Effective weight multiplying `Â_i` for each token in the objective value:
/// `r`, sign-aware `r̄`, `φ(r)`, `s_i` or `s̄_i` depending on the family.
pub fn effective_token_weights(
    params: &PolicyParams,
    group: &GroupBatch,
    adv: &[f64],
    spec: &EstimatorSpec,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    check_advantages(group, adv)?;
    let eps = spec.clip_eps;
    group
        .trajectories
        .iter()
        .zip(adv)
        .map(|(traj, &a)| {
            let lr = log_ratios(params, traj)?;
            let alpha = spec.alpha(traj.len());
            Ok(match spec.family {
                EstimatorFamily::GrpoToken => lr.iter().map(|l| l.exp()).collect(),
                EstimatorFamily::GrpoClipped => lr
                    .iter()
                    .map(|l| {
                        let r = l.exp();
                        sign_aware(r, clip(r, 1.0 - eps, 1.0 + eps), a)
                    })
                    .collect(),
                EstimatorFamily::GrpoSymclip => lr.iter().map(|l| clip(l.exp(), 0.0, 1.0 + eps)).collect(),
                EstimatorFamily::GspoSeq => vec![(alpha * lr.iter().sum::<f64>()).exp(); traj.len()],
                EstimatorFamily::GspoClipped => {
                    let s = (alpha * lr.iter().sum::<f64>()).exp();
                    vec![sign_aware(s, clip(s, 1.0 - eps, 1.0 + eps), a); traj.len()]
                }
            })
        })
        .collect()
}

/// Scalar surrogate whose gradient is the estimator. The symmetric-clipping
/// weight `φ(r)/r` is frozen at `anchor`; every other family is an ordinary
/// function of θ.
pub fn surrogate_fn<'a>(
    anchor: &PolicyParams,
    group: &'a GroupBatch,
    adv: &'a [f64],
    spec: EstimatorSpec,
) -> Result<impl Fn(&PolicyParams) -> Result<f64> + 'a> {
    spec.validate()?;
    check_advantages(group, adv)?;
    let frozen: Option<Vec<Vec<f64>>> = if spec.family == EstimatorFamily::GrpoSymclip {
        Some(
            group
                .trajectories
                .iter()
                .map(|t| {
                    Ok(log_ratios(anchor, t)?
                        .into_iter()
                        .map(|l| {
                            let r = l.exp();
                            clip(r, 0.0, 1.0 + spec.clip_eps) / r
                        })
                        .collect())
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    Ok(move |params: &PolicyParams| -> Result<f64> {
        let inv_g = 1.0 / group.size() as f64;
        let eps = spec.clip_eps;
        let mut total = 0.0;
        for (i, (traj, &a)) in group.trajectories.iter().zip(adv).enumerate() {
            let lr = log_ratios(params, traj)?;
            let alpha = spec.alpha(traj.len());
            let term = match spec.family {
                EstimatorFamily::GrpoToken => lr.iter().map(|l| alpha * a * l.exp()).sum::<f64>(),
                EstimatorFamily::GrpoClipped => lr
                    .iter()
                    .map(|l| {
                        let r = l.exp();
                        alpha * (r * a).min(clip(r, 1.0 - eps, 1.0 + eps) * a)
                    })
                    .sum(),
                EstimatorFamily::GrpoSymclip => {
                    let w = &frozen.as_ref().expect("frozen weights")[i];
                    lr.iter().zip(w).map(|(l, wt)| alpha * a * wt * l.exp()).sum()
                }
                EstimatorFamily::GspoSeq => (alpha * lr.iter().sum::<f64>()).exp() * a,
                EstimatorFamily::GspoClipped => {
                    let s = (alpha * lr.iter().sum::<f64>()).exp();
                    (s * a).min(clip(s, 1.0 - eps, 1.0 + eps) * a)
                }
            };
            total += term;
        }
        Ok(inv_g * total)
    })
}

/// Smallest distance from any clipping breakpoint among the quantities the
/// family clips (`r` per token or `s` per trajectory). `f64::INFINITY` when
/// nothing is clipped.
pub fn branch_margin(params: &PolicyParams, group: &GroupBatch, spec: &EstimatorSpec) -> Result<f64> {
    let eps = spec.clip_eps;
    let knots: &[f64] = match spec.family {
        EstimatorFamily::GrpoToken | EstimatorFamily::GspoSeq => return Ok(f64::INFINITY),
        EstimatorFamily::GrpoSymclip => &[1.0 + eps],
        _ => &[1.0 - eps, 1.0 + eps],
    };
    let mut margin = f64::INFINITY;
    for traj in &group.trajectories {
        let lr = log_ratios(params, traj)?;
        let values: Vec<f64> = if spec.family.is_sequence_coupled() {
            vec![(spec.alpha(traj.len()) * lr.iter().sum::<f64>()).exp()]
        } else {
            lr.iter().map(|l| l.exp()).collect()
        };
        for v in values {
            for k in knots {
                margin = margin.min((v - k).abs());
            }
        }
    }
    Ok(margin)
}

/// Checks that every member of `group` emits the same `(h*, a*)` at `t_star`
/// and returns that pair.
pub fn shared_pair(group: &GroupBatch, t_star: usize) -> Result<(Context, TokenId)> {
    let first = &group.trajectories[0];
    if t_star >= first.len() {
        return Err(Error::Input(format!(
            "step {t_star} beyond trajectory length {}",
            first.len()
        )));
    }
    let head = &first.tokens[..=t_star];
    for traj in &group.trajectories[1..] {
        if traj.len() <= t_star || traj.tokens[..=t_star] != *head {
            return Err(Error::Input(format!(
                "group members do not share a context-token pair at step {t_star}"
            )));
        }
    }
    Ok((Context::new(group.prompt, &head[..t_star]), head[t_star]))
}

/// Scalar multiplying the common score direction of a shared `(h*, a*)` at `t_star`:
/// `Σ_i w_i Â_i / T_i` (or `Σ_i w_i Â_i` without length normalization).
pub fn shared_token_coefficient(
    group: &GroupBatch,
    weights: &[f64],
    adv: &[f64],
    t_star: usize,
    length_norm: bool,
) -> Result<f64> {
    check_advantages(group, adv)?;
    if weights.len() != group.size() {
        return Err(Error::Input("weights must have one entry per group member".into()));
    }
    shared_pair(group, t_star)?;
    Ok(group
        .trajectories
        .iter()
        .zip(weights)
        .zip(adv)
        .map(|((traj, &w), &a)| if length_norm { w * a / traj.len() as f64 } else { w * a })
        .sum())
}

/// Coefficient of `grad`'s `ctx` block along `∇log π(token | ctx)`:
/// `⟨block, score⟩ / ‖score‖²`. Zero if the block is absent.
pub fn score_direction_coefficient(
    grad: &GradientVector,
    params: &PolicyParams,
    ctx: &Context,
    token: TokenId,
) -> Result<f64> {
    let score = params.score_block(ctx, token)?;
    let nn: f64 = score.iter().map(|x| x * x).sum();
    Ok(grad
        .block(ctx)
        .map(|b| b.iter().zip(&score).map(|(x, y)| x * y).sum::<f64>() / nn)
        .unwrap_or(0.0))
}
