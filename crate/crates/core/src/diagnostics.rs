//! Mechanism metrics and checks of the drift predictions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::policy::{Context, GradientVector, PolicyParams, PromptId, TokenId};

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Population variance of the trajectory modulation coefficients `w_i Â_i`.
pub fn asym(weights: &[f64], adv: &[f64]) -> Result<f64> {
    if weights.len() != adv.len() {
        return Err(Error::Input("weights and advantages differ in length".into()));
    }
    if weights.len() < 2 {
        return Err(Error::Input("asymmetry needs at least 2 group members".into()));
    }
    let products: Vec<f64> = weights.iter().zip(adv).map(|(w, a)| w * a).collect();
    Ok(population_variance(&products))
}

/// Token-frequency buckets with lower bounds `{1, 2, 4, 8}` by default.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBuckets {
    /// Ascending lower bounds on occurrence counts; bucket `k` holds counts in
    /// `[lower[k], lower[k+1])`.
    pub lower: Vec<usize>,
    pub bucket_of: BTreeMap<TokenId, usize>,
}

pub const DEFAULT_BUCKET_BOUNDS: [usize; 4] = [1, 2, 4, 8];

impl FrequencyBuckets {
    /// Buckets every token that occurs at least once in `corpus`.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a [TokenId]>, lower: &[usize]) -> Result<Self> {
        if lower.is_empty() || lower[0] != 1 || lower.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bucket bounds must start at 1 and increase".into()));
        }
        let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
        for seq in corpus {
            for &t in seq {
                *counts.entry(t).or_default() += 1;
            }
        }
        let bucket_of = counts
            .into_iter()
            .map(|(tok, c)| (tok, lower.iter().rposition(|&b| c >= b).expect("count ≥ 1")))
            .collect();
        Ok(Self {
            lower: lower.to_vec(),
            bucket_of,
        })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn members(&self, bucket: usize) -> Vec<TokenId> {
        self.bucket_of
            .iter()
            .filter(|(_, &b)| b == bucket)
            .map(|(&t, _)| t)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyShares {
    pub shares: Vec<f64>,
    /// Total gradient norm was zero; shares are all zero.
    pub zero_total: bool,
}

/// Share of `Σ‖∇ℓ_t‖` falling in each frequency bucket. `token_norms` holds
/// one `(token, norm)` entry per token occurrence.
pub fn energy(token_norms: &[(TokenId, f64)], buckets: &FrequencyBuckets) -> Result<EnergyShares> {
    let mut sums = vec![0.0; buckets.len()];
    for &(tok, n) in token_norms {
        let b = buckets
            .bucket_of
            .get(&tok)
            .ok_or_else(|| Error::Input(format!("token {tok} is not in any bucket")))?;
        sums[*b] += n;
    }
    let total: f64 = sums.iter().sum();
    if total <= 0.0 {
        return Ok(EnergyShares {
            shares: vec![0.0; buckets.len()],
            zero_total: true,
        });
    }
    Ok(EnergyShares {
        shares: sums.into_iter().map(|s| s / total).collect(),
        zero_total: false,
    })
}

/// Mean absolute second difference of `series`.
pub fn jitter2(series: &[f64]) -> Result<f64> {
    if series.len() < 3 {
        return Err(Error::Input(format!(
            "jitter needs at least 3 points, got {}",
            series.len()
        )));
    }
    let total: f64 = series.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).sum();
    Ok(total / (series.len() - 2) as f64)
}

/// First index whose value reaches `kappa`.
pub fn steps_to_threshold(series: &[f64], kappa: f64) -> Option<usize> {
    series.iter().position(|&v| v >= kappa)
}

pub fn quad_form(matrix: &[Vec<f64>], v: &[f64]) -> f64 {
    matrix
        .iter()
        .zip(v)
        .map(|(row, &vi)| vi * row.iter().zip(v).map(|(m, vj)| m * vj).sum::<f64>())
        .sum()
}

/// Measured vs. second-order-predicted drift at one context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftCheck {
    pub measured: f64,
    pub predicted: f64,
}

impl DriftCheck {
    pub fn relative_error(&self) -> f64 {
        (self.measured - self.predicted).abs() / self.predicted
    }
}

/// `KL(π_{θ+ηg}(·|h*) ‖ π_θ(·|h*))` against `½η² gᵀF(h*)g`, with `g`
/// restricted to the `h*` block.
pub fn kl_drift_check(params: &PolicyParams, h_star: &Context, g: &GradientVector, eta: f64) -> Result<DriftCheck> {
    if !(eta > 0.0) {
        return Err(Error::Input(format!("step size must be positive, got {eta}")));
    }
    let block = g.restricted_to(h_star);
    let Some(v) = block.block(h_star) else {
        return Ok(DriftCheck {
            measured: 0.0,
            predicted: 0.0,
        });
    };
    let fisher = params.fisher_matrix(h_star)?;
    let predicted = 0.5 * eta * eta * quad_form(&fisher, v);
    let moved = params.apply_update(&block, eta)?;
    let measured = moved.kl_conditional(params, h_star)?;
    Ok(DriftCheck {
        measured,
        predicted: predicted.max(0.0),
    })
}

/// Sum of [`kl_drift_check`] over every context `g` touches.
pub fn kl_drift_total(params: &PolicyParams, g: &GradientVector, eta: f64) -> Result<DriftCheck> {
    let mut acc = DriftCheck {
        measured: 0.0,
        predicted: 0.0,
    };
    for ctx in g.contexts() {
        let d = kl_drift_check(params, ctx, g, eta)?;
        acc.measured += d.measured;
        acc.predicted += d.predicted;
    }
    Ok(acc)
}

/// `log π(y_a) − log π(y_b)`.
pub fn log_odds(params: &PolicyParams, prompt: PromptId, y_a: &[TokenId], y_b: &[TokenId]) -> Result<f64> {
    Ok(params.sequence_log_prob(prompt, y_a)? - params.sequence_log_prob(prompt, y_b)?)
}

/// Entropy of the sequence distribution renormalized over `set`.
pub fn equiv_set_entropy(params: &PolicyParams, prompt: PromptId, set: &[Vec<TokenId>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::Input("equivalent set needs at least 2 members".into()));
    }
    let logps = set
        .iter()
        .map(|y| params.sequence_log_prob(prompt, y))
        .collect::<Result<Vec<_>>>()?;
    let max = logps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logps.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(-w
        .iter()
        .map(|&x| x / z)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// Sample mean and standard error.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Within-group covariance between advantages and weights. For zero-mean
/// advantages this equals `(1/G) Σ Â_i w_i`, the shared-token coefficient.
pub fn advantage_weight_covariance(adv: &[f64], weights: &[f64]) -> Result<f64> {
    if adv.len() != weights.len() || adv.is_empty() {
        return Err(Error::Input("advantages and weights differ in length".into()));
    }
    let n = adv.len() as f64;
    let ma = adv.iter().sum::<f64>() / n;
    let mw = weights.iter().sum::<f64>() / n;
    Ok(adv.iter().zip(weights).map(|(a, w)| (a - ma) * (w - mw)).sum::<f64>() / n)
}
