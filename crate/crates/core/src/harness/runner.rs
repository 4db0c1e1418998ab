//! Training loop, per-step records and output files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{EnergyNorm, EstimatorChoice, ExperimentConfig, SamplingMode, ScenarioKind};
use super::scenarios::{
    clip_break_setup, minimal_prefix_setup, toy_group, toy_sequences, toy_vocab, TOY_EOS, TOY_PROMPT, TOY_REWARD,
};
use crate::diagnostics::{
    asym, energy, equiv_set_entropy, jitter2, kl_drift_check, log_odds, steps_to_threshold, FrequencyBuckets,
    DEFAULT_BUCKET_BOUNDS,
};
use crate::error::{Error, Result};
use crate::objectives::{
    effective_token_weights, score_direction_coefficient, sequence_weights, shared_pair, token_coefficients,
    EstimatorFamily, EstimatorSpec,
};
use crate::policy::{Context, GradientVector, PolicyParams, PromptId, TokenId};
use crate::rollout::{sample_group_with, GroupBatch, SamplerConfig, Trajectory, Verifier};
use crate::transforms::{dfpo_weights, frozen_weight_coefficients};

/// One CSV row. Optional fields are left empty when the quantity does not
/// apply to the scenario or step.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct StepRow {
    pub step: usize,
    pub mean_reward: f64,
    /// Reward of the reference answers weighted by their renormalized policy probability.
    pub ref_reward: Option<f64>,
    pub sampled_tokens: usize,
    pub truncated: usize,
    pub degenerate: bool,
    pub equiv_entropy: Option<f64>,
    pub log_odds: Option<f64>,
    pub log_odds_delta: Option<f64>,
    pub log_odds_delta_pred: Option<f64>,
    pub kappa_gap: Option<f64>,
    pub kl_shared: f64,
    pub kl_shared_pred: f64,
    pub asym: f64,
    pub energy_b0: f64,
    pub energy_b1: f64,
    pub energy_b2: f64,
    pub energy_b3: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub s_tilde_min: f64,
    pub s_tilde_max: f64,
    pub shared_coef: Option<f64>,
    pub shared_coef_unnorm: Option<f64>,
    pub sweep_w: Option<f64>,
    pub clip_coef: Option<f64>,
    pub clip_grad_coef: Option<f64>,
    pub symclip_coef: Option<f64>,
    pub symclip_grad_coef: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub rows: Vec<StepRow>,
    pub sampled_tokens: usize,
    /// `groups × G × T_max` token slots.
    pub token_budget: usize,
    pub final_params: PolicyParams,
    /// Group advantages at step 0.
    pub initial_advantages: Vec<f64>,
    /// Log-odds and entropy of the reference pair after the last update.
    pub final_log_odds: Option<f64>,
    pub final_entropy: Option<f64>,
}

impl RunRecord {
    pub fn series(&self, f: impl Fn(&StepRow) -> Option<f64>) -> Vec<f64> {
        self.rows.iter().filter_map(f).collect()
    }
}

/// Weights and gradient of one estimator evaluation.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub grad: GradientVector,
    pub coefs: Vec<Vec<f64>>,
    /// Raw sequence weights `s_i`.
    pub s: Vec<f64>,
    /// Trajectory-level weight applied to `Â_i` (the mean over tokens for tokenwise families).
    pub omega: Vec<f64>,
    /// Weight applied to `Â_i` at each member's first token.
    pub omega_first: Vec<f64>,
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Evaluates the configured estimator on `group` at `params`.
pub fn evaluate_estimator(cfg: &ExperimentConfig, params: &PolicyParams, group: &GroupBatch) -> Result<StepEval> {
    let adv = &group.advantages;
    let spec = cfg.estimator_spec();
    let s = sequence_weights(params, group, spec.length_norm)?;
    let (coefs, omega, omega_first, degenerate) = if cfg.estimator == EstimatorChoice::Dfpo {
        let (stages, degenerate) = dfpo_weights(params, group, adv, &spec, &cfg.transform_spec())?;
        let coefs = frozen_weight_coefficients(group, adv, &stages.s_tilde, spec.length_norm)?;
        (coefs, stages.s_tilde.clone(), stages.s_tilde, degenerate)
    } else {
        let coefs = token_coefficients(params, group, adv, &spec)?;
        let eff = effective_token_weights(params, group, adv, &spec)?;
        let omega = eff.iter().map(|w| mean(w)).collect();
        let first = eff.iter().map(|w| w[0]).collect();
        (coefs, omega, first, false)
    };
    let grad = crate::objectives::assemble_gradient(params, group, &coefs)?;
    Ok(StepEval {
        grad,
        coefs,
        s,
        omega,
        omega_first,
        degenerate: degenerate || group.degenerate,
    })
}

/// `⟨∇ log π(y), g⟩`.
pub fn seq_score_dot(params: &PolicyParams, prompt: PromptId, y: &[TokenId], g: &GradientVector) -> Result<f64> {
    let mut total = 0.0;
    for (ctx, tok) in Context::chain(prompt, y).zip(y.iter().copied()) {
        if let Some(block) = g.block(&ctx) {
            let score = params.score_block(&ctx, tok)?;
            total += block.iter().zip(&score).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total)
}

/// Contexts visited by at least two distinct group members.
pub fn shared_contexts(group: &GroupBatch) -> Vec<Context> {
    let mut visits: BTreeMap<Context, usize> = BTreeMap::new();
    for traj in &group.trajectories {
        let mut seen: Vec<Context> = traj.steps().map(|(c, _)| c).collect();
        seen.dedup();
        for c in seen {
            *visits.entry(c).or_default() += 1;
        }
    }
    visits.into_iter().filter(|&(_, n)| n >= 2).map(|(c, _)| c).collect()
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Answers used for log-odds, entropy and the reference reward.
struct Reference {
    prompt: PromptId,
    /// `(y_a, y_b)` whose log-odds are tracked.
    pair: (Vec<TokenId>, Vec<TokenId>),
    answers: Vec<(Vec<TokenId>, f64)>,
}

impl Reference {
    fn reward(&self, params: &PolicyParams) -> Result<f64> {
        let logps = self
            .answers
            .iter()
            .map(|(y, _)| params.sequence_log_prob(self.prompt, y))
            .collect::<Result<Vec<_>>>()?;
        let max = logps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logps.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(w.iter().zip(&self.answers).map(|(wi, (_, r))| wi * r).sum::<f64>() / z)
    }

    fn log_odds(&self, params: &PolicyParams) -> Result<f64> {
        log_odds(params, self.prompt, &self.pair.0, &self.pair.1)
    }

    fn entropy(&self, params: &PolicyParams) -> Result<f64> {
        equiv_set_entropy(params, self.prompt, &[self.pair.0.clone(), self.pair.1.clone()])
    }
}

/// Rescores `group`'s fixed trajectories under a new old policy, keeping rewards and advantages.
fn rescore(group: &GroupBatch, params_old: &PolicyParams) -> Result<GroupBatch> {
    let mut next = group.clone();
    for traj in &mut next.trajectories {
        let fresh = Trajectory::from_tokens(params_old, traj.prompt, traj.tokens.clone())?;
        traj.old_logps = fresh.old_logps;
    }
    Ok(next)
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    reference: Reference,
    rows: Vec<StepRow>,
    corpus: Vec<Vec<TokenId>>,
    sampled_tokens: usize,
    groups_drawn: usize,
    initial_advantages: Vec<f64>,
}

impl Trainer<'_> {
    fn add_group(&mut self, group: &GroupBatch) {
        if self.groups_drawn == 0 {
            self.initial_advantages = group.advantages.clone();
        }
        self.corpus.extend(group.trajectories.iter().map(|t| t.tokens.clone()));
        self.sampled_tokens += group.total_tokens();
        self.groups_drawn += 1;
    }

    /// Records metrics at `params`, then returns `params` after one step.
    fn step(&mut self, k: usize, params: &PolicyParams, group: &GroupBatch) -> Result<PolicyParams> {
        let cfg = self.cfg;
        let eval = evaluate_estimator(cfg, params, group)?;
        let adv = &group.advantages;
        let next = params.apply_update(&eval.grad, cfg.eta)?;

        let mut kl_shared = 0.0;
        let mut kl_shared_pred = 0.0;
        for ctx in shared_contexts(group) {
            let d = kl_drift_check(params, &ctx, &eval.grad, cfg.eta)?;
            kl_shared += d.measured;
            kl_shared_pred += d.predicted;
        }

        let buckets = FrequencyBuckets::from_corpus(self.corpus.iter().map(Vec::as_slice), &DEFAULT_BUCKET_BOUNDS)?;
        let mut norms = Vec::new();
        for (traj, k_i) in group.trajectories.iter().zip(&eval.coefs) {
            for ((ctx, tok), &c) in traj.steps().zip(k_i) {
                let score = params.score_block(&ctx, tok)?;
                let n = score.iter().map(|x| x * x).sum::<f64>().sqrt();
                let scale = match cfg.energy_norm {
                    EnergyNorm::Weighted => c.abs(),
                    EnergyNorm::Raw => 1.0,
                };
                norms.push((tok, scale * n));
            }
        }
        let e = energy(&norms, &buckets)?.shares;

        let rewards = group.rewards()?;
        let position = |y: &[TokenId]| group.trajectories.iter().position(|t| t.tokens == y);
        let kappa_gap = match (position(&self.reference.pair.0), position(&self.reference.pair.1)) {
            (Some(a), Some(b)) => Some(adv[a] * eval.omega[a] - adv[b] * eval.omega[b]),
            _ => None,
        };

        let (shared_coef, shared_coef_unnorm) = match shared_pair(group, 0) {
            Ok((ctx, tok)) => (
                Some(score_direction_coefficient(&eval.grad, params, &ctx, tok)?),
                Some(eval.omega_first.iter().zip(adv).map(|(w, a)| w * a).sum()),
            ),
            Err(_) => (None, None),
        };

        let lo_before = self.reference.log_odds(params)?;
        let lo_after = self.reference.log_odds(&next)?;
        let pred = cfg.eta
            * (seq_score_dot(params, self.reference.prompt, &self.reference.pair.0, &eval.grad)?
                - seq_score_dot(params, self.reference.prompt, &self.reference.pair.1, &eval.grad)?);
        let (s_min, s_max) = min_max(&eval.s);
        let (st_min, st_max) = min_max(&eval.omega);

        self.rows.push(StepRow {
            step: k,
            mean_reward: mean(&rewards),
            ref_reward: Some(self.reference.reward(params)?),
            sampled_tokens: self.sampled_tokens,
            truncated: group.trajectories.iter().filter(|t| t.truncated).count(),
            degenerate: eval.degenerate,
            equiv_entropy: Some(self.reference.entropy(params)?),
            log_odds: Some(lo_before),
            log_odds_delta: Some(lo_after - lo_before),
            log_odds_delta_pred: Some(pred),
            kappa_gap,
            kl_shared,
            kl_shared_pred,
            asym: asym(&eval.omega, adv)?,
            energy_b0: e[0],
            energy_b1: e[1],
            energy_b2: e[2],
            energy_b3: e[3],
            s_min,
            s_max,
            s_tilde_min: st_min,
            s_tilde_max: st_max,
            shared_coef,
            shared_coef_unnorm,
            grad_norm: eval.grad.norm(),
            ..StepRow::default()
        });
        Ok(next)
    }

    fn finish(self, final_params: PolicyParams, group_size: usize) -> Result<RunRecord> {
        Ok(RunRecord {
            config: self.cfg.clone(),
            rows: self.rows,
            sampled_tokens: self.sampled_tokens,
            token_budget: self.groups_drawn * group_size * self.cfg.max_len,
            final_log_odds: Some(self.reference.log_odds(&final_params)?),
            final_entropy: Some(self.reference.entropy(&final_params)?),
            final_params,
            initial_advantages: self.initial_advantages,
        })
    }
}

fn run_toy(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let vocab = toy_vocab();
    let eos = vocab.id(TOY_EOS);
    let seqs = toy_sequences(&vocab)?;
    let verifier = Verifier::parse(cfg.reward.as_deref().unwrap_or(TOY_REWARD), &vocab, eos)?;
    let reference = Reference {
        prompt: TOY_PROMPT,
        pair: (seqs[1].clone(), seqs[2].clone()),
        answers: seqs
            .iter()
            .map(|y| (y.clone(), crate::rollout::RewardFn::reward(&verifier, y)))
            .collect(),
    };
    if let Some(y) = seqs.iter().find(|y| y.len() > cfg.max_len) {
        return Err(Error::Config(format!(
            "max_len {} is shorter than a toy answer of length {}",
            cfg.max_len,
            y.len()
        )));
    }
    let mut params = PolicyParams::uniform(vocab.size(), cfg.max_len, 1)?;
    let mut trainer = Trainer {
        cfg,
        reference,
        rows: Vec::new(),
        corpus: Vec::new(),
        sampled_tokens: 0,
        groups_drawn: 0,
        initial_advantages: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = SamplerConfig {
        group_size: cfg.group_size,
        max_len: cfg.max_len,
        eos,
    };
    let refresh = match (cfg.mode, cfg.refresh_every) {
        (SamplingMode::Live, 0) => 1,
        (_, r) => r,
    };

    let mut group = match cfg.mode {
        SamplingMode::Replay => toy_group(&params, &vocab)?,
        SamplingMode::Live => sample_group_with(&params, TOY_PROMPT, sampler, &mut rng)?,
    };
    group.assign_rewards(&verifier)?;
    group.compute_advantages(cfg.advantage)?;
    trainer.add_group(&group);

    for k in 0..cfg.steps {
        if k > 0 && refresh > 0 && k % refresh == 0 {
            group = match cfg.mode {
                SamplingMode::Replay => rescore(&group, &params)?,
                SamplingMode::Live => {
                    let mut g = sample_group_with(&params, TOY_PROMPT, sampler, &mut rng)?;
                    g.assign_rewards(&verifier)?;
                    g.compute_advantages(cfg.advantage)?;
                    trainer.add_group(&g);
                    g
                }
            };
        }
        params = trainer.step(k, &params, &group)?;
    }
    trainer.finish(params, cfg.group_size)
}

fn reward_for_member(
    setup_vocab: &crate::policy::VocabSpec,
    cfg: &ExperimentConfig,
    winner: TokenId,
) -> Result<Verifier> {
    match cfg.reward.as_deref() {
        Some(name) => Verifier::parse(name, setup_vocab, None),
        None => Ok(Verifier::FinalTokenEquals {
            token: winner,
            eos: None,
        }),
    }
}

fn run_minimal_prefix(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let setup = minimal_prefix_setup(&cfg.rho, &cfg.lambda)?;
    let n = setup.n_shared;
    let verifier = reward_for_member(&setup.vocab, cfg, n + 1)?;
    let mut group = setup.group.clone();
    group.assign_rewards(&verifier)?;
    group.compute_advantages(cfg.advantage)?;
    let answers: Vec<(Vec<TokenId>, f64)> = group
        .trajectories
        .iter()
        .map(|t| (t.tokens.clone(), t.reward.unwrap_or(0.0)))
        .collect();
    let reference = Reference {
        prompt: group.prompt,
        pair: (answers[1].0.clone(), answers[0].0.clone()),
        answers,
    };
    let mut trainer = Trainer {
        cfg,
        reference,
        rows: Vec::new(),
        corpus: Vec::new(),
        sampled_tokens: 0,
        groups_drawn: 0,
        initial_advantages: Vec::new(),
    };
    trainer.add_group(&group);
    let mut params = setup.params.clone();
    for k in 0..cfg.steps {
        if k > 0 && cfg.refresh_every > 0 && k % cfg.refresh_every == 0 {
            group = rescore(&group, &params)?;
        }
        params = trainer.step(k, &params, &group)?;
    }
    trainer.finish(params, cfg.group_size)
}

/// `(Σ_i Â_i ω_i at the shared token, gradient coefficient along its score)` for one family.
fn clip_pair(
    family: EstimatorFamily,
    cfg: &ExperimentConfig,
    params: &PolicyParams,
    group: &GroupBatch,
    shared: &(Context, TokenId),
) -> Result<(f64, f64)> {
    let spec = EstimatorSpec::new(family, cfg.clip_eps, cfg.length_norm);
    let adv = &group.advantages;
    let eff = effective_token_weights(params, group, adv, &spec)?;
    let coef = eff.iter().zip(adv).map(|(w, a)| w[0] * a).sum();
    let grad = crate::objectives::estimator_gradient(params, group, adv, &spec)?;
    Ok((coef, score_direction_coefficient(&grad, params, &shared.0, shared.1)?))
}

fn run_clip_break(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let mut rows = Vec::new();
    let mut sampled_tokens = 0;
    let mut last_params = None;
    let mut initial_advantages = Vec::new();
    for (k, &w) in cfg.sweep_w.iter().enumerate() {
        let setup = clip_break_setup(w)?;
        let verifier = reward_for_member(&setup.vocab, cfg, setup.n_shared + 1)?;
        let mut group = setup.group.clone();
        group.assign_rewards(&verifier)?;
        group.compute_advantages(cfg.advantage)?;
        sampled_tokens += group.total_tokens();
        if k == 0 {
            initial_advantages = group.advantages.clone();
        }
        let shared = setup.shared_at(0);
        let params = &setup.params;
        let eval = evaluate_estimator(cfg, params, &group)?;
        let adv = &group.advantages;
        let (clip_coef, clip_grad_coef) = clip_pair(EstimatorFamily::GrpoClipped, cfg, params, &group, &shared)?;
        let (sym_coef, sym_grad_coef) = clip_pair(EstimatorFamily::GrpoSymclip, cfg, params, &group, &shared)?;
        let mut kl_shared = 0.0;
        let mut kl_shared_pred = 0.0;
        for ctx in shared_contexts(&group) {
            let d = kl_drift_check(params, &ctx, &eval.grad, cfg.eta)?;
            kl_shared += d.measured;
            kl_shared_pred += d.predicted;
        }
        let (s_min, s_max) = min_max(&eval.s);
        let (st_min, st_max) = min_max(&eval.omega);
        rows.push(StepRow {
            step: k,
            mean_reward: mean(&group.rewards()?),
            sampled_tokens,
            degenerate: eval.degenerate,
            kl_shared,
            kl_shared_pred,
            asym: asym(&eval.omega, adv)?,
            s_min,
            s_max,
            s_tilde_min: st_min,
            s_tilde_max: st_max,
            shared_coef: Some(score_direction_coefficient(&eval.grad, params, &shared.0, shared.1)?),
            shared_coef_unnorm: Some(eval.omega_first.iter().zip(adv).map(|(w, a)| w * a).sum()),
            sweep_w: Some(w),
            clip_coef: Some(clip_coef),
            clip_grad_coef: Some(clip_grad_coef),
            symclip_coef: Some(sym_coef),
            symclip_grad_coef: Some(sym_grad_coef),
            grad_norm: eval.grad.norm(),
            ..StepRow::default()
        });
        last_params = Some(setup.params);
    }
    Ok(RunRecord {
        config: cfg.clone(),
        token_budget: rows.len() * cfg.group_size * cfg.max_len,
        rows,
        sampled_tokens,
        final_params: last_params.expect("sweep_w is nonempty"),
        initial_advantages,
        final_log_odds: None,
        final_entropy: None,
    })
}

/// Runs one experiment. Identical configs produce identical records.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    match cfg.scenario {
        ScenarioKind::ToyUnified => run_toy(cfg),
        ScenarioKind::MinimalPrefix => run_minimal_prefix(cfg),
        ScenarioKind::ClipBreak => run_clip_break(cfg),
    }
}

pub fn write_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &record.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV rows as a string.
pub fn csv_string(record: &RunRecord) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &record.rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

pub fn summary_json(record: &RunRecord) -> Value {
    let ref_reward = record.series(|r| r.ref_reward);
    let lo = record.series(|r| r.log_odds);
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "name": record.config.name,
        "scenario": record.config.scenario.name(),
        "estimator": record.config.estimator_label(),
        "config": record.config,
        "rows": record.rows.len(),
        "sampled_tokens": record.sampled_tokens,
        "token_budget": record.token_budget,
        "initial_advantages": record.initial_advantages,
        "final_row": record.rows.last(),
        "final_log_odds": record.final_log_odds,
        "final_entropy": record.final_entropy,
        "jitter2_ref_reward": jitter2(&ref_reward).ok(),
        "jitter2_log_odds": jitter2(&lo).ok(),
        "steps_to_threshold": steps_to_threshold(&ref_reward, record.config.threshold),
    })
}

/// Writes `<name>.csv` and `<name>.summary.json` into `dir`; returns both paths.
pub fn write_outputs(record: &RunRecord, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", record.config.name));
    let json_path = dir.join(format!("{}.summary.json", record.config.name));
    write_csv(record, &csv_path)?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary_json(record))? + "\n")?;
    Ok((csv_path, json_path))
}
