//! The training loop.
//!
//! Each rollout batch runs, in order: rollout from the student context,
//! verification and feedback, an optional E-step on the same batch, and the
//! M-step (or the baseline's update). One [`MetricsRecord`] is produced per
//! batch, plus an [`EStepRecord`] whenever an E-step is scheduled.

mod checkpoint;
mod config;
mod monotonic;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    batch_advantages, grpo_loss, reshape_advantage, reweight_advantage, sdpo_token_advantage, standardize_tokens,
    surrogate_loss,
};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::estep::{analytic_estep, reward_margin, run_estep, write_distribution, EStepBatch, EStepState, PriorMode};
use crate::mstep::{distill_batch, importance_drift, TeacherSource};
use crate::oracle::{enumerate_dist, reward_vector, DistTable, DEFAULT_ENUMERATION_CAP};
use crate::policy::{
    greedy_decode, sample_trajectory, Context, GradientRecord, PolicyKind, PolicyParams, Token, Trajectory,
};
use crate::rng::{stream, Domain};

pub use config::{Decode, EStepMode, EStepSchedule, InitKind, Method, TrainConfig};
pub use monotonic::{em_monotonicity_run, em_monotonicity_with_reward, MonotonicityConfig, MonotonicityReport};

/// Cumulative skip and event counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub estep_runs: usize,
    pub degenerate_estep: usize,
    pub feedback_none_excluded: usize,
    pub zero_gradient_batches: usize,
}

/// One line of the metrics stream per rollout batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub record: String,
    pub batch: usize,
    pub method: Method,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub reward_margin: Option<f64>,
    pub distill_loss: Option<f64>,
    pub grpo_loss: Option<f64>,
    pub estep_loss: Option<f64>,
    pub delta: Option<f64>,
    pub exact_j: Option<f64>,
    pub elbo: Option<f64>,
    pub log_partition: Option<f64>,
    pub importance_drift: f64,
    pub grad_norm: f64,
    pub excluded_feedback_none: usize,
    pub estep_skipped: bool,
    pub zero_gradient: bool,
    pub counters: Counters,
}

/// E-step event, emitted on scheduled batches only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EStepRecord {
    pub record: String,
    pub batch: usize,
    pub mode: EStepMode,
    pub positives: usize,
    pub negatives: usize,
    pub delta: Option<f64>,
    pub mean_positive: Option<f64>,
    pub mean_negative: Option<f64>,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchOutput {
    pub metrics: MetricsRecord,
    pub estep: Option<EStepRecord>,
}

pub struct Trainer {
    config: TrainConfig,
    env: EnvSpec,
    params: PolicyParams,
    reference: PolicyParams,
    teacher_snapshot: PolicyParams,
    estep: EStepState,
    velocity: Option<GradientRecord>,
    batch: usize,
    updates: usize,
    counters: Counters,
    eval_prompts: Vec<Vec<Token>>,
    best_eval: Option<f64>,
    last_eval: Option<f64>,
}

/// Prompts used for held-out evaluation: the whole prompt space when it has
/// at most `n` members, otherwise `n` draws from a dedicated stream.
pub fn eval_prompt_set(env: &EnvSpec, seed: u64, n: usize) -> Vec<Vec<Token>> {
    if env.prompt_space() <= n as u128 {
        return env.all_prompts();
    }
    (0..n)
        .map(|i| env.sample_prompt(&mut stream(seed, Domain::Eval, &[i as u64])))
        .collect()
}

/// Fraction of prompts whose decoded response earns reward 1.
pub fn evaluate(
    params: &PolicyParams,
    env: &EnvSpec,
    prompts: &[Vec<Token>],
    decode: Decode,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let per_prompt: Vec<f64> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, x)| -> Result<f64> {
            let ctx = Context::student(x);
            match decode {
                Decode::Greedy => Ok(env.reward(x, &greedy_decode(params, &ctx, env.response_len)?)),
                Decode::Sampled => {
                    let mut hits = 0.0;
                    for k in 0..trials {
                        let mut rng = stream(seed, Domain::EvalSample, &[i as u64, k as u64]);
                        let t = sample_trajectory(params, &ctx, &mut rng, env.response_len)?;
                        hits += env.reward(x, &t.response);
                    }
                    Ok(hits / trials as f64)
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(per_prompt.iter().sum::<f64>() / prompts.len() as f64)
}

/// Tabular store whose student contexts follow `(target + 1) mod V` with
/// logit margin `bias`.
pub fn adversarial_init(params: &mut PolicyParams, env: &EnvSpec, bias: f64) -> Result<()> {
    let v = env.vocab_size;
    let vt = params.vocab().total();
    crate::oracle::check_cap(v, env.prompt_len, DEFAULT_ENUMERATION_CAP)?;
    for x in env.all_prompts() {
        let wrong: Vec<Token> = env.target(&x).iter().map(|t| (t + 1) % v).collect();
        for t in 0..wrong.len() {
            let mut logits = vec![0.0; vt];
            logits[wrong[t] as usize] = bias;
            params.set_logits(&Context::student(&x).with_prefix(&wrong[..t]), logits)?;
        }
    }
    Ok(())
}

fn initial_params(cfg: &TrainConfig, env: &EnvSpec) -> Result<PolicyParams> {
    let vocab = env.vocab();
    let mut params = match cfg.policy {
        PolicyKind::Tabular => PolicyParams::tabular(vocab, cfg.emission),
        PolicyKind::LinearSoftmax => PolicyParams::linear(vocab, cfg.emission, env.response_len),
    };
    let mut rng = stream(cfg.seed, Domain::Init, &[]);
    match (cfg.init, cfg.policy) {
        (InitKind::Uniform, _) => {}
        (InitKind::Random, PolicyKind::LinearSoftmax) => params.randomize_linear(&mut rng, cfg.init_scale)?,
        (InitKind::Random, PolicyKind::Tabular) => {
            crate::oracle::check_cap(env.vocab_size, env.prompt_len, DEFAULT_ENUMERATION_CAP)?;
            let vt = params.vocab().total();
            for x in env.all_prompts() {
                let logits = (0..vt)
                    .map(|_| cfg.init_scale * crate::policy::standard_normal(&mut rng))
                    .collect();
                params.set_logits(&Context::student(&x), logits)?;
            }
        }
        (InitKind::Adversarial, _) => adversarial_init(&mut params, env, cfg.adversarial_bias)?,
    }
    Ok(params)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let config = config.resolve()?;
        let env = config.env.clone();
        let params = initial_params(&config, &env)?;
        let estep = EStepState::new(config.beta, config.delta_rule, config.ema_rate, config.prior_mode)?;
        let eval_prompts = eval_prompt_set(&env, config.seed, config.eval_prompts);
        Ok(Self {
            reference: params.clone(),
            teacher_snapshot: params.clone(),
            params,
            env,
            estep,
            velocity: None,
            batch: 0,
            updates: 0,
            counters: Counters::default(),
            eval_prompts,
            best_eval: None,
            last_eval: None,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// The initialization snapshot; never modified.
    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn teacher_snapshot(&self) -> &PolicyParams {
        &self.teacher_snapshot
    }

    pub fn estep_state(&self) -> &EStepState {
        &self.estep
    }

    /// Number of completed batches.
    pub fn batches_done(&self) -> usize {
        self.batch
    }

    pub fn is_finished(&self) -> bool {
        self.batch >= self.config.total_batches
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn best_eval(&self) -> Option<f64> {
        self.best_eval
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.last_eval
    }

    pub fn eval_prompts(&self) -> &[Vec<Token>] {
        &self.eval_prompts
    }

    pub fn evaluate_now(&self) -> Result<f64> {
        evaluate(
            &self.params,
            &self.env,
            &self.eval_prompts,
            self.config.eval_decode,
            self.config.eval_trials,
            self.config.seed ^ self.batch as u64,
        )
    }

    /// Sample prompts and `N` rollouts each for 1-based batch `b`, then attach
    /// rewards and feedback.
    pub fn rollouts(&self, b: usize) -> Result<Vec<Trajectory>> {
        let cfg = &self.config;
        let env = &self.env;
        let params = &self.params;
        let groups: Vec<Vec<Trajectory>> = (0..cfg.prompts_per_batch)
            .into_par_iter()
            .map(|p| -> Result<Vec<Trajectory>> {
                let x = env.sample_prompt(&mut stream(cfg.seed, Domain::Prompt, &[b as u64, p as u64]));
                let mut group = Vec::with_capacity(cfg.rollouts_per_prompt);
                for n in 0..cfg.rollouts_per_prompt {
                    let mut rng = stream(cfg.seed, Domain::Rollout, &[b as u64, p as u64, n as u64]);
                    let mut t = sample_trajectory(params, &Context::student(&x), &mut rng, env.response_len)?;
                    t.reward = env.reward(&x, &t.response) as u8;
                    t.group_id = p;
                    t.rollout_index = n;
                    group.push(t);
                }
                let snapshot = group.clone();
                for t in group.iter_mut() {
                    t.feedback = Some(env.make_feedback(cfg.feedback_mode, &x, t, &snapshot)?);
                }
                Ok(group)
            })
            .collect::<Result<_>>()?;
        Ok(groups.into_iter().flatten().collect())
    }

    fn estep_due(&self, b: usize) -> bool {
        if self.config.method != Method::Vpd {
            return false;
        }
        let f = self.config.estep_frequency;
        match self.config.estep_schedule {
            EStepSchedule::RolloutBatches => b % f == 0,
            EStepSchedule::Updates => {
                let m = self.config.mstep_steps;
                let before = (b - 1) * m;
                let after = b * m;
                after / f > before / f
            }
        }
    }

    fn step(&mut self, grad: &GradientRecord, lr: f64) {
        let mu = self.config.momentum;
        if mu > 0.0 {
            let v = self.velocity.get_or_insert_with(|| GradientRecord::zeros_like(&self.params));
            v.scale(mu);
            v.add_scaled(grad, 1.0);
            if !v.is_zero() {
                self.params.apply(v, -lr);
            }
        } else if !grad.is_zero() {
            self.params.apply(grad, -lr);
        }
        self.updates += 1;
    }

    fn teacher(&self) -> &PolicyParams {
        match self.config.teacher_source() {
            TeacherSource::SharedCurrent => &self.params,
            TeacherSource::EmaSnapshot => &self.teacher_snapshot,
        }
    }

    fn analytic_estep(&mut self, batch: &EStepBatch) -> Result<()> {
        let mut seen: Vec<(Vec<Token>, Vec<Token>)> = Vec::new();
        for e in batch.positives.iter().chain(&batch.negatives) {
            let fb = e.traj.feedback.as_ref().expect("batch members carry feedback").tokens.clone();
            let key = (fb, e.traj.prompt.clone());
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        for (fb, x) in seen {
            let prior_params = match self.estep.prior_mode {
                PriorMode::DynamicStudent => &self.params,
                PriorMode::FixedReference => &self.reference,
            };
            let prior = enumerate_dist(prior_params, &Context::student(&x), &self.env, DEFAULT_ENUMERATION_CAP)?;
            let q = analytic_estep(&prior, &self.env, &x, self.config.beta)?;
            write_distribution(&mut self.params, &Context::teacher(&fb, &x), &q)?;
        }
        Ok(())
    }

    fn oracle_metrics(&self) -> Result<(f64, f64, f64)> {
        let beta = self.config.beta;
        let (mut j, mut f, mut lz) = (0.0, 0.0, 0.0);
        for x in &self.eval_prompts {
            let ctx = Context::student(x);
            let pi = enumerate_dist(&self.params, &ctx, &self.env, DEFAULT_ENUMERATION_CAP)?;
            let reference: DistTable = enumerate_dist(&self.reference, &ctx, &self.env, DEFAULT_ENUMERATION_CAP)?;
            let r = reward_vector(&self.env, x, &pi);
            j += crate::oracle::objective(&pi, &reference, &r, beta)?;
            f += crate::oracle::elbo_with(&pi, &reference, &r, beta)?;
            lz += crate::oracle::log_partition(&reference, &r, beta)?;
        }
        let n = self.eval_prompts.len() as f64;
        Ok((j / n, f / n, lz / n))
    }

    /// Run the next rollout batch.
    pub fn run_batch(&mut self) -> Result<BatchOutput> {
        let b = self.batch + 1;
        let cfg = self.config.clone();
        let trajs = self.rollouts(b)?;
        let train_accuracy = trajs.iter().filter(|t| t.reward == 1).count() as f64 / trajs.len() as f64;
        let excluded = if cfg.method.uses_teacher() {
            trajs.iter().filter(|t| t.teacher_context().is_none()).count()
        } else {
            0
        };
        self.counters.feedback_none_excluded += excluded;

        // Frozen student likelihoods as of the start of this batch.
        let frozen_source = match cfg.prior_mode {
            PriorMode::DynamicStudent => &self.params,
            PriorMode::FixedReference => &self.reference,
        };
        let ebatch = EStepBatch::capture(&trajs, frozen_source)?;

        let mut estep_record = None;
        let mut estep_skipped = false;
        if self.estep_due(b) {
            let mut rec = EStepRecord {
                record: "estep".into(),
                batch: b,
                mode: cfg.estep_mode,
                positives: ebatch.positives.len(),
                negatives: ebatch.negatives.len(),
                delta: None,
                mean_positive: None,
                mean_negative: None,
                loss_before: None,
                loss_after: None,
                skip_reason: None,
            };
            if ebatch.is_degenerate() {
                estep_skipped = true;
                self.counters.degenerate_estep += 1;
                rec.skip_reason = Some("degenerate E-step batch".into());
            } else {
                match cfg.estep_mode {
                    EStepMode::Gradient => {
                        let out = run_estep(&mut self.params, &ebatch, &mut self.estep, cfg.estep_lr, cfg.estep_steps)?;
                        rec.delta = Some(out.delta);
                        rec.mean_positive = Some(out.mean_positive);
                        rec.mean_negative = Some(out.mean_negative);
                        rec.loss_before = Some(out.loss_before);
                        rec.loss_after = Some(out.loss_after);
                    }
                    EStepMode::Analytic => self.analytic_estep(&ebatch)?,
                }
                self.counters.estep_runs += 1;
            }
            estep_record = Some(rec);
        }

        let drift = importance_drift(&trajs, &self.params);
        let mut distill_loss = None;
        let mut grpo_value = None;
        let mut grad_norm = 0.0;
        let mut zero_gradient = true;
        let (_, advantages) = if cfg.method.uses_group_advantage() {
            batch_advantages(&trajs)?
        } else {
            (Vec::new(), Vec::new())
        };
        let deltas: Vec<Vec<f64>> = match cfg.method {
            Method::HybridReshape | Method::HybridReweight => {
                let mut d: Vec<Vec<f64>> = trajs
                    .iter()
                    .map(|t| sdpo_token_advantage(t, &self.params, self.teacher()))
                    .collect();
                if cfg.hybrid.standardize_sdpo {
                    standardize_tokens(&mut d);
                }
                d
            }
            _ => Vec::new(),
        };
        for _ in 0..cfg.mstep_steps {
            let grad = match cfg.method {
                Method::Vpd | Method::Sdpo => {
                    let db = distill_batch(&self.params, self.teacher(), &trajs, cfg.divergence(), cfg.reduction)?;
                    distill_loss = Some(db.loss);
                    db.grad
                }
                Method::Grpo => {
                    let (l, g) = grpo_loss(&trajs, &self.params, &advantages, cfg.hybrid.ppo_clip)?;
                    grpo_value = Some(l);
                    g
                }
                Method::HybridJoint => {
                    let db = distill_batch(&self.params, self.teacher(), &trajs, cfg.divergence(), cfg.reduction)?;
                    let (lg, gg) = grpo_loss(&trajs, &self.params, &advantages, cfg.hybrid.ppo_clip)?;
                    distill_loss = Some(db.loss);
                    grpo_value = Some(lg);
                    let mut g = GradientRecord::zeros_like(&self.params);
                    g.add_scaled(&db.grad, cfg.hybrid.omega_opd);
                    g.add_scaled(&gg, cfg.hybrid.omega_rl);
                    g
                }
                Method::HybridReshape | Method::HybridReweight => {
                    let alpha = cfg.hybrid.alpha(b - 1, cfg.total_batches);
                    let token_adv: Vec<Vec<f64>> = advantages
                        .iter()
                        .zip(&deltas)
                        .map(|(&a, d)| {
                            d.iter()
                                .map(|&dt| match cfg.method {
                                    Method::HybridReshape => {
                                        reshape_advantage(a, dt, cfg.hybrid.omega_rl, cfg.hybrid.omega_opd)
                                    }
                                    _ => reweight_advantage(a, dt, alpha, cfg.hybrid.reweight_clip),
                                })
                                .collect()
                        })
                        .collect();
                    let (l, g) = surrogate_loss(&trajs, &self.params, &token_adv, cfg.hybrid.ppo_clip)?;
                    grpo_value = Some(l);
                    g
                }
            };
            grad_norm = grad.norm();
            zero_gradient &= grad.is_zero();
            self.step(&grad, cfg.mstep_lr);
        }
        if zero_gradient {
            self.counters.zero_gradient_batches += 1;
        }
        if cfg.teacher_source() == TeacherSource::EmaSnapshot && cfg.method.uses_teacher() {
            self.teacher_snapshot.ema_update(&self.params, cfg.teacher_update_rate)?;
        }

        let margin = reward_margin(&ebatch, self.teacher(), cfg.beta)?;
        self.batch = b;
        let eval_accuracy = if b % cfg.eval_every == 0 || b == cfg.total_batches {
            let acc = self.evaluate_now()?;
            self.last_eval = Some(acc);
            self.best_eval = Some(self.best_eval.map_or(acc, |best| best.max(acc)));
            Some(acc)
        } else {
            None
        };
        let (exact_j, elbo, log_partition) = if cfg.oracle_checks {
            let (j, f, lz) = self.oracle_metrics()?;
            (Some(j), Some(f), Some(lz))
        } else {
            (None, None, None)
        };
        let metrics = MetricsRecord {
            record: "batch".into(),
            batch: b,
            method: cfg.method,
            train_accuracy,
            eval_accuracy,
            reward_margin: margin,
            distill_loss,
            grpo_loss: grpo_value,
            estep_loss: estep_record.as_ref().and_then(|r| r.loss_before),
            delta: estep_record.as_ref().and_then(|r| r.delta),
            exact_j,
            elbo,
            log_partition,
            importance_drift: drift,
            grad_norm,
            excluded_feedback_none: excluded,
            estep_skipped,
            zero_gradient,
            counters: self.counters.clone(),
        };
        Ok(BatchOutput {
            metrics,
            estep: estep_record,
        })
    }

    /// Run every remaining batch.
    pub fn run_all(&mut self) -> Result<Vec<BatchOutput>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_batch()?);
        }
        Ok(out)
    }
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("method", &self.config.method)
            .field("batch", &self.batch)
            .finish()
    }
}

pub(crate) fn missing(what: &str) -> Error {
    Error::Format(format!("checkpoint is missing {what}"))
}
