//! Exact EM cycles on a tabular policy.
//!
//! Every prompt gets one fixed feedback context. Each cycle writes the exact
//! reward-tilted prior into the teacher keys, then runs full-enumeration
//! distillation to convergence and records the student's exact objective.

use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, FeedbackMode, FeedbackRecord};
use crate::error::{config, Result};
use crate::estep::{write_distribution, PriorMode};
use crate::mstep::{distill_batch, Divergence, Reduction};
use crate::oracle::{check_cap, enumerate_dist, objective, tilt, DistTable, DEFAULT_ENUMERATION_CAP};
use crate::policy::{Context, Emission, PolicyParams, Special, Token, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityConfig {
    pub beta: f64,
    pub cycles: usize,
    pub mstep_lr: f64,
    /// Stop the M-step when the loss changes by less than this.
    pub tolerance: f64,
    pub max_mstep_iters: usize,
    pub divergence: Divergence,
    pub prior_mode: PriorMode,
}

impl Default for MonotonicityConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            cycles: 20,
            mstep_lr: 20.0,
            tolerance: 1e-8,
            max_mstep_iters: 200_000,
            divergence: Divergence::ReverseKl,
            prior_mode: PriorMode::DynamicStudent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub initial_j: f64,
    /// Mean exact objective over all prompts after each cycle.
    pub j: Vec<f64>,
    pub mstep_iters: Vec<usize>,
    /// Largest `J_{k} - J_{k+1}` over consecutive entries, starting from
    /// `initial_j`; nonpositive for a non-decreasing sequence.
    pub max_decrease: f64,
}

pub fn em_monotonicity_run(env: &EnvSpec, cfg: &MonotonicityConfig) -> Result<MonotonicityReport> {
    em_monotonicity_with_reward(env, cfg, &|x, y| env.reward(x, y))
}

/// As [`em_monotonicity_run`] with an arbitrary reward over the env's
/// prompt and response spaces.
pub fn em_monotonicity_with_reward(
    env: &EnvSpec,
    cfg: &MonotonicityConfig,
    reward: &dyn Fn(&[Token], &[Token]) -> f64,
) -> Result<MonotonicityReport> {
    if !(cfg.beta > 0.0) {
        return config(format!("`beta` must be positive, got {}", cfg.beta));
    }
    check_cap(env.vocab_size, env.prompt_len + env.response_len, DEFAULT_ENUMERATION_CAP)?;
    let vocab = env.vocab();
    let fb = vec![vocab.special(Special::Err)];
    let mut params = PolicyParams::tabular(vocab, Emission::Ordinary);
    let reference = params.clone();
    let prompts = env.all_prompts();
    let shape = DistTable::uniform(env.vocab_size, env.response_len);
    let rewards: Vec<Vec<f64>> = prompts
        .iter()
        .map(|x| (0..shape.len()).map(|i| reward(x, &shape.sequence(i))).collect())
        .collect();
    let ref_dists: Vec<DistTable> = prompts
        .iter()
        .map(|x| enumerate_dist(&reference, &Context::student(x), env, DEFAULT_ENUMERATION_CAP))
        .collect::<Result<_>>()?;

    let mut trajs = Vec::new();
    for (g, x) in prompts.iter().enumerate() {
        for i in 0..shape.len() {
            trajs.push(Trajectory {
                prompt: x.clone(),
                response: shape.sequence(i),
                token_logprobs: Vec::new(),
                total_logprob: 0.0,
                reward: reward(x, &shape.sequence(i)) as u8,
                feedback: Some(FeedbackRecord {
                    mode: FeedbackMode::EnvDiagnostic,
                    tokens: fb.clone(),
                    source_trajectory: None,
                }),
                group_id: g,
                rollout_index: i,
            });
        }
    }

    let j_of = |params: &PolicyParams| -> Result<f64> {
        let mut total = 0.0;
        for ((x, r), rd) in prompts.iter().zip(&rewards).zip(&ref_dists) {
            let pi = enumerate_dist(params, &Context::student(x), env, DEFAULT_ENUMERATION_CAP)?;
            total += objective(&pi, rd, r, cfg.beta)?;
        }
        Ok(total / prompts.len() as f64)
    };

    let initial_j = j_of(&params)?;
    let mut j = Vec::with_capacity(cfg.cycles);
    let mut iters = Vec::with_capacity(cfg.cycles);
    for _ in 0..cfg.cycles {
        for ((x, r), rd) in prompts.iter().zip(&rewards).zip(&ref_dists) {
            let prior = match cfg.prior_mode {
                PriorMode::DynamicStudent => enumerate_dist(&params, &Context::student(x), env, DEFAULT_ENUMERATION_CAP)?,
                PriorMode::FixedReference => rd.clone(),
            };
            let (q, _) = tilt(&prior, r, cfg.beta)?;
            write_distribution(&mut params, &Context::teacher(&fb, x), &q)?;
        }
        let mut prev = f64::INFINITY;
        let mut n = 0;
        while n < cfg.max_mstep_iters {
            let b = distill_batch(&params, &params, &trajs, cfg.divergence, Reduction::Mean)?;
            n += 1;
            if (prev - b.loss).abs() < cfg.tolerance {
                break;
            }
            prev = b.loss;
            params.apply(&b.grad, -cfg.mstep_lr);
        }
        iters.push(n);
        j.push(j_of(&params)?);
    }
    let mut max_decrease = f64::NEG_INFINITY;
    let mut last = initial_j;
    for &v in &j {
        max_decrease = max_decrease.max(last - v);
        last = v;
    }
    Ok(MonotonicityReport {
        initial_j,
        j,
        mstep_iters: iters,
        max_decrease,
    })
}
