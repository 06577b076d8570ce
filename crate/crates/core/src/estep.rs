//! Teacher refinement by unpaired preference optimization.
//!
//! The teacher is the shared store evaluated with feedback in context. Its
//! implicit reward on a trajectory is `beta * (log q(y|x,C) - log pi(y|x))`
//! with the student term frozen at the start of the E-step. Successes are
//! pushed above the shift `delta`, failures below it, through a binary
//! classification loss. For tabular policies an exact analytic E-step writes
//! the reward-tilted student directly into the teacher's context keys.

use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{config, Error, Result};
use crate::math::{mean, sigmoid, softplus};
use crate::oracle::{reward_vector, tilt, DistTable};
use crate::policy::{Context, GradientRecord, PolicyKind, PolicyParams, Token, Trajectory};

/// Logits standing in for zero conditional mass when a distribution is
/// written into a tabular store.
const LOG_FLOOR: f64 = -1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaRule {
    #[default]
    BatchMean,
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    #[default]
    DynamicStudent,
    FixedReference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EStepState {
    pub delta: f64,
    pub delta_rule: DeltaRule,
    pub ema_rate: f64,
    pub beta: f64,
    pub prior_mode: PriorMode,
}

impl EStepState {
    pub fn new(beta: f64, delta_rule: DeltaRule, ema_rate: f64, prior_mode: PriorMode) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return config(format!("beta must be positive, got {beta}"));
        }
        if delta_rule == DeltaRule::Ema && !(ema_rate > 0.0 && ema_rate <= 1.0) {
            return config(format!("ema_rate must lie in (0, 1], got {ema_rate}"));
        }
        Ok(Self {
            delta: 0.0,
            delta_rule,
            ema_rate,
            beta,
            prior_mode,
        })
    }

    /// Blend a batch midpoint into `delta` according to the rule.
    pub fn update_delta(&mut self, midpoint: f64) -> f64 {
        self.delta = match self.delta_rule {
            DeltaRule::BatchMean => midpoint,
            DeltaRule::Ema => (1.0 - self.ema_rate) * self.delta + self.ema_rate * midpoint,
        };
        self.delta
    }
}

/// A trajectory with feedback and its frozen student log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepExample {
    pub traj: Trajectory,
    pub frozen_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EStepBatch {
    pub positives: Vec<EStepExample>,
    pub negatives: Vec<EStepExample>,
    /// Trajectories dropped because their feedback is absent or mode none.
    pub excluded: usize,
}

impl EStepBatch {
    /// Partition `trajs` by reward. `frozen[i]` is the frozen student
    /// log-likelihood of `trajs[i]`.
    pub fn new(trajs: &[Trajectory], frozen: &[Option<f64>]) -> Result<Self> {
        let mut batch = Self::default();
        for (i, traj) in trajs.iter().enumerate() {
            if traj.teacher_context().is_none() {
                batch.excluded += 1;
                continue;
            }
            let frozen_logprob = match frozen.get(i).copied().flatten() {
                Some(l) if l.is_finite() => l,
                _ => return Err(Error::MissingFrozen(i)),
            };
            let ex = EStepExample {
                traj: traj.clone(),
                frozen_logprob,
            };
            if traj.reward == 1 {
                batch.positives.push(ex);
            } else {
                batch.negatives.push(ex);
            }
        }
        Ok(batch)
    }

    /// Freeze `log pi(y|x)` under `source` for every trajectory.
    pub fn capture(trajs: &[Trajectory], source: &PolicyParams) -> Result<Self> {
        let frozen: Vec<Option<f64>> = trajs
            .iter()
            .map(|t| Some(source.sequence_logprob(&t.student_context(), &t.response)))
            .collect();
        Self::new(trajs, &frozen)
    }

    pub fn is_degenerate(&self) -> bool {
        self.positives.is_empty() || self.negatives.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::DegenerateBatch {
                positives: self.positives.len(),
                negatives: self.negatives.len(),
            });
        }
        Ok(())
    }
}

/// `beta * (log q(y|x,C) - frozen)`.
pub fn implicit_reward(params: &PolicyParams, traj: &Trajectory, frozen_logprob: f64, beta: f64) -> Result<f64> {
    let ctx = traj
        .teacher_context()
        .ok_or(Error::MissingFeedback(traj.rollout_index))?;
    if !frozen_logprob.is_finite() {
        return Err(Error::MissingFrozen(traj.rollout_index));
    }
    Ok(beta * (params.sequence_logprob(&ctx, &traj.response) - frozen_logprob))
}

fn class_rewards(examples: &[EStepExample], params: &PolicyParams, beta: f64) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| implicit_reward(params, &e.traj, e.frozen_logprob, beta))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    pub delta: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
}

/// Compute the batch midpoint of class means and fold it into `state.delta`.
pub fn reward_shift(batch: &EStepBatch, params: &PolicyParams, state: &mut EStepState) -> Result<ShiftStats> {
    batch.check()?;
    let mean_positive = mean(&class_rewards(&batch.positives, params, state.beta)?);
    let mean_negative = mean(&class_rewards(&batch.negatives, params, state.beta)?);
    let delta = state.update_delta(0.5 * (mean_positive + mean_negative));
    Ok(ShiftStats {
        delta,
        mean_positive,
        mean_negative,
    })
}

/// Mean positive implicit reward minus mean negative; `None` for an empty class.
pub fn reward_margin(batch: &EStepBatch, params: &PolicyParams, beta: f64) -> Result<Option<f64>> {
    if batch.is_degenerate() {
        return Ok(None);
    }
    let pos = mean(&class_rewards(&batch.positives, params, beta)?);
    let neg = mean(&class_rewards(&batch.negatives, params, beta)?);
    Ok(Some(pos - neg))
}

/// Loss value from precomputed implicit rewards.
pub fn bco_objective(positive: &[f64], negative: &[f64], delta: f64) -> f64 {
    let pos: Vec<f64> = positive.iter().map(|r| softplus(-(r - delta))).collect();
    let neg: Vec<f64> = negative.iter().map(|r| softplus(r - delta)).collect();
    mean(&pos) + mean(&neg)
}

/// Loss and its gradient at the current `state.delta`. Only the
/// teacher-context log-probabilities carry gradient.
pub fn bco_loss(batch: &EStepBatch, params: &PolicyParams, state: &EStepState) -> Result<(f64, GradientRecord)> {
    batch.check()?;
    let beta = state.beta;
    let delta = state.delta;
    let mut grad = GradientRecord::zeros_like(params);
    let mut loss = 0.0;
    for (examples, sign) in [(&batch.positives, 1.0), (&batch.negatives, -1.0)] {
        let n = examples.len() as f64;
        for e in examples.iter() {
            let ctx = e
                .traj
                .teacher_context()
                .ok_or(Error::MissingFeedback(e.traj.rollout_index))?;
            let r = beta * (params.sequence_logprob(&ctx, &e.traj.response) - e.frozen_logprob);
            let u = sign * (r - delta);
            loss += softplus(-u) / n;
            let coeff = -sign * sigmoid(-u) * beta / n;
            params.accumulate_logprob_grad(&mut grad, &ctx, &e.traj.response, coeff);
        }
    }
    Ok((loss, grad))
}

/// `-ln sigma(r_pos - r_neg)`.
pub fn dpo_pair_loss(r_pos: f64, r_neg: f64) -> f64 {
    softplus(-(r_pos - r_neg))
}

/// Decoupled upper bound `-ln sigma(r_pos) - ln sigma(-r_neg)`.
pub fn decoupled_bound(r_pos: f64, r_neg: f64) -> f64 {
    softplus(-r_pos) + softplus(r_neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepOutcome {
    pub delta: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// One gradient-based E-step: fix `delta` on the batch, then take `steps`
/// full-batch descent steps on the classification loss.
pub fn run_estep(
    params: &mut PolicyParams,
    batch: &EStepBatch,
    state: &mut EStepState,
    lr: f64,
    steps: usize,
) -> Result<EStepOutcome> {
    let stats = reward_shift(batch, params, state)?;
    let (loss_before, mut grad) = bco_loss(batch, params, state)?;
    let mut loss_after = loss_before;
    for step in 0..steps {
        params.apply(&grad, -lr);
        let (l, g) = bco_loss(batch, params, state)?;
        loss_after = l;
        if step + 1 < steps {
            grad = g;
        }
    }
    Ok(EStepOutcome {
        delta: stats.delta,
        mean_positive: stats.mean_positive,
        mean_negative: stats.mean_negative,
        loss_before,
        loss_after,
    })
}

/// Exact dynamic-prior teacher: `prior(y) exp(r(x,y)/beta) / Z`.
pub fn analytic_estep(prior: &DistTable, env: &EnvSpec, x: &[Token], beta: f64) -> Result<DistTable> {
    Ok(tilt(prior, &reward_vector(env, x, prior), beta)?.0)
}

/// Write a full-sequence distribution into the tabular keys reached from
/// `ctx` as per-step conditional log-probabilities.
pub fn write_distribution(params: &mut PolicyParams, ctx: &Context<'_>, dist: &DistTable) -> Result<()> {
    if params.kind() != PolicyKind::Tabular {
        return config("writing a distribution needs a tabular policy");
    }
    if dist.alphabet() != params.vocab().size() {
        return config("distribution alphabet does not match the vocabulary");
    }
    let a = dist.alphabet() as usize;
    let vt = params.vocab().total();
    let len = dist.seq_len();
    // marginals[t][i]: mass of the i-th length-t prefix.
    let mut marginals = vec![dist.probs().to_vec()];
    for _ in 0..len {
        let last = marginals.last().expect("nonempty");
        let next: Vec<f64> = last.chunks(a).map(|c| c.iter().sum()).collect();
        marginals.push(next);
    }
    marginals.reverse();
    for t in 0..len {
        for (i, &mass) in marginals[t].iter().enumerate() {
            let prefix = DistTable::uniform(dist.alphabet(), t).sequence(i);
            let mut logits = vec![0.0; vt];
            if mass > 0.0 {
                for (tok, l) in logits.iter_mut().enumerate().take(a) {
                    let p = marginals[t + 1][i * a + tok] / mass;
                    *l = if p > 0.0 { p.ln().max(LOG_FLOOR) } else { LOG_FLOOR };
                }
            }
            let mut full = ctx.prefix.to_vec();
            full.extend_from_slice(&prefix);
            params.set_logits(&Context { prefix: &full, ..*ctx }, logits)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FeedbackMode, FeedbackRecord};
    use crate::oracle::{enumerate_dist, DEFAULT_ENUMERATION_CAP};
    use crate::policy::{Emission, Special};
    use approx::assert_abs_diff_eq;

    fn traj(env: &EnvSpec, prompt: &[Token], response: &[Token], reward: u8, fb: Vec<Token>) -> Trajectory {
        let _ = env;
        Trajectory {
            prompt: prompt.to_vec(),
            response: response.to_vec(),
            token_logprobs: vec![],
            total_logprob: 0.0,
            reward,
            feedback: Some(FeedbackRecord {
                mode: FeedbackMode::EnvDiagnostic,
                tokens: fb,
                source_trajectory: None,
            }),
            group_id: 0,
            rollout_index: 0,
        }
    }

    #[test]
    fn delta_rules() {
        let mut s = EStepState::new(0.1, DeltaRule::BatchMean, 0.1, PriorMode::DynamicStudent).unwrap();
        assert_abs_diff_eq!(s.update_delta(0.5 * (0.4 + -0.2)), 0.1, epsilon = 1e-12);
        let mut e = EStepState::new(0.1, DeltaRule::Ema, 0.5, PriorMode::DynamicStudent).unwrap();
        assert_abs_diff_eq!(e.update_delta(0.1), 0.05, epsilon = 1e-12);
        assert!(EStepState::new(0.0, DeltaRule::BatchMean, 0.1, PriorMode::DynamicStudent).is_err());
        assert!(EStepState::new(0.1, DeltaRule::Ema, 0.0, PriorMode::DynamicStudent).is_err());
    }

    #[test]
    fn bco_objective_values() {
        assert_abs_diff_eq!(bco_objective(&[0.3, 0.3], &[0.3], 0.3), 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bco_objective(&[1.0], &[-1.0], 0.0), 0.62652, epsilon = 1e-5);
        assert_abs_diff_eq!(dpo_pair_loss(0.0, 0.0), 0.69315, epsilon = 1e-5);
        assert_abs_diff_eq!(dpo_pair_loss(1.0, 0.0), 0.31326, epsilon = 1e-5);
    }

    #[test]
    fn implicit_reward_cases() {
        let env = EnvSpec::keyed_copy(3, 2, 0).unwrap();
        let p = PolicyParams::tabular(env.vocab(), Emission::Ordinary);
        let err = env.vocab().special(Special::Err);
        let t = traj(&env, &[0, 1], &[1, 0], 1, vec![err]);
        let frozen = p.sequence_logprob(&t.student_context(), &t.response);
        assert_eq!(implicit_reward(&p, &t, frozen, 0.1).unwrap(), 0.0);
        let teacher = p.sequence_logprob(&t.teacher_context().unwrap(), &t.response);
        let r = implicit_reward(&p, &t, teacher - 10.0, 0.1).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(implicit_reward(&p, &t, teacher - 10.0, 0.2).unwrap(), 2.0 * r, epsilon = 1e-12);
        assert!(implicit_reward(&p, &t, f64::NAN, 0.1).is_err());
        let mut none = t.clone();
        none.feedback = Some(FeedbackRecord::none());
        assert!(matches!(implicit_reward(&p, &none, 0.0, 0.1), Err(Error::MissingFeedback(_))));
    }

    #[test]
    fn degenerate_batches_are_refused() {
        let env = EnvSpec::keyed_copy(3, 2, 0).unwrap();
        let p = PolicyParams::tabular(env.vocab(), Emission::Ordinary);
        let err = env.vocab().special(Special::Err);
        let trajs = vec![traj(&env, &[0, 1], &[1, 0], 1, vec![err])];
        let batch = EStepBatch::capture(&trajs, &p).unwrap();
        let mut s = EStepState::new(0.1, DeltaRule::BatchMean, 0.1, PriorMode::DynamicStudent).unwrap();
        assert!(matches!(
            reward_shift(&batch, &p, &mut s),
            Err(Error::DegenerateBatch { positives: 1, negatives: 0 })
        ));
        assert_eq!(reward_margin(&batch, &p, 0.1).unwrap(), None);
        assert!(matches!(EStepBatch::new(&trajs, &[None]), Err(Error::MissingFrozen(0))));
    }

    #[test]
    fn analytic_estep_cases() {
        let env = EnvSpec::keyed_copy(2, 1, 0).unwrap();
        let u = DistTable::uniform(2, 1);
        let q = analytic_estep(&u, &env, &[0], 1.0).unwrap();
        assert_abs_diff_eq!(q.probs()[0], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(q.probs()[1], 0.26894, epsilon = 1e-5);
    }

    #[test]
    fn written_distribution_is_recovered_by_enumeration() {
        let env = EnvSpec::keyed_copy(3, 2, 0).unwrap();
        let mut p = PolicyParams::tabular(env.vocab(), Emission::Ordinary);
        let x = [2, 0];
        let student = enumerate_dist(&p, &Context::student(&x), &env, DEFAULT_ENUMERATION_CAP).unwrap();
        let q = analytic_estep(&student, &env, &x, 0.1).unwrap();
        let fb = [env.vocab().special(Special::Err)];
        write_distribution(&mut p, &Context::teacher(&fb, &x), &q).unwrap();
        let back = enumerate_dist(&p, &Context::teacher(&fb, &x), &env, DEFAULT_ENUMERATION_CAP).unwrap();
        for (a, b) in back.probs().iter().zip(q.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let untouched = enumerate_dist(&p, &Context::student(&x), &env, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(untouched, student);
    }
}
