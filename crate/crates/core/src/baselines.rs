//! GRPO, SDPO and the single-phase hybrids that mix them.
//!
//! All methods share the rollout machinery; they differ only in how a batch
//! of trajectories becomes a gradient.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::math::{mean, std_dev};
use crate::mstep::{distill_batch, Divergence, Reduction};
use crate::policy::{GradientRecord, PolicyParams, Trajectory};

pub const STD_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSchedule {
    Constant,
    #[default]
    LinearDecayToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub omega_rl: f64,
    pub omega_opd: f64,
    pub ppo_clip: f64,
    pub reweight_clip: f64,
    pub alpha_start: f64,
    pub alpha_schedule: AlphaSchedule,
    /// Zero means "the run's total batch count".
    pub total_steps_for_decay: usize,
    /// Standardize per-token distillation advantages over the batch before
    /// fusing them in the reshaping hybrid.
    pub standardize_sdpo: bool,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            omega_rl: 0.5,
            omega_opd: 0.5,
            ppo_clip: 0.2,
            reweight_clip: 0.2,
            alpha_start: 1.0,
            alpha_schedule: AlphaSchedule::LinearDecayToZero,
            total_steps_for_decay: 0,
            standardize_sdpo: false,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) {
            return config(format!("hybrid.ppo_clip must lie in (0, 1), got {}", self.ppo_clip));
        }
        if !(self.reweight_clip > 0.0 && self.reweight_clip < 1.0) {
            return config(format!("hybrid.reweight_clip must lie in (0, 1), got {}", self.reweight_clip));
        }
        if !(0.0..=1.0).contains(&self.alpha_start) {
            return config(format!("hybrid.alpha_start must lie in [0, 1], got {}", self.alpha_start));
        }
        if !self.omega_rl.is_finite() || !self.omega_opd.is_finite() {
            return config("hybrid.omega_rl and hybrid.omega_opd must be finite");
        }
        Ok(())
    }

    /// Mixing coefficient at 0-based update `step`.
    pub fn alpha(&self, step: usize, total: usize) -> f64 {
        match self.alpha_schedule {
            AlphaSchedule::Constant => self.alpha_start,
            AlphaSchedule::LinearDecayToZero => {
                let total = if self.total_steps_for_decay > 0 { self.total_steps_for_decay } else { total };
                if total == 0 || step >= total {
                    0.0
                } else {
                    self.alpha_start * (1.0 - step as f64 / total as f64)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub group_id: usize,
    pub advantages: Vec<f64>,
}

/// `(r - mean) / (std + 1e-6)`, all zeros when every reward is equal.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return config(format!("GRPO groups need at least 2 rollouts, got {}", rewards.len()));
    }
    let m = mean(rewards);
    let s = std_dev(rewards);
    if s == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - m) / (s + STD_GUARD)).collect())
}

/// Advantages for every group in a batch, keyed by `group_id` in order of
/// first appearance.
pub fn batch_advantages(trajs: &[Trajectory]) -> Result<(Vec<GroupAdvantages>, Vec<f64>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == t.group_id) {
            Some((_, members)) => members.push(i),
            None => groups.push((t.group_id, vec![i])),
        }
    }
    let mut per_traj = vec![0.0; trajs.len()];
    let mut out = Vec::with_capacity(groups.len());
    for (group_id, members) in groups {
        let rewards: Vec<f64> = members.iter().map(|&i| trajs[i].reward as f64).collect();
        let advantages = grpo_advantages(&rewards)?;
        for (&i, &a) in members.iter().zip(&advantages) {
            per_traj[i] = a;
        }
        out.push(GroupAdvantages { group_id, advantages });
    }
    Ok((out, per_traj))
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// `min(rho A, clip(rho, 1-eps, 1+eps) A)` and its derivative in `rho`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = clip(ratio, 1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// Negative clipped surrogate with per-token advantages, averaged over
/// tokens and then over trajectories. The stored generation-time
/// log-probabilities act as the old policy.
pub fn surrogate_loss(
    trajs: &[Trajectory],
    params: &PolicyParams,
    token_advantages: &[Vec<f64>],
    eps: f64,
) -> Result<(f64, GradientRecord)> {
    let mut grad = GradientRecord::zeros_like(params);
    if trajs.is_empty() {
        return Ok((0.0, grad));
    }
    let n = trajs.len() as f64;
    let mut loss = 0.0;
    let mut d = vec![0.0; params.vocab().total()];
    for (traj, adv) in trajs.iter().zip(token_advantages) {
        let len = traj.response.len();
        if len == 0 || adv.iter().all(|&a| a == 0.0) {
            continue;
        }
        let w = 1.0 / (n * len as f64);
        params.walk(&traj.student_context(), &traj.response, |site, t, dist| {
            let tok = traj.response[t] as usize;
            let ratio = (dist[tok].ln() - traj.token_logprobs[t]).exp();
            let (s, ds) = clipped_surrogate(ratio, adv[t], eps);
            loss -= w * s;
            if ds != 0.0 {
                for (di, &p) in d.iter_mut().zip(dist) {
                    *di = -p;
                }
                d[tok] += 1.0;
                params.accumulate(&mut grad, site, -w * ds * ratio, &d);
            }
        });
    }
    Ok((loss, grad))
}

/// GRPO loss with one advantage per trajectory.
pub fn grpo_loss(trajs: &[Trajectory], params: &PolicyParams, advantages: &[f64], eps: f64) -> Result<(f64, GradientRecord)> {
    let per_token: Vec<Vec<f64>> = trajs
        .iter()
        .zip(advantages)
        .map(|(t, &a)| vec![a; t.response.len()])
        .collect();
    surrogate_loss(trajs, params, &per_token, eps)
}

/// Distillation toward a separately held teacher snapshot.
pub fn sdpo_loss(
    trajs: &[Trajectory],
    params: &PolicyParams,
    teacher_snapshot: &PolicyParams,
    kind: Divergence,
    reduction: Reduction,
) -> Result<(f64, GradientRecord)> {
    let b = distill_batch(params, teacher_snapshot, trajs, kind, reduction)?;
    Ok((b.loss, b.grad))
}

/// `log q(y_t | x, C, y_<t) - log pi(y_t | x, y_<t)` per token, as plain
/// values. Trajectories without feedback get all zeros.
pub fn sdpo_token_advantage(traj: &Trajectory, student: &PolicyParams, teacher: &PolicyParams) -> Vec<f64> {
    match traj.teacher_context() {
        None => vec![0.0; traj.response.len()],
        Some(tctx) => {
            let q = teacher.token_logprobs(&tctx, &traj.response);
            let p = student.token_logprobs(&traj.student_context(), &traj.response);
            q.iter().zip(&p).map(|(a, b)| a - b).collect()
        }
    }
}

/// `omega_opd * L_sdpo + omega_rl * L_grpo`.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_joint_loss(
    trajs: &[Trajectory],
    params: &PolicyParams,
    teacher_snapshot: &PolicyParams,
    advantages: &[f64],
    cfg: &HybridConfig,
    kind: Divergence,
    reduction: Reduction,
) -> Result<(f64, GradientRecord)> {
    let (ls, gs) = sdpo_loss(trajs, params, teacher_snapshot, kind, reduction)?;
    let (lg, gg) = grpo_loss(trajs, params, advantages, cfg.ppo_clip)?;
    let mut grad = GradientRecord::zeros_like(params);
    grad.add_scaled(&gs, cfg.omega_opd);
    grad.add_scaled(&gg, cfg.omega_rl);
    Ok((cfg.omega_opd * ls + cfg.omega_rl * lg, grad))
}

pub fn reshape_advantage(a_grpo: f64, a_sdpo: f64, omega_rl: f64, omega_opd: f64) -> f64 {
    omega_rl * a_grpo + omega_opd * a_sdpo
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `A ((1 - alpha) + alpha clip(exp(sign(A) delta), 1 - eps_w, 1 + eps_w))`.
pub fn reweight_advantage(a_grpo: f64, delta_t: f64, alpha: f64, eps_w: f64) -> f64 {
    let w = (sign(a_grpo) * delta_t).exp();
    a_grpo * ((1.0 - alpha) + alpha * clip(w, 1.0 - eps_w, 1.0 + eps_w))
}

/// Zero-mean, unit-variance rescaling of every token value in the batch.
pub fn standardize_tokens(values: &mut [Vec<f64>]) {
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    if flat.len() < 2 {
        return;
    }
    let m = mean(&flat);
    let s = std_dev(&flat);
    for v in values.iter_mut().flatten() {
        *v = (*v - m) / (s + STD_GUARD);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn advantages() {
        assert_eq!(grpo_advantages(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(grpo_advantages(&[0.0; 4]).unwrap(), vec![0.0; 4]);
        let a = grpo_advantages(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        let g = 0.5 / (0.5 + STD_GUARD);
        assert_eq!(a, vec![g, g, -g, -g]);
        assert!(grpo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn surrogate_branches() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), (0.7, 0.7));
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), (1.2, 0.0));
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), (-0.8, 0.0));
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (-1.5, -1.0));
    }

    #[test]
    fn advantage_fusion() {
        assert_eq!(reshape_advantage(1.0, 0.5, 1.0, 1.0), 1.5);
        assert_eq!(reshape_advantage(0.3, 0.5, 1.0, 0.0), 0.3);
        assert!(reshape_advantage(0.0, 0.5, 0.5, 0.5) != 0.0);
        assert_eq!(reweight_advantage(0.7, 2.0, 0.0, 0.2), 0.7);
        assert_abs_diff_eq!(reweight_advantage(-1.0, -0.3, 1.0, 0.2), -1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(reweight_advantage(1.0, 5.0, 1.0, 0.2), 1.2, epsilon = 1e-12);
        assert_eq!(reweight_advantage(0.0, 5.0, 1.0, 0.2), 0.0);
    }

    #[test]
    fn alpha_schedule() {
        let cfg = HybridConfig {
            total_steps_for_decay: 10,
            ..HybridConfig::default()
        };
        assert_eq!(cfg.alpha(0, 100), 1.0);
        assert_eq!(cfg.alpha(5, 100), 0.5);
        assert_eq!(cfg.alpha(10, 100), 0.0);
        assert_eq!(cfg.alpha(50, 100), 0.0);
        let flat = HybridConfig {
            alpha_schedule: AlphaSchedule::Constant,
            alpha_start: 0.3,
            ..HybridConfig::default()
        };
        assert_eq!(flat.alpha(50, 100), 0.3);
        assert!(HybridConfig { ppo_clip: 1.0, ..HybridConfig::default() }.validate().is_err());
    }
}
