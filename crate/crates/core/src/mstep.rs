//! Student distillation on its own rollouts.
//!
//! At every visited prefix the unconditioned student distribution is pulled
//! toward the feedback-conditioned teacher distribution. Teacher evaluations
//! are constants, so gradient reaches only student-context parameters.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::policy::{GradientRecord, PolicyParams, Trajectory};

const NORMALIZATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    ReverseKl,
    ForwardKl,
    Js,
}

impl Divergence {
    pub const ALL: [Divergence; 3] = [Divergence::ReverseKl, Divergence::ForwardKl, Divergence::Js];

    pub fn as_str(self) -> &'static str {
        match self {
            Divergence::ReverseKl => "reverse-kl",
            Divergence::ForwardKl => "forward-kl",
            Divergence::Js => "js",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSource {
    #[default]
    SharedCurrent,
    EmaSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub divergence: Divergence,
    pub teacher_source: TeacherSource,
    pub learning_rate: f64,
    pub reduction: Reduction,
}

impl DistillConfig {
    pub fn new(divergence: Divergence, teacher_source: TeacherSource, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return config(format!("learning_rate must be positive, got {learning_rate}"));
        }
        Ok(Self {
            divergence,
            teacher_source,
            learning_rate,
            reduction: Reduction::Mean,
        })
    }
}

fn check_normalized(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&x| x < 0.0) {
        return Err(Error::Precondition(format!("distribution sums to {s}")));
    }
    Ok(())
}

fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::ZeroSupport(a));
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total)
}

/// Divergence between a student and a teacher next-token distribution.
pub fn token_divergence(student: &[f64], teacher: &[f64], kind: Divergence) -> Result<f64> {
    token_divergence_grad(student, teacher, kind).map(|(d, _)| d)
}

/// Divergence and its gradient with respect to the student's logits.
pub fn token_divergence_grad(student: &[f64], teacher: &[f64], kind: Divergence) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::SupportMismatch);
    }
    check_normalized(student)?;
    check_normalized(teacher)?;
    let p = student;
    let q = teacher;
    match kind {
        Divergence::ReverseKl => {
            let d = kl(p, q)?;
            let g = p
                .iter()
                .zip(q)
                .map(|(&a, &b)| if a > 0.0 { a * ((a / b).ln() - d) } else { 0.0 })
                .collect();
            Ok((d, g))
        }
        Divergence::ForwardKl => {
            let d = kl(q, p)?;
            Ok((d, p.iter().zip(q).map(|(a, b)| a - b).collect()))
        }
        Divergence::Js => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            let d = 0.5 * kl(p, &m)? + 0.5 * kl(q, &m)?;
            let dp: Vec<f64> = p
                .iter()
                .zip(&m)
                .map(|(&a, &mm)| if a > 0.0 { 0.5 * (a / mm).ln() } else { 0.0 })
                .collect();
            let avg: f64 = p.iter().zip(&dp).map(|(a, g)| a * g).sum();
            Ok((d, p.iter().zip(&dp).map(|(a, g)| a * (g - avg)).collect()))
        }
    }
}

/// Per-trajectory distillation loss with the teacher evaluated from
/// `teacher` (which may be the same store as `student`).
pub fn distill_loss_with_teacher(
    student: &PolicyParams,
    teacher: &PolicyParams,
    traj: &Trajectory,
    kind: Divergence,
    reduction: Reduction,
) -> Result<(f64, GradientRecord)> {
    let tctx = traj
        .teacher_context()
        .ok_or(Error::MissingFeedback(traj.rollout_index))?;
    let teacher_dists = teacher.step_dists(&tctx, &traj.response);
    let n = traj.response.len();
    let scale = match reduction {
        Reduction::Mean if n > 0 => 1.0 / n as f64,
        _ => 1.0,
    };
    let mut grad = GradientRecord::zeros_like(student);
    let mut loss = 0.0;
    let mut failure = None;
    student.walk(&traj.student_context(), &traj.response, |site, t, dist| {
        if failure.is_some() {
            return;
        }
        match token_divergence_grad(dist, &teacher_dists[t], kind) {
            Ok((d, g)) => {
                loss += scale * d;
                student.accumulate(&mut grad, site, scale, &g);
            }
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok((loss, grad)),
    }
}

/// Distillation loss against the live shared weights.
pub fn distill_loss(params: &PolicyParams, traj: &Trajectory, cfg: &DistillConfig) -> Result<(f64, GradientRecord)> {
    distill_loss_with_teacher(params, params, traj, cfg.divergence, cfg.reduction)
}

#[derive(Debug, Clone)]
pub struct DistillBatch {
    /// Mean loss over included trajectories; zero when none are included.
    pub loss: f64,
    pub grad: GradientRecord,
    pub included: usize,
    pub skipped: usize,
}

/// Mean loss and gradient over every trajectory that carries feedback.
pub fn distill_batch(
    student: &PolicyParams,
    teacher: &PolicyParams,
    trajs: &[Trajectory],
    kind: Divergence,
    reduction: Reduction,
) -> Result<DistillBatch> {
    let mut grad = GradientRecord::zeros_like(student);
    let mut loss = 0.0;
    let mut included = 0;
    let mut skipped = 0;
    for traj in trajs {
        if traj.teacher_context().is_none() {
            skipped += 1;
            continue;
        }
        let (l, g) = distill_loss_with_teacher(student, teacher, traj, kind, reduction)?;
        loss += l;
        grad.add_scaled(&g, 1.0);
        included += 1;
    }
    if included > 0 {
        loss /= included as f64;
        grad.scale(1.0 / included as f64);
    }
    Ok(DistillBatch {
        loss,
        grad,
        included,
        skipped,
    })
}

/// `exp(current - stored)` per generated token.
pub fn importance_ratio(traj: &Trajectory, current: &PolicyParams) -> Vec<f64> {
    current
        .token_logprobs(&traj.student_context(), &traj.response)
        .iter()
        .zip(&traj.token_logprobs)
        .map(|(now, then)| (now - then).exp())
        .collect()
}

/// Mean per-token log importance ratio over a batch.
pub fn importance_drift(trajs: &[Trajectory], current: &PolicyParams) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in trajs {
        for r in importance_ratio(t, current) {
            total += r.ln();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn divergence_values() {
        let p = [0.5, 0.5];
        let q = [0.75, 0.25];
        for k in Divergence::ALL {
            assert_eq!(token_divergence(&p, &p, k).unwrap(), 0.0);
        }
        assert_abs_diff_eq!(token_divergence(&p, &q, Divergence::ReverseKl).unwrap(), 0.14384, epsilon = 1e-5);
        assert_abs_diff_eq!(
            token_divergence(&p, &q, Divergence::Js).unwrap(),
            token_divergence(&q, &p, Divergence::Js).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_teacher_mass_is_an_error() {
        let p = [0.5, 0.5];
        let q = [1.0, 0.0];
        assert!(matches!(token_divergence(&p, &q, Divergence::ReverseKl), Err(Error::ZeroSupport(_))));
        assert!(token_divergence(&p, &q, Divergence::Js).is_ok());
        assert!(token_divergence(&[0.5, 0.6], &p, Divergence::Js).is_err());
    }
}
