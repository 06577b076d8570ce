//! The oracle verification suite behind `vpd oracle-check`.
//!
//! Each check yields one [`CheckRecord`] with the largest residual observed
//! over its random trials. Identity checks run on softmax-of-Gaussian
//! distributions over the configured environment's response space;
//! gradient checks compare analytic gradients with central finite
//! differences on small random instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{grpo_loss, hybrid_joint_loss, reshape_advantage, reweight_advantage, surrogate_loss, HybridConfig};
use crate::env::{EnvSpec, FeedbackMode};
use crate::error::Result;
use crate::estep::{bco_loss, decoupled_bound, dpo_pair_loss, EStepBatch, EStepState, DeltaRule, PriorMode};
use crate::mstep::{distill_loss_with_teacher, Divergence, Reduction};
use crate::oracle::{check_cap, exact_kl, objective, reward_vector, tilt, DistTable, DEFAULT_ENUMERATION_CAP};
use crate::policy::{standard_normal, Context, Emission, GradientRecord, PolicyKind, PolicyParams, Token, Trajectory};
use crate::rng::{stream, Domain};

pub const IDENTITY_TOL: f64 = 1e-9;
pub const BOUND_SLACK: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

pub const OBJECTIVE_EQUIVALENCE: &str = "objective-equivalence";
pub const ELBO_DECOMPOSITION: &str = "elbo-decomposition";
pub const TRUST_REGION: &str = "trust-region";
pub const ALIGNMENT_BONUS: &str = "alignment-bonus";
pub const IDENTITIES: [&str; 4] = [OBJECTIVE_EQUIVALENCE, ELBO_DECOMPOSITION, TRUST_REGION, ALIGNMENT_BONUS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub max_residual: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl CheckRecord {
    fn new(name: &str, max_residual: f64, tolerance: f64, trials: usize) -> Self {
        Self {
            name: name.into(),
            passed: max_residual <= tolerance,
            max_residual,
            tolerance,
            trials,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub env: EnvSpec,
    pub beta: f64,
    pub seed: u64,
    pub trials: usize,
    pub optimality_trials: usize,
    pub bound_pairs: usize,
    pub gradient_instances: usize,
    /// Multiply beta by 1.5 on one side of the named identity.
    pub corrupt: Option<String>,
}

impl SuiteConfig {
    pub fn new(env: EnvSpec, beta: f64, seed: u64) -> Self {
        Self {
            env,
            beta,
            seed,
            trials: 100,
            optimality_trials: 1000,
            bound_pairs: 10_000,
            gradient_instances: 50,
            corrupt: None,
        }
    }
}

/// Every check: identities, optimality, the BCO bound, gradients.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRecord>> {
    let mut out = identity_checks(&cfg.env, cfg.beta, cfg.trials, cfg.seed, cfg.corrupt.as_deref())?;
    out.push(optimality_check(&cfg.env, cfg.beta, cfg.optimality_trials, cfg.seed)?);
    out.push(bco_bound_check(cfg.bound_pairs, cfg.seed));
    out.extend(gradient_checks(cfg.gradient_instances, cfg.seed)?);
    Ok(out)
}

fn random_prompt(env: &EnvSpec, rng: &mut impl Rng) -> Vec<Token> {
    env.sample_prompt(rng)
}

fn expectation_log_ratio(q: &DistTable, a: &DistTable, b: &DistTable) -> f64 {
    q.probs()
        .iter()
        .zip(a.probs().iter().zip(b.probs()))
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, (x, y))| w * (x / y).ln())
        .sum()
}

/// Residuals of the four exact identities over `trials` random instances.
pub fn identity_checks(
    env: &EnvSpec,
    beta: f64,
    trials: usize,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<Vec<CheckRecord>> {
    check_cap(env.vocab_size, env.response_len, DEFAULT_ENUMERATION_CAP)?;
    let bad = |name: &str| if corrupt == Some(name) { 1.5 * beta } else { beta };
    let (a, t) = (env.vocab_size, env.response_len);
    let mut worst = [0.0f64; 4];
    for trial in 0..trials {
        let mut rng = stream(seed, Domain::Test, &[1, trial as u64]);
        let x = random_prompt(env, &mut rng);
        let reference = DistTable::random(a, t, &mut rng);
        let pi = DistTable::random(a, t, &mut rng);
        let q = DistTable::random(a, t, &mut rng);
        let q2 = DistTable::random(a, t, &mut rng);
        let r = reward_vector(env, &x, &reference);
        let (star, log_z) = tilt(&reference, &r, beta)?;
        let (dyn_star, log_z_dyn) = tilt(&pi, &r, beta)?;

        let b = bad(OBJECTIVE_EQUIVALENCE);
        let lhs = objective(&pi, &reference, &r, beta)?;
        let rhs = b * log_z - b * exact_kl(&pi, &star)?;
        worst[0] = worst[0].max((lhs - rhs).abs());

        let b = bad(ELBO_DECOMPOSITION);
        let f = q.expectation(&r) / b - exact_kl(&q, &reference)?;
        worst[1] = worst[1].max((log_z - (f + exact_kl(&q, &star)?)).abs());

        let b = bad(TRUST_REGION);
        let tr = exact_kl(&q, &dyn_star)? - log_z_dyn + q.expectation(&r) / b - exact_kl(&q, &pi)?;
        worst[2] = worst[2].max(tr.abs());

        let b = bad(ALIGNMENT_BONUS);
        let bonus = |q: &DistTable, scale: f64| -> Result<f64> {
            Ok(exact_kl(q, &dyn_star)? - exact_kl(q, &star)? + scale * expectation_log_ratio(q, &pi, &reference))
        };
        let c1 = bonus(&q, 1.0)?;
        let c2 = bonus(&q2, beta / b)?;
        worst[3] = worst[3].max((c1 - c2).abs()).max((c1 - (log_z_dyn - log_z)).abs());
    }
    Ok(IDENTITIES
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckRecord::new(n, w, IDENTITY_TOL, trials))
        .collect())
}

/// `J(pi*) >= J(pi)` for perturbations of `pi*`; the residual is the largest
/// amount by which a perturbed policy beats the optimum.
pub fn optimality_check(env: &EnvSpec, beta: f64, trials: usize, seed: u64) -> Result<CheckRecord> {
    check_cap(env.vocab_size, env.response_len, DEFAULT_ENUMERATION_CAP)?;
    let (a, t) = (env.vocab_size, env.response_len);
    let mut rng = stream(seed, Domain::Test, &[2]);
    let x = random_prompt(env, &mut rng);
    let reference = DistTable::random(a, t, &mut rng);
    let r = reward_vector(env, &x, &reference);
    let (star, _) = tilt(&reference, &r, beta)?;
    let best = objective(&star, &reference, &r, beta)?;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let scale = rng.gen_range(1e-3..3.0);
        let logw: Vec<f64> = star
            .probs()
            .iter()
            .map(|p| p.ln() + scale * standard_normal(&mut rng))
            .collect();
        let pi = DistTable::from_log_weights(a, t, &logw)?;
        worst = worst.max(objective(&pi, &reference, &r, beta)? - best);
    }
    Ok(CheckRecord::new("optimal-policy", worst.max(0.0), 0.0, trials))
}

/// `-ln sigma(a - b) <= -ln sigma(a) - ln sigma(-b)` over random pairs.
pub fn bco_bound_check(pairs: usize, seed: u64) -> CheckRecord {
    let mut rng = stream(seed, Domain::Test, &[3]);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let a = 10.0 * standard_normal(&mut rng);
        let b = 10.0 * standard_normal(&mut rng);
        worst = worst.max(dpo_pair_loss(a, b) - decoupled_bound(a, b));
    }
    CheckRecord::new("bco-bound", worst.max(0.0), BOUND_SLACK, pairs)
}

/// A small random instance: policy, live teacher snapshot, and a batch with
/// at least one success and one failure per group.
pub struct GradientInstance {
    pub env: EnvSpec,
    pub params: PolicyParams,
    pub snapshot: PolicyParams,
    pub trajs: Vec<Trajectory>,
}

fn populate(params: &mut PolicyParams, ctx: &Context<'_>, y: &[Token], rng: &mut impl Rng) -> Result<()> {
    let vt = params.vocab().total();
    for t in 0..=y.len() {
        let mut prefix = ctx.prefix.to_vec();
        prefix.extend_from_slice(&y[..t]);
        let logits = (0..vt).map(|_| standard_normal(rng)).collect();
        params.set_logits(&Context { prefix: &prefix, ..*ctx }, logits)?;
    }
    Ok(())
}

pub fn gradient_instance(index: u64, seed: u64) -> Result<GradientInstance> {
    let mut rng = stream(seed, Domain::Test, &[4, index]);
    let env = EnvSpec::keyed_copy(3, 2, rng.gen_range(0..4))?;
    let kind = if index % 2 == 0 { PolicyKind::Tabular } else { PolicyKind::LinearSoftmax };
    let vocab = env.vocab();
    let mut params = match kind {
        PolicyKind::Tabular => PolicyParams::tabular(vocab, Emission::Ordinary),
        PolicyKind::LinearSoftmax => {
            let mut p = PolicyParams::linear(vocab, Emission::Ordinary, env.response_len);
            p.randomize_linear(&mut rng, 0.5)?;
            p
        }
    };
    let mut trajs = Vec::new();
    for g in 0..2 {
        let x = env.sample_prompt(&mut rng);
        let target = env.target(&x);
        let mut group = Vec::new();
        for n in 0..3 {
            let response: Vec<Token> = match n {
                0 => target.clone(),
                1 => target.iter().map(|t| (t + 1) % env.vocab_size).collect(),
                _ => (0..env.response_len).map(|_| rng.gen_range(0..env.vocab_size)).collect(),
            };
            group.push(Trajectory {
                prompt: x.clone(),
                reward: env.reward(&x, &response) as u8,
                response,
                token_logprobs: Vec::new(),
                total_logprob: 0.0,
                feedback: None,
                group_id: g,
                rollout_index: n,
            });
        }
        let snapshot = group.clone();
        for t in group.iter_mut() {
            t.feedback = Some(env.make_feedback(FeedbackMode::EnvDiagnostic, &x, t, &snapshot)?);
        }
        trajs.extend(group);
    }
    if kind == PolicyKind::Tabular {
        for t in &trajs {
            populate(&mut params, &t.student_context(), &t.response, &mut rng)?;
            populate(&mut params, &t.teacher_context().expect("feedback"), &t.response, &mut rng)?;
        }
    }
    let mut snapshot = params.clone();
    for id in snapshot.coordinates() {
        let v = snapshot.get(&id) + 0.3 * standard_normal(&mut rng);
        snapshot.set(&id, v);
    }
    // Generation-time log-probabilities: ratios land either well inside or
    // well outside the clip range so that no kink is within reach of the
    // finite-difference step.
    for t in trajs.iter_mut() {
        let now = params.token_logprobs(&t.student_context(), &t.response);
        t.token_logprobs = now
            .iter()
            .map(|l| {
                let shift = if rng.gen_bool(0.5) {
                    rng.gen_range(-0.1..0.1)
                } else {
                    rng.gen_range(0.4..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
                };
                l - shift
            })
            .collect();
        t.total_logprob = t.token_logprobs.iter().sum();
    }
    Ok(GradientInstance {
        env,
        params,
        snapshot,
        trajs,
    })
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` with central
/// differences over every stored coordinate.
pub fn finite_difference_error(
    params: &PolicyParams,
    analytic: &GradientRecord,
    f: impl Fn(&PolicyParams) -> f64,
) -> f64 {
    let mut p = params.clone();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for id in params.coordinates() {
        let x = p.get(&id);
        p.set(&id, x + FD_STEP);
        let up = f(&p);
        p.set(&id, x - FD_STEP);
        let down = f(&p);
        p.set(&id, x);
        let num = (up - down) / (2.0 * FD_STEP);
        let ana = analytic.get(&id);
        diff += (ana - num).powi(2);
        na += ana * ana;
        nn += num * num;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

fn hybrid_cfg() -> HybridConfig {
    HybridConfig {
        omega_rl: 0.7,
        omega_opd: 0.4,
        ..HybridConfig::default()
    }
}

/// Finite-difference checks for every differentiable loss.
pub fn gradient_checks(instances: usize, seed: u64) -> Result<Vec<CheckRecord>> {
    let names = [
        "grad-logprob",
        "grad-bco",
        "grad-distill-reverse-kl",
        "grad-distill-forward-kl",
        "grad-distill-js",
        "grad-grpo",
        "grad-hybrid-joint",
        "grad-hybrid-reshape",
        "grad-hybrid-reweight",
    ];
    let mut worst = [0.0f64; 9];
    for i in 0..instances {
        let inst = gradient_instance(i as u64, seed)?;
        let p = &inst.params;
        let trajs = &inst.trajs;
        let t0 = &trajs[1];

        let ctx = t0.teacher_context().expect("feedback");
        let g = p.logprob_grad(&ctx, &t0.response);
        worst[0] = worst[0].max(finite_difference_error(p, &g, |q| q.sequence_logprob(&ctx, &t0.response)));

        let batch = EStepBatch::capture(trajs, p)?;
        let mut state = EStepState::new(0.5, DeltaRule::BatchMean, 0.1, PriorMode::DynamicStudent)?;
        state.delta = 0.05 * (i as f64 - 25.0);
        let (_, g) = bco_loss(&batch, p, &state)?;
        worst[1] = worst[1].max(finite_difference_error(p, &g, |q| {
            bco_loss(&batch, q, &state).expect("valid batch").0
        }));

        for (k, kind) in Divergence::ALL.into_iter().enumerate() {
            let reduction = if i % 3 == 0 { Reduction::Sum } else { Reduction::Mean };
            let (_, g) = distill_loss_with_teacher(p, p, t0, kind, reduction)?;
            let teacher = p.clone();
            worst[2 + k] = worst[2 + k].max(finite_difference_error(p, &g, |q| {
                distill_loss_with_teacher(q, &teacher, t0, kind, reduction).expect("valid").0
            }));
        }

        let adv: Vec<f64> = (0..trajs.len()).map(|j| if j % 2 == 0 { 0.8 } else { -1.1 }).collect();
        let (_, g) = grpo_loss(trajs, p, &adv, 0.2)?;
        worst[5] = worst[5].max(finite_difference_error(p, &g, |q| grpo_loss(trajs, q, &adv, 0.2).expect("valid").0));

        let hc = hybrid_cfg();
        let snap = &inst.snapshot;
        let (_, g) = hybrid_joint_loss(trajs, p, snap, &adv, &hc, Divergence::ReverseKl, Reduction::Mean)?;
        worst[6] = worst[6].max(finite_difference_error(p, &g, |q| {
            hybrid_joint_loss(trajs, q, snap, &adv, &hc, Divergence::ReverseKl, Reduction::Mean)
                .expect("valid")
                .0
        }));

        let deltas: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| crate::baselines::sdpo_token_advantage(t, p, snap))
            .collect();
        for (k, reshape) in [true, false].into_iter().enumerate() {
            let tok: Vec<Vec<f64>> = adv
                .iter()
                .zip(&deltas)
                .map(|(&a, d)| {
                    d.iter()
                        .map(|&dt| {
                            if reshape {
                                reshape_advantage(a, dt, hc.omega_rl, hc.omega_opd)
                            } else {
                                reweight_advantage(a, dt, 0.6, hc.reweight_clip)
                            }
                        })
                        .collect()
                })
                .collect();
            let (_, g) = surrogate_loss(trajs, p, &tok, 0.2)?;
            worst[7 + k] = worst[7 + k].max(finite_difference_error(p, &g, |q| {
                surrogate_loss(trajs, q, &tok, 0.2).expect("valid").0
            }));
        }
        let _ = &inst.env;
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckRecord::new(n, w, GRADIENT_TOL, instances))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_beta_is_caught_by_name() {
        let env = EnvSpec::keyed_copy(3, 2, 0).unwrap();
        for name in IDENTITIES {
            let recs = identity_checks(&env, 0.5, 5, 1, Some(name)).unwrap();
            for r in recs {
                assert_eq!(r.passed, r.name != name, "{name}: {r:?}");
            }
        }
    }

    #[test]
    fn oversized_env_is_refused() {
        let env = EnvSpec::keyed_copy(10, 7, 0).unwrap();
        assert!(matches!(
            identity_checks(&env, 0.1, 1, 0, None),
            Err(crate::Error::EnumerationCap { .. })
        ));
    }
}
