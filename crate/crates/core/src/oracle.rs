//! Exact enumeration over all responses.
//!
//! Every quantity that is intractable at scale (the partition function, the
//! reward-tilted optimum, sequence-level divergences, the ELBO, the
//! regularized objective) is computed here by brute force over the
//! `V^T` response space. Sums use log-sum-exp in double precision.

use rand::Rng;

use crate::env::EnvSpec;
use crate::error::{config, Error, Result};
use crate::policy::{standard_normal, Context, Emission, PolicyParams, Token};

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;
const NORMALIZATION_TOL: f64 = 1e-10;

/// Explicit distribution over every length-`len` sequence of the ordinary
/// tokens `0..alphabet`, indexed in lexicographic (first token most
/// significant) order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistTable {
    alphabet: u32,
    len: usize,
    probs: Vec<f64>,
}

fn space(alphabet: u32, len: usize) -> u128 {
    (alphabet as u128).saturating_pow(len as u32)
}

pub fn check_cap(alphabet: u32, len: usize, cap: u64) -> Result<usize> {
    let n = space(alphabet, len);
    if n > cap as u128 {
        return Err(Error::EnumerationCap { requested: n, cap });
    }
    Ok(n as usize)
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl DistTable {
    pub fn new(alphabet: u32, len: usize, probs: Vec<f64>) -> Result<Self> {
        if space(alphabet, len) != probs.len() as u128 {
            return config(format!(
                "table over {alphabet}^{len} sequences needs {} entries, got {}",
                space(alphabet, len),
                probs.len()
            ));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return config("probabilities must be finite and nonnegative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return config(format!("probabilities sum to {total}, not 1"));
        }
        Ok(Self { alphabet, len, probs })
    }

    /// Softmax of arbitrary log-weights.
    pub fn from_log_weights(alphabet: u32, len: usize, logw: &[f64]) -> Result<Self> {
        let z = log_sum_exp(logw.iter().copied());
        Self::new(alphabet, len, logw.iter().map(|l| (l - z).exp()).collect())
    }

    pub fn uniform(alphabet: u32, len: usize) -> Self {
        let n = space(alphabet, len) as usize;
        Self {
            alphabet,
            len,
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Softmax of i.i.d. standard-normal logits: strictly positive everywhere.
    pub fn random<R: Rng + ?Sized>(alphabet: u32, len: usize, rng: &mut R) -> Self {
        let n = space(alphabet, len) as usize;
        let logw: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        Self::from_log_weights(alphabet, len, &logw).expect("finite logits")
    }

    pub fn alphabet(&self) -> u32 {
        self.alphabet
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn same_support(&self, other: &DistTable) -> bool {
        self.alphabet == other.alphabet && self.len == other.len
    }

    pub fn sequence(&self, mut index: usize) -> Vec<Token> {
        let mut y = vec![0; self.len];
        for slot in y.iter_mut().rev() {
            *slot = (index % self.alphabet as usize) as Token;
            index /= self.alphabet as usize;
        }
        y
    }

    pub fn index_of(&self, y: &[Token]) -> Option<usize> {
        if y.len() != self.len || y.iter().any(|&t| t >= self.alphabet) {
            return None;
        }
        Some(y.iter().fold(0usize, |acc, &t| acc * self.alphabet as usize + t as usize))
    }

    pub fn prob(&self, y: &[Token]) -> f64 {
        self.index_of(y).map_or(0.0, |i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<Token>, f64)> + '_ {
        self.probs.iter().enumerate().map(|(i, &p)| (self.sequence(i), p))
    }

    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(values).map(|(p, v)| p * v).sum()
    }

    pub fn total_variation(&self, other: &DistTable) -> Result<f64> {
        if !self.same_support(other) {
            return Err(Error::SupportMismatch);
        }
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

/// `r(x, y)` for every entry of a table of the given shape.
pub fn reward_vector(env: &EnvSpec, x: &[Token], shape: &DistTable) -> Vec<f64> {
    (0..shape.len()).map(|i| env.reward(x, &shape.sequence(i))).collect()
}

/// Distribution over all `V^T` responses of `params` in context `ctx`.
pub fn enumerate_dist(params: &PolicyParams, ctx: &Context<'_>, env: &EnvSpec, cap: u64) -> Result<DistTable> {
    if params.emission() != Emission::Ordinary {
        return config("enumeration needs fixed-length generation (ordinary emission)");
    }
    let alphabet = params.vocab().size();
    let n = check_cap(alphabet, env.response_len, cap)?;
    ctx.validate(params.vocab())?;
    let mut logp = vec![0.0f64; n];
    let mut prefix = Vec::with_capacity(env.response_len);
    fill(params, ctx, env.response_len, alphabet, &mut prefix, 0.0, 0, &mut logp);
    let probs: Vec<f64> = logp.into_iter().map(f64::exp).collect();
    DistTable::new(alphabet, env.response_len, probs)
}

#[allow(clippy::too_many_arguments)]
fn fill(
    params: &PolicyParams,
    ctx: &Context<'_>,
    len: usize,
    alphabet: u32,
    prefix: &mut Vec<Token>,
    acc: f64,
    index: usize,
    out: &mut [f64],
) {
    if prefix.len() == len {
        out[index] = acc;
        return;
    }
    let mut full = ctx.prefix.to_vec();
    full.extend_from_slice(prefix);
    let dist = params
        .next_token_dist(&Context { prefix: &full, ..*ctx })
        .expect("validated context");
    for tok in 0..alphabet {
        prefix.push(tok);
        let next = index * alphabet as usize + tok as usize;
        fill(params, ctx, len, alphabet, prefix, acc + dist[tok as usize].ln(), next, out);
        prefix.pop();
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return config(format!("beta must be positive, got {beta}"));
    }
    Ok(())
}

/// `log sum_y prior(y) exp(r(y) / beta)`.
pub fn log_partition(prior: &DistTable, rewards: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(log_sum_exp(
        prior
            .probs
            .iter()
            .zip(rewards)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, r)| p.ln() + r / beta),
    ))
}

/// `log Z(x)` for the environment's reward.
pub fn partition_function(ref_dist: &DistTable, env: &EnvSpec, x: &[Token], beta: f64) -> Result<f64> {
    log_partition(ref_dist, &reward_vector(env, x, ref_dist), beta)
}

/// `prior(y) exp(r(y) / beta) / Z` and `log Z`.
pub fn tilt(prior: &DistTable, rewards: &[f64], beta: f64) -> Result<(DistTable, f64)> {
    let log_z = log_partition(prior, rewards, beta)?;
    let probs = prior
        .probs
        .iter()
        .zip(rewards)
        .map(|(&p, r)| if p > 0.0 { (p.ln() + r / beta - log_z).exp() } else { 0.0 })
        .collect();
    Ok((DistTable::new(prior.alphabet, prior.len, probs)?, log_z))
}

/// The reward-tilted optimum of the KL-regularized objective.
pub fn optimal_policy(ref_dist: &DistTable, env: &EnvSpec, x: &[Token], beta: f64) -> Result<DistTable> {
    Ok(tilt(ref_dist, &reward_vector(env, x, ref_dist), beta)?.0)
}

/// `sum p log(p / q)`.
pub fn exact_kl(p: &DistTable, q: &DistTable) -> Result<f64> {
    if !p.same_support(q) {
        return Err(Error::SupportMismatch);
    }
    let mut kl = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::ZeroSupport(a));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

/// `E_policy[r] - beta KL(policy || ref)`.
pub fn objective(policy: &DistTable, ref_dist: &DistTable, rewards: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(policy.expectation(rewards) - beta * exact_kl(policy, ref_dist)?)
}

pub fn exact_objective(policy: &DistTable, ref_dist: &DistTable, env: &EnvSpec, x: &[Token], beta: f64) -> Result<f64> {
    objective(policy, ref_dist, &reward_vector(env, x, policy), beta)
}

/// `(1/beta) E_q[r] - KL(q || ref)`.
pub fn elbo_with(q: &DistTable, ref_dist: &DistTable, rewards: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(q.expectation(rewards) / beta - exact_kl(q, ref_dist)?)
}

pub fn elbo(q: &DistTable, ref_dist: &DistTable, env: &EnvSpec, x: &[Token], beta: f64) -> Result<f64> {
    elbo_with(q, ref_dist, &reward_vector(env, x, q), beta)
}

/// Exact quantities for one prompt under a fixed reference.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub prompt: Vec<Token>,
    pub beta: f64,
    pub log_partition: f64,
    pub optimal_dist: DistTable,
    pub reference: DistTable,
    pub rewards: Vec<f64>,
}

impl OracleReport {
    pub fn build(reference: &PolicyParams, env: &EnvSpec, x: &[Token], beta: f64, cap: u64) -> Result<Self> {
        let ref_dist = enumerate_dist(reference, &Context::student(x), env, cap)?;
        Self::from_dist(ref_dist, env, x, beta)
    }

    pub fn from_dist(reference: DistTable, env: &EnvSpec, x: &[Token], beta: f64) -> Result<Self> {
        let rewards = reward_vector(env, x, &reference);
        let (optimal_dist, log_partition) = tilt(&reference, &rewards, beta)?;
        Ok(Self {
            prompt: x.to_vec(),
            beta,
            log_partition,
            optimal_dist,
            reference,
            rewards,
        })
    }

    /// `J` for a policy distribution over the same responses.
    pub fn objective_of(&self, policy: &DistTable) -> Result<f64> {
        objective(policy, &self.reference, &self.rewards, self.beta)
    }

    pub fn elbo_of(&self, q: &DistTable) -> Result<f64> {
        elbo_with(q, &self.reference, &self.rewards, self.beta)
    }
}
