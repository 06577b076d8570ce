use rand::Rng;

use crate::env::FeedbackRecord;
use crate::error::{Error, Result};

use super::context::Context;
use super::params::PolicyParams;
use super::vocab::{Special, Token};

/// One prompt/response pair with the log-probabilities it was generated with.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// `log pi(y_t | x, y_<t)` under the generating parameters, nats.
    pub token_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub reward: u8,
    pub feedback: Option<FeedbackRecord>,
    pub group_id: usize,
    pub rollout_index: usize,
}

impl Trajectory {
    pub fn student_context(&self) -> Context<'_> {
        Context::student(&self.prompt)
    }

    /// Teacher context built from the attached feedback, if any.
    pub fn teacher_context(&self) -> Option<Context<'_>> {
        self.feedback
            .as_ref()
            .filter(|fb| !fb.is_none())
            .map(|fb| Context::teacher(&fb.tokens, &self.prompt))
    }
}

fn draw<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as Token;
            }
        }
    }
    last as Token
}

fn argmax(dist: &[f64]) -> Token {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as Token
}

fn generate<F>(params: &PolicyParams, ctx: &Context<'_>, max_len: usize, mut pick: F) -> Result<(Vec<Token>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Token,
{
    if max_len == 0 {
        return Err(Error::Precondition("max_len must be at least 1".into()));
    }
    ctx.validate(params.vocab())?;
    let eos = params.vocab().find(Special::Eos);
    let mut prefix = ctx.prefix.to_vec();
    let mut response = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    while response.len() < max_len {
        let step = Context { prefix: &prefix, ..*ctx };
        let dist = params.next_token_dist(&step)?;
        let tok = pick(&dist);
        logprobs.push(dist[tok as usize].ln());
        response.push(tok);
        prefix.push(tok);
        if Some(tok) == eos {
            break;
        }
    }
    Ok((response, logprobs))
}

/// Draw a response token by token from `next_token_dist`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &PolicyParams,
    ctx: &Context<'_>,
    rng: &mut R,
    max_len: usize,
) -> Result<Trajectory> {
    let (response, token_logprobs) = generate(params, ctx, max_len, |d| draw(d, rng))?;
    Ok(Trajectory {
        prompt: ctx.prompt.to_vec(),
        total_logprob: token_logprobs.iter().sum(),
        response,
        token_logprobs,
        reward: 0,
        feedback: None,
        group_id: 0,
        rollout_index: 0,
    })
}

/// Most likely token at every step; ties go to the lowest index.
pub fn greedy_decode(params: &PolicyParams, ctx: &Context<'_>, max_len: usize) -> Result<Vec<Token>> {
    Ok(generate(params, ctx, max_len, argmax)?.0)
}
