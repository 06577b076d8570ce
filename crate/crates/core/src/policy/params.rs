use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

use super::context::Context;
use super::vocab::{Emission, Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Tabular,
    LinearSoftmax,
}

/// Context featurization for the linear-softmax kind.
///
/// Blocks, in order: one-hot of the second-to-last context token, one-hot of
/// the last context token, one-hot of the generation position (capped at
/// `max_len`), multi-hot of the feedback tokens, and a constant bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub vocab_total: usize,
    pub max_len: usize,
}

impl FeatureSpec {
    pub fn len(&self) -> usize {
        3 * self.vocab_total + self.max_len + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Active feature indices (all with value 1).
    pub fn active(&self, key: &[Token], feedback: Option<&[Token]>, position: usize) -> Vec<usize> {
        let v = self.vocab_total;
        let mut out = Vec::with_capacity(5 + feedback.map_or(0, <[_]>::len));
        if key.len() >= 2 {
            out.push(key[key.len() - 2] as usize);
        }
        if let Some(&last) = key.last() {
            out.push(v + last as usize);
        }
        out.push(2 * v + position.min(self.max_len));
        let fb_base = 2 * v + self.max_len + 1;
        if let Some(fb) = feedback {
            let mut seen: Vec<usize> = fb.iter().map(|&t| fb_base + t as usize).collect();
            seen.sort_unstable();
            seen.dedup();
            out.extend(seen);
        }
        out.push(fb_base + v);
        out
    }
}

/// Storage shared by parameters and gradients: either a table from serialized
/// context to logit vector, or a dense row-major `vocab_total x features`
/// weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Table {
    Tabular(BTreeMap<Vec<Token>, Vec<f64>>),
    Linear(Vec<f64>),
}

/// Identifies one scalar parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamId {
    Tabular { key: Vec<Token>, token: usize },
    Linear(usize),
}

/// One parameter store realizing both the student (no feedback in context)
/// and the teacher (feedback in context).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocabulary,
    emission: Emission,
    features: Option<FeatureSpec>,
    pub(crate) table: Table,
}

/// Partial derivatives with the same shape as [`PolicyParams`]. Entries that
/// are absent are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub(crate) table: Table,
}

/// A point at which the policy is evaluated while walking a sequence.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Site<'a> {
    pub key: &'a [Token],
    pub feedback: Option<&'a [Token]>,
    pub position: usize,
}

pub fn softmax_masked(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if allowed(i) { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

impl PolicyParams {
    /// Fresh tabular store: every context reads as all-zero logits.
    pub fn tabular(vocab: Vocabulary, emission: Emission) -> Self {
        Self {
            vocab,
            emission,
            features: None,
            table: Table::Tabular(BTreeMap::new()),
        }
    }

    /// Zero-initialized linear-softmax policy.
    pub fn linear(vocab: Vocabulary, emission: Emission, max_len: usize) -> Self {
        let spec = FeatureSpec {
            vocab_total: vocab.total(),
            max_len,
        };
        let n = spec.len() * vocab.total();
        Self {
            vocab,
            emission,
            features: Some(spec),
            table: Table::Linear(vec![0.0; n]),
        }
    }

    pub fn linear_from_weights(
        vocab: Vocabulary,
        emission: Emission,
        max_len: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let mut p = Self::linear(vocab, emission, max_len);
        let expected = match &p.table {
            Table::Linear(w) => w.len(),
            Table::Tabular(_) => unreachable!(),
        };
        if weights.len() != expected {
            return config(format!(
                "linear weights have {} entries but the feature map needs {expected}",
                weights.len()
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return config("linear weights must be finite");
        }
        p.table = Table::Linear(weights);
        Ok(p)
    }

    pub fn kind(&self) -> PolicyKind {
        match self.table {
            Table::Tabular(_) => PolicyKind::Tabular,
            Table::Linear(_) => PolicyKind::LinearSoftmax,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn emission(&self) -> Emission {
        self.emission
    }

    pub fn feature_spec(&self) -> Option<FeatureSpec> {
        self.features
    }

    pub fn tabular_len(&self) -> usize {
        match &self.table {
            Table::Tabular(t) => t.len(),
            Table::Linear(_) => 0,
        }
    }

    pub(crate) fn site_logits(&self, site: Site<'_>) -> Vec<f64> {
        let vt = self.vocab.total();
        match &self.table {
            Table::Tabular(t) => t.get(site.key).cloned().unwrap_or_else(|| vec![0.0; vt]),
            Table::Linear(w) => {
                let spec = self.features.expect("linear policy without feature spec");
                let nf = spec.len();
                let active = spec.active(site.key, site.feedback, site.position);
                (0..vt)
                    .map(|v| active.iter().map(|&f| w[v * nf + f]).sum())
                    .collect()
            }
        }
    }

    pub(crate) fn site_dist(&self, site: Site<'_>) -> Vec<f64> {
        let logits = self.site_logits(site);
        softmax_masked(&logits, |i| self.emission.allows(&self.vocab, i as Token))
    }

    /// Add `coeff * dlogits` into the gradient of the logits at `site`.
    pub(crate) fn accumulate(&self, grad: &mut GradientRecord, site: Site<'_>, coeff: f64, dlogits: &[f64]) {
        match &mut grad.table {
            Table::Tabular(t) => {
                let entry = t
                    .entry(site.key.to_vec())
                    .or_insert_with(|| vec![0.0; dlogits.len()]);
                for (e, d) in entry.iter_mut().zip(dlogits) {
                    *e += coeff * d;
                }
            }
            Table::Linear(g) => {
                let spec = self.features.expect("linear policy without feature spec");
                let nf = spec.len();
                for f in spec.active(site.key, site.feedback, site.position) {
                    for (v, d) in dlogits.iter().enumerate() {
                        g[v * nf + f] += coeff * d;
                    }
                }
            }
        }
    }

    /// Walk `y` after `ctx`, calling `visit(site, step, dist)` at every step.
    pub(crate) fn walk<F>(&self, ctx: &Context<'_>, y: &[Token], mut visit: F)
    where
        F: FnMut(Site<'_>, usize, &[f64]),
    {
        let mut key = ctx.serialize(&self.vocab);
        let start = ctx.prefix.len();
        for (t, &tok) in y.iter().enumerate() {
            let site = Site {
                key: &key,
                feedback: ctx.feedback,
                position: start + t,
            };
            let dist = self.site_dist(site);
            visit(site, t, &dist);
            key.push(tok);
        }
    }

    pub fn logits(&self, ctx: &Context<'_>) -> Vec<f64> {
        let key = ctx.serialize(&self.vocab);
        self.site_logits(Site {
            key: &key,
            feedback: ctx.feedback,
            position: ctx.prefix.len(),
        })
    }

    /// Softmax of the logits for `ctx`, restricted to emittable tokens.
    pub fn next_token_dist(&self, ctx: &Context<'_>) -> Result<Vec<f64>> {
        ctx.validate(&self.vocab)?;
        let key = ctx.serialize(&self.vocab);
        Ok(self.site_dist(Site {
            key: &key,
            feedback: ctx.feedback,
            position: ctx.prefix.len(),
        }))
    }

    /// Per-step log-probabilities of `y` continuing `ctx`.
    pub fn token_logprobs(&self, ctx: &Context<'_>, y: &[Token]) -> Vec<f64> {
        let mut out = Vec::with_capacity(y.len());
        self.walk(ctx, y, |_, t, dist| out.push(dist[y[t] as usize].ln()));
        out
    }

    /// `sum_t log p(y_t | ctx, y_<t)` in nats; zero for an empty `y`.
    pub fn sequence_logprob(&self, ctx: &Context<'_>, y: &[Token]) -> f64 {
        self.token_logprobs(ctx, y).iter().sum()
    }

    /// Per-step next-token distributions along `y`.
    pub fn step_dists(&self, ctx: &Context<'_>, y: &[Token]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(y.len());
        self.walk(ctx, y, |_, _, dist| out.push(dist.to_vec()));
        out
    }

    /// Accumulate `coeff * d/dparams log p(y | ctx)` into `grad`; returns the log-probability.
    pub fn accumulate_logprob_grad(
        &self,
        grad: &mut GradientRecord,
        ctx: &Context<'_>,
        y: &[Token],
        coeff: f64,
    ) -> f64 {
        let mut total = 0.0;
        let mut d = vec![0.0; self.vocab.total()];
        self.walk(ctx, y, |site, t, dist| {
            let tok = y[t] as usize;
            total += dist[tok].ln();
            for (di, &p) in d.iter_mut().zip(dist) {
                *di = -p;
            }
            d[tok] += 1.0;
            self.accumulate(grad, site, coeff, &d);
        });
        total
    }

    /// Gradient of `sequence_logprob` with respect to every parameter.
    pub fn logprob_grad(&self, ctx: &Context<'_>, y: &[Token]) -> GradientRecord {
        let mut g = GradientRecord::zeros_like(self);
        self.accumulate_logprob_grad(&mut g, ctx, y, 1.0);
        g
    }

    /// `target <- (1 - rate) * target + rate * source`, elementwise.
    pub fn ema_update(&mut self, source: &PolicyParams, rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rate) {
            return config(format!("ema rate must lie in [0, 1], got {rate}"));
        }
        if self.vocab != source.vocab || self.emission != source.emission || self.features != source.features {
            return config("ema update between parameter stores of different shape");
        }
        match (&mut self.table, &source.table) {
            (Table::Tabular(dst), Table::Tabular(src)) => {
                let vt = self.vocab.total();
                for (k, s) in src {
                    let d = dst.entry(k.clone()).or_insert_with(|| vec![0.0; vt]);
                    for (di, si) in d.iter_mut().zip(s) {
                        *di = (1.0 - rate) * *di + rate * si;
                    }
                }
                for (k, d) in dst.iter_mut() {
                    if !src.contains_key(k) {
                        for di in d.iter_mut() {
                            *di *= 1.0 - rate;
                        }
                    }
                }
            }
            (Table::Linear(dst), Table::Linear(src)) => {
                for (di, si) in dst.iter_mut().zip(src) {
                    *di = (1.0 - rate) * *di + rate * si;
                }
            }
            _ => return config("ema update between tabular and linear stores"),
        }
        Ok(())
    }

    /// `params += scale * grad`. Tabular entries whose gradient is all zero are
    /// not materialized, so a zero gradient leaves the store bit-identical.
    pub fn apply(&mut self, grad: &GradientRecord, scale: f64) {
        match (&mut self.table, &grad.table) {
            (Table::Tabular(dst), Table::Tabular(g)) => {
                let vt = self.vocab.total();
                for (k, gk) in g {
                    if gk.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let d = dst.entry(k.clone()).or_insert_with(|| vec![0.0; vt]);
                    for (di, gi) in d.iter_mut().zip(gk) {
                        *di += scale * gi;
                    }
                }
            }
            (Table::Linear(dst), Table::Linear(g)) => {
                for (di, gi) in dst.iter_mut().zip(g) {
                    *di += scale * gi;
                }
            }
            _ => panic!("gradient shape does not match parameters"),
        }
    }

    /// Overwrite the logits of one tabular context.
    pub fn set_logits(&mut self, ctx: &Context<'_>, logits: Vec<f64>) -> Result<()> {
        let key = ctx.serialize(&self.vocab);
        self.set_key_logits(key, logits)
    }

    pub(crate) fn set_key_logits(&mut self, key: Vec<Token>, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab.total() {
            return config(format!(
                "logit vector has length {} but the vocabulary has {} tokens",
                logits.len(),
                self.vocab.total()
            ));
        }
        match &mut self.table {
            Table::Tabular(t) => {
                t.insert(key, logits);
                Ok(())
            }
            Table::Linear(_) => config("set_logits requires a tabular policy"),
        }
    }

    /// Fill linear weights with i.i.d. normal draws of standard deviation `scale`.
    pub fn randomize_linear<R: Rng>(&mut self, rng: &mut R, scale: f64) -> Result<()> {
        match &mut self.table {
            Table::Linear(w) => {
                for x in w.iter_mut() {
                    *x = scale * standard_normal(rng);
                }
                Ok(())
            }
            Table::Tabular(_) => config("randomize_linear requires a linear policy"),
        }
    }

    pub fn coordinates(&self) -> Vec<ParamId> {
        match &self.table {
            Table::Tabular(t) => t
                .iter()
                .flat_map(|(k, v)| {
                    (0..v.len()).map(move |i| ParamId::Tabular {
                        key: k.clone(),
                        token: i,
                    })
                })
                .collect(),
            Table::Linear(w) => (0..w.len()).map(ParamId::Linear).collect(),
        }
    }

    pub fn get(&self, id: &ParamId) -> f64 {
        read(&self.table, id)
    }

    pub fn set(&mut self, id: &ParamId, value: f64) {
        let vt = self.vocab.total();
        match (&mut self.table, id) {
            (Table::Tabular(t), ParamId::Tabular { key, token }) => {
                t.entry(key.clone()).or_insert_with(|| vec![0.0; vt])[*token] = value;
            }
            (Table::Linear(w), ParamId::Linear(i)) => w[*i] = value,
            _ => panic!("parameter id does not match the store kind"),
        }
    }

    pub fn linear_weights(&self) -> Option<&[f64]> {
        match &self.table {
            Table::Linear(w) => Some(w),
            Table::Tabular(_) => None,
        }
    }

    pub fn tabular_entries(&self) -> Option<&BTreeMap<Vec<Token>, Vec<f64>>> {
        match &self.table {
            Table::Tabular(t) => Some(t),
            Table::Linear(_) => None,
        }
    }

    pub(crate) fn from_parts(
        vocab: Vocabulary,
        emission: Emission,
        features: Option<FeatureSpec>,
        table: Table,
    ) -> Self {
        Self {
            vocab,
            emission,
            features,
            table,
        }
    }
}

fn read(table: &Table, id: &ParamId) -> f64 {
    match (table, id) {
        (Table::Tabular(t), ParamId::Tabular { key, token }) => {
            t.get(key).map_or(0.0, |v| v[*token])
        }
        (Table::Linear(w), ParamId::Linear(i)) => w[*i],
        _ => panic!("parameter id does not match the store kind"),
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps streams easy to reason about.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl GradientRecord {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        let table = match &params.table {
            Table::Tabular(_) => Table::Tabular(BTreeMap::new()),
            Table::Linear(w) => Table::Linear(vec![0.0; w.len()]),
        };
        Self { table }
    }

    pub fn get(&self, id: &ParamId) -> f64 {
        read(&self.table, id)
    }

    pub fn scale(&mut self, s: f64) {
        match &mut self.table {
            Table::Tabular(t) => t.values_mut().flatten().for_each(|x| *x *= s),
            Table::Linear(w) => w.iter_mut().for_each(|x| *x *= s),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &GradientRecord, s: f64) {
        match (&mut self.table, &other.table) {
            (Table::Tabular(a), Table::Tabular(b)) => {
                for (k, v) in b {
                    let e = a.entry(k.clone()).or_insert_with(|| vec![0.0; v.len()]);
                    for (x, y) in e.iter_mut().zip(v) {
                        *x += s * y;
                    }
                }
            }
            (Table::Linear(a), Table::Linear(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += s * y;
                }
            }
            _ => panic!("adding gradients of different kinds"),
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.table {
            Table::Tabular(t) => t.values().flatten().all(|&x| x == 0.0),
            Table::Linear(w) => w.iter().all(|&x| x == 0.0),
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = match &self.table {
            Table::Tabular(t) => t.values().flatten().map(|x| x * x).sum(),
            Table::Linear(w) => w.iter().map(|x| x * x).sum(),
        };
        sq.sqrt()
    }

    /// Per-key gradient vectors for the tabular kind.
    pub fn tabular_entries(&self) -> Option<&BTreeMap<Vec<Token>, Vec<f64>>> {
        match &self.table {
            Table::Tabular(t) => Some(t),
            Table::Linear(_) => None,
        }
    }

    pub fn linear_entries(&self) -> Option<&[f64]> {
        match &self.table {
            Table::Linear(w) => Some(w),
            Table::Tabular(_) => None,
        }
    }
}
