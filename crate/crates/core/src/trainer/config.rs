//! Experiment configuration.
//!
//! Configs are TOML documents. `method`, `beta` and `env` are required;
//! every other key has a default that is materialized by [`TrainConfig::resolve`]
//! and echoed into each report.

use serde::{Deserialize, Serialize};

use crate::baselines::HybridConfig;
use crate::env::{EnvSpec, FeedbackMode};
use crate::error::{config, Error, Result};
use crate::estep::{DeltaRule, PriorMode};
use crate::mstep::{Divergence, Reduction, TeacherSource};
use crate::policy::{Emission, PolicyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Grpo,
    Sdpo,
    Vpd,
    HybridJoint,
    HybridReshape,
    HybridReweight,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Grpo,
        Method::Sdpo,
        Method::Vpd,
        Method::HybridJoint,
        Method::HybridReshape,
        Method::HybridReweight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Sdpo => "sdpo",
            Method::Vpd => "vpd",
            Method::HybridJoint => "hybrid-joint",
            Method::HybridReshape => "hybrid-reshape",
            Method::HybridReweight => "hybrid-reweight",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Whether the update reads feedback-conditioned teacher distributions.
    pub fn uses_teacher(self) -> bool {
        self != Method::Grpo
    }

    pub fn uses_group_advantage(self) -> bool {
        matches!(
            self,
            Method::Grpo | Method::HybridJoint | Method::HybridReshape | Method::HybridReweight
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EStepMode {
    #[default]
    Gradient,
    Analytic,
}

/// What `estep_frequency` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EStepSchedule {
    #[default]
    RolloutBatches,
    Updates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decode {
    #[default]
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Uniform,
    /// Gaussian logits (tabular) or weights (linear) of std `init_scale`.
    Random,
    /// Tabular only: every student context along the wrong path
    /// `(target + 1) mod V` gets a logit bias of `adversarial_bias`, so that
    /// every rollout group fails.
    Adversarial,
}

fn d_policy() -> PolicyKind {
    PolicyKind::Tabular
}
fn d_rollouts() -> usize {
    8
}
fn d_prompts() -> usize {
    8
}
fn d_freq() -> usize {
    5
}
fn d_estep_lr() -> f64 {
    2.0
}
fn d_mstep_lr() -> f64 {
    2.0
}
fn d_one() -> usize {
    1
}
fn d_total() -> usize {
    200
}
fn d_feedback() -> FeedbackMode {
    FeedbackMode::EnvDiagnostic
}
fn d_ema_rate() -> f64 {
    0.1
}
fn d_teacher_rate() -> f64 {
    0.05
}
fn d_init_scale() -> f64 {
    0.1
}
fn d_adv_bias() -> f64 {
    20.0
}
fn d_eval_every() -> usize {
    10
}
fn d_eval_prompts() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub beta: f64,
    #[serde(default = "d_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub emission: Emission,
    #[serde(default)]
    pub init: InitKind,
    #[serde(default = "d_init_scale")]
    pub init_scale: f64,
    #[serde(default = "d_adv_bias")]
    pub adversarial_bias: f64,
    #[serde(default = "d_rollouts")]
    pub rollouts_per_prompt: usize,
    #[serde(default = "d_prompts")]
    pub prompts_per_batch: usize,
    #[serde(default = "d_freq")]
    pub estep_frequency: usize,
    #[serde(default)]
    pub estep_schedule: EStepSchedule,
    #[serde(default)]
    pub estep_mode: EStepMode,
    #[serde(default = "d_estep_lr")]
    pub estep_lr: f64,
    #[serde(default = "d_one")]
    pub estep_steps: usize,
    #[serde(default = "d_mstep_lr")]
    pub mstep_lr: f64,
    #[serde(default = "d_one")]
    pub mstep_steps: usize,
    /// Zero for plain gradient descent.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "d_total")]
    pub total_batches: usize,
    #[serde(default = "d_feedback")]
    pub feedback_mode: FeedbackMode,
    #[serde(default)]
    pub prior_mode: PriorMode,
    /// Resolved from `feedback_mode` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub delta_rule: DeltaRule,
    #[serde(default = "d_ema_rate")]
    pub ema_rate: f64,
    /// Resolved from `method` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_source: Option<TeacherSource>,
    #[serde(default = "d_teacher_rate")]
    pub teacher_update_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub oracle_checks: bool,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_eval_prompts")]
    pub eval_prompts: usize,
    #[serde(default)]
    pub eval_decode: Decode,
    #[serde(default = "d_one")]
    pub eval_trials: usize,
    /// Zero disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub hybrid: HybridConfig,
    pub env: EnvSpec,
}

fn positive(key: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return config(format!("`{key}` must be positive, got {x}"));
    }
    Ok(())
}

fn at_least(key: &str, x: usize, min: usize) -> Result<()> {
    if x < min {
        return config(format!("`{key}` must be at least {min}, got {x}"));
    }
    Ok(())
}

impl TrainConfig {
    /// Parse a TOML document and apply `key=value` overrides with dotted
    /// keys. Override values are read as TOML literals, falling back to bare
    /// strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_dotted(&mut doc, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: TrainConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fill derived defaults and validate.
    pub fn resolve(mut self) -> Result<Self> {
        if self.divergence.is_none() {
            self.divergence = Some(match self.feedback_mode {
                FeedbackMode::EnvDiagnostic => Divergence::ReverseKl,
                _ => Divergence::Js,
            });
        }
        if self.teacher_source.is_none() {
            self.teacher_source = Some(match self.method {
                Method::Vpd => TeacherSource::SharedCurrent,
                _ => TeacherSource::EmaSnapshot,
            });
        }
        if self.hybrid.total_steps_for_decay == 0 {
            self.hybrid.total_steps_for_decay = self.total_batches;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        positive("beta", self.beta)?;
        self.env.validate()?;
        at_least("rollouts_per_prompt", self.rollouts_per_prompt, 2)?;
        at_least("prompts_per_batch", self.prompts_per_batch, 1)?;
        at_least("estep_frequency", self.estep_frequency, 1)?;
        at_least("mstep_steps", self.mstep_steps, 1)?;
        at_least("total_batches", self.total_batches, 1)?;
        at_least("eval_every", self.eval_every, 1)?;
        at_least("eval_prompts", self.eval_prompts, 1)?;
        at_least("eval_trials", self.eval_trials, 1)?;
        positive("estep_lr", self.estep_lr)?;
        positive("mstep_lr", self.mstep_lr)?;
        positive("init_scale", self.init_scale)?;
        positive("adversarial_bias", self.adversarial_bias)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return config(format!("`momentum` must lie in [0, 1), got {}", self.momentum));
        }
        if self.delta_rule == DeltaRule::Ema && !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return config(format!("`ema_rate` must lie in (0, 1], got {}", self.ema_rate));
        }
        if !(0.0..=1.0).contains(&self.teacher_update_rate) {
            return config(format!(
                "`teacher_update_rate` must lie in [0, 1], got {}",
                self.teacher_update_rate
            ));
        }
        self.hybrid.validate()?;
        if self.method.uses_teacher() && self.feedback_mode == FeedbackMode::None {
            return config(format!(
                "`feedback_mode` = none leaves method {} without a teacher",
                self.method.as_str()
            ));
        }
        if self.estep_mode == EStepMode::Analytic && self.policy != PolicyKind::Tabular {
            return config("`estep_mode` = analytic requires `policy` = tabular");
        }
        if self.init == InitKind::Adversarial && self.policy != PolicyKind::Tabular {
            return config("`init` = adversarial requires `policy` = tabular");
        }
        Ok(())
    }

    pub fn divergence(&self) -> Divergence {
        self.divergence.unwrap_or(Divergence::ReverseKl)
    }

    pub fn teacher_source(&self) -> TeacherSource {
        self.teacher_source.unwrap_or_default()
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let Some(last) = last else {
        return config(format!("empty override key `{key}`"));
    };
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a table in override `{key}`")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
