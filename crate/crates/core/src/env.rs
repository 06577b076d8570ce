//! Synthetic verifiable environments.
//!
//! Each prompt has exactly one correct response. Verification returns a
//! binary reward plus the location of the first mistake, from which the
//! three diagnostic-feedback sources are derived as token records.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::policy::{Special, Token, Trajectory, Vocabulary};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Response is the reversed prompt, each position passed through a
    /// permutation derived from `transform_key`.
    KeyedCopy,
    /// Single-token response: sum of the prompt tokens modulo the vocabulary size.
    ModSum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub family: Family,
    pub vocab_size: u32,
    pub prompt_len: usize,
    pub response_len: usize,
    #[serde(default)]
    pub transform_key: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeLabel {
    pub reward: u8,
    pub first_error_pos: Option<usize>,
    pub expected_token: Option<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    EnvDiagnostic,
    ContrastiveSibling,
    SelfCritique,
    None,
}

impl FeedbackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::EnvDiagnostic => "env-diagnostic",
            FeedbackMode::ContrastiveSibling => "contrastive-sibling",
            FeedbackMode::SelfCritique => "self-critique",
            FeedbackMode::None => "none",
        }
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "env-diagnostic" => Ok(FeedbackMode::EnvDiagnostic),
            "contrastive-sibling" => Ok(FeedbackMode::ContrastiveSibling),
            "self-critique" => Ok(FeedbackMode::SelfCritique),
            "none" => Ok(FeedbackMode::None),
            other => config(format!("unknown feedback mode `{other}`")),
        }
    }
}

/// Token-encoded diagnostic attached to a trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackRecord {
    pub mode: FeedbackMode,
    pub tokens: Vec<Token>,
    /// Rollout index of the sibling whose response was quoted.
    pub source_trajectory: Option<usize>,
}

impl FeedbackRecord {
    pub fn none() -> Self {
        Self {
            mode: FeedbackMode::None,
            tokens: Vec::new(),
            source_trajectory: None,
        }
    }

    pub fn is_none(&self) -> bool {
        self.mode == FeedbackMode::None
    }
}

impl EnvSpec {
    pub fn new(family: Family, vocab_size: u32, prompt_len: usize, response_len: usize, transform_key: u64) -> Result<Self> {
        let env = Self {
            family,
            vocab_size,
            prompt_len,
            response_len,
            transform_key,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn keyed_copy(vocab_size: u32, len: usize, transform_key: u64) -> Result<Self> {
        Self::new(Family::KeyedCopy, vocab_size, len, len, transform_key)
    }

    pub fn mod_sum(vocab_size: u32, prompt_len: usize) -> Result<Self> {
        Self::new(Family::ModSum, vocab_size, prompt_len, 1, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return config(format!("env.vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.prompt_len == 0 {
            return config("env.prompt_len must be at least 1");
        }
        if self.response_len == 0 {
            return config("env.response_len must be at least 1");
        }
        match self.family {
            Family::KeyedCopy if self.response_len != self.prompt_len => config(format!(
                "env.response_len must equal env.prompt_len for keyed-copy ({} != {})",
                self.response_len, self.prompt_len
            )),
            Family::ModSum if self.response_len != 1 => {
                config(format!("env.response_len must be 1 for mod-sum, got {}", self.response_len))
            }
            _ => Ok(()),
        }
    }

    /// Ordinary alphabet plus reserved roles and one position token per response slot.
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size, self.response_len as u32).expect("validated env")
    }

    /// Uniform prompt over the ordinary tokens.
    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Token> {
        (0..self.prompt_len).map(|_| rng.gen_range(0..self.vocab_size)).collect()
    }

    /// Number of distinct prompts, `V^prompt_len` (saturating).
    pub fn prompt_space(&self) -> u128 {
        (self.vocab_size as u128).saturating_pow(self.prompt_len as u32)
    }

    /// Every prompt in lexicographic order.
    pub fn all_prompts(&self) -> Vec<Vec<Token>> {
        let v = self.vocab_size;
        let n = self.prompt_space() as usize;
        (0..n)
            .map(|mut i| {
                let mut x = vec![0; self.prompt_len];
                for slot in x.iter_mut().rev() {
                    *slot = (i % v as usize) as Token;
                    i /= v as usize;
                }
                x
            })
            .collect()
    }

    fn permutation(&self, pos: usize) -> Vec<Token> {
        let mut perm: Vec<Token> = (0..self.vocab_size).collect();
        if self.transform_key != 0 {
            let mut rng = stream(self.transform_key, Domain::Init, &[pos as u64]);
            perm.shuffle(&mut rng);
        }
        perm
    }

    /// The unique correct response for `x`.
    pub fn target(&self, x: &[Token]) -> Vec<Token> {
        match self.family {
            Family::KeyedCopy => x
                .iter()
                .rev()
                .enumerate()
                .map(|(pos, &tok)| self.permutation(pos)[tok as usize])
                .collect(),
            Family::ModSum => {
                let s: u64 = x.iter().map(|&t| t as u64).sum();
                vec![(s % self.vocab_size as u64) as Token]
            }
        }
    }

    pub fn verify(&self, x: &[Token], y: &[Token]) -> Result<OutcomeLabel> {
        if x.len() != self.prompt_len {
            return Err(Error::Precondition(format!(
                "prompt has length {}, expected {}",
                x.len(),
                self.prompt_len
            )));
        }
        if y.len() != self.response_len {
            return Err(Error::Precondition(format!(
                "response has length {}, expected {}",
                y.len(),
                self.response_len
            )));
        }
        let target = self.target(x);
        match target.iter().zip(y).position(|(a, b)| a != b) {
            None => Ok(OutcomeLabel {
                reward: 1,
                first_error_pos: None,
                expected_token: None,
            }),
            Some(pos) => Ok(OutcomeLabel {
                reward: 0,
                first_error_pos: Some(pos),
                expected_token: Some(target[pos]),
            }),
        }
    }

    /// `r(x, y)` as a real; wrong-length responses score 0.
    pub fn reward(&self, x: &[Token], y: &[Token]) -> f64 {
        self.verify(x, y).map_or(0.0, |l| f64::from(l.reward))
    }

    /// Build the diagnostic record `C` for `traj` within its rollout group.
    pub fn make_feedback(
        &self,
        mode: FeedbackMode,
        x: &[Token],
        traj: &Trajectory,
        group: &[Trajectory],
    ) -> Result<FeedbackRecord> {
        if traj.prompt != x || group.iter().any(|g| g.prompt != x) {
            return Err(Error::Precondition("group members must share the prompt".into()));
        }
        if !group
            .iter()
            .any(|g| g.rollout_index == traj.rollout_index && g.response == traj.response)
        {
            return Err(Error::Precondition("trajectory is not a member of its group".into()));
        }
        let vocab = self.vocab();
        match mode {
            FeedbackMode::None => Ok(FeedbackRecord::none()),
            FeedbackMode::EnvDiagnostic => {
                let label = self.verify(x, &traj.response)?;
                let mut tokens = vec![vocab.special(Special::Err)];
                if let (Some(pos), Some(expected)) = (label.first_error_pos, label.expected_token) {
                    tokens.push(vocab.position(pos).expect("one position token per slot"));
                    tokens.push(expected);
                    if self.family == Family::ModSum {
                        let v = self.vocab_size;
                        let diff = (traj.response[pos] + v - expected) % v;
                        let dir = if diff <= v / 2 { Special::High } else { Special::Low };
                        tokens.push(vocab.special(dir));
                    }
                }
                Ok(FeedbackRecord {
                    mode,
                    tokens,
                    source_trajectory: None,
                })
            }
            FeedbackMode::ContrastiveSibling => {
                let sibling = group
                    .iter()
                    .filter(|g| g.reward == 1 && g.rollout_index != traj.rollout_index)
                    .min_by_key(|g| g.rollout_index);
                Ok(match sibling {
                    None => FeedbackRecord::none(),
                    Some(s) => {
                        let mut tokens = vec![vocab.special(Special::Sib)];
                        tokens.extend_from_slice(&s.response);
                        FeedbackRecord {
                            mode,
                            tokens,
                            source_trajectory: Some(s.rollout_index),
                        }
                    }
                })
            }
            FeedbackMode::SelfCritique => {
                if traj.response.len() != self.response_len {
                    return Err(Error::Precondition("response has the wrong length".into()));
                }
                let mask = vocab.special(Special::Mask);
                let mut tokens = vec![vocab.special(Special::Crit)];
                tokens.extend(
                    self.target(x)
                        .iter()
                        .zip(&traj.response)
                        .map(|(&t, &y)| if t == y { mask } else { t }),
                );
                Ok(FeedbackRecord {
                    mode,
                    tokens,
                    source_trajectory: None,
                })
            }
        }
    }
}
