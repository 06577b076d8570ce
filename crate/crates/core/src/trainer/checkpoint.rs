//! Bit-exact checkpoints.
//!
//! A checkpoint directory holds `state.json` (counters, batch index, the
//! resolved config, `delta` as raw bits) and binary snapshots of the live
//! parameters, the reference, the teacher snapshot and the optimizer
//! velocity. Random streams are keyed by batch index, so no RNG state is
//! stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval_prompt_set, missing, Counters, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::estep::EStepState;
use crate::policy::{GradientRecord, PolicyParams};

const STATE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct State {
    version: u32,
    config: String,
    batch: usize,
    updates: usize,
    delta_bits: u64,
    counters: Counters,
    best_eval_bits: Option<u64>,
    last_eval_bits: Option<u64>,
    has_velocity: bool,
}

impl Trainer {
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("params.bin"), self.params.to_bytes())?;
        fs::write(dir.join("reference.bin"), self.reference.to_bytes())?;
        fs::write(dir.join("teacher.bin"), self.teacher_snapshot.to_bytes())?;
        if let Some(v) = &self.velocity {
            fs::write(dir.join("velocity.bin"), v.to_bytes(&self.params))?;
        }
        let state = State {
            version: STATE_VERSION,
            config: self.config.to_toml(),
            batch: self.batch,
            updates: self.updates,
            delta_bits: self.estep.delta.to_bits(),
            counters: self.counters.clone(),
            best_eval_bits: self.best_eval.map(f64::to_bits),
            last_eval_bits: self.last_eval.map(f64::to_bits),
            has_velocity: self.velocity.is_some(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let state: State = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        if state.version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", state.version)));
        }
        let config = TrainConfig::from_toml(&state.config)?;
        let read = |name: &str| -> Result<PolicyParams> {
            let path = dir.join(name);
            if !path.exists() {
                return Err(missing(name));
            }
            PolicyParams::from_bytes(&fs::read(path)?)
        };
        let params = read("params.bin")?;
        let reference = read("reference.bin")?;
        let teacher_snapshot = read("teacher.bin")?;
        let velocity = if state.has_velocity {
            let path = dir.join("velocity.bin");
            if !path.exists() {
                return Err(missing("velocity.bin"));
            }
            Some(GradientRecord::from_bytes(&fs::read(path)?)?)
        } else {
            None
        };
        let mut estep = EStepState::new(config.beta, config.delta_rule, config.ema_rate, config.prior_mode)?;
        estep.delta = f64::from_bits(state.delta_bits);
        let env = config.env.clone();
        let eval_prompts = eval_prompt_set(&env, config.seed, config.eval_prompts);
        Ok(Self {
            config,
            env,
            params,
            reference,
            teacher_snapshot,
            estep,
            velocity,
            batch: state.batch,
            updates: state.updates,
            counters: state.counters,
            eval_prompts,
            best_eval: state.best_eval_bits.map(f64::from_bits),
            last_eval: state.last_eval_bits.map(f64::from_bits),
        })
    }
}
