//! Held-out evaluation with deterministic ODE samples.

use serde::{Deserialize, Serialize};

use crate::condspace::{reward, sample_condition_prior, standard_normal, RewardConfig, ToyDataSpec};
use crate::error::{Error, Result};
use crate::flowmodel::PolicyParams;
use crate::rng::{stream, Purpose};
use crate::sampler::{ode_sample, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_conditions: usize,
    pub n_samples: usize,
    /// Kept apart from the training seed so evaluation prompts are held out.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_conditions: 128,
            n_samples: 16,
            seed: 7_777,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_conditions == 0 {
            return Err(Error::config("eval.n_conditions", "must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("eval.n_samples", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_conditions: usize,
    pub n_samples: usize,
    pub per_condition: Vec<f64>,
    pub mean_reward: f64,
    pub sample_count: usize,
}

/// Mean reward of fresh ODE samples on `n_conditions` prompt-prior
/// conditions. The grid's SDE set is ignored.
pub fn evaluate(
    params: &PolicyParams,
    spec: &ToyDataSpec,
    reward_cfg: &RewardConfig,
    grid: &TimeGrid,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let ode = grid.with_sde_steps(&[])?;
    let d = spec.dim();
    let mut per_condition = Vec::with_capacity(cfg.n_conditions);
    for i in 0..cfg.n_conditions as u64 {
        let c = sample_condition_prior(spec, &mut stream(cfg.seed, Purpose::Eval, &[0, i]));
        let e = c.embed();
        let mut rng = stream(cfg.seed, Purpose::Eval, &[1, i]);
        let mut total = 0.0;
        for _ in 0..cfg.n_samples {
            let x1: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let x0 = ode_sample(params, &x1, &e, &ode)?;
            total += reward(&x0, &c, reward_cfg)?;
        }
        per_condition.push(total / cfg.n_samples as f64);
    }
    let mean_reward = per_condition.iter().sum::<f64>() / per_condition.len() as f64;
    Ok(EvalReport {
        seed: cfg.seed,
        n_conditions: cfg.n_conditions,
        n_samples: cfg.n_samples,
        per_condition,
        mean_reward,
        sample_count: cfg.n_conditions * cfg.n_samples,
    })
}
