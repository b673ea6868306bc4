//! Conditional velocity field, flow-matching pretraining and the
//! differentiation contract used by the policy objectives.

pub mod checkpoint;
mod mlp;
mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mlp::{
    time_features, velocity, velocity_vjp, velocity_with_cache, Activation, ForwardCache,
    GradientBuffer, LayerShape, PolicyParams, VelocityFieldConfig,
};
pub use tape::{sum, value_and_grad, Real, Tape, Var};

use crate::condspace::{sample_condition_prior, sample_data, standard_normal, ConditionEmbedding, ToyDataSpec};
use crate::error::{Error, Result};
use crate::grpo::optim::{optimizer_step, AdamWConfig, AdamWState};
use crate::rng::{stream, Purpose};

/// One conditional flow-matching regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct FmSample {
    pub embedding: ConditionEmbedding,
    pub t: f64,
    /// `x_t = (1 - t) x0 + t x1`
    pub x_t: Vec<f64>,
    /// `x1 - x0`
    pub target: Vec<f64>,
}

/// Draws `batch` interpolants with conditions from the prompt prior.
pub fn draw_fm_batch<R: Rng + ?Sized>(spec: &ToyDataSpec, batch: usize, rng: &mut R) -> Vec<FmSample> {
    (0..batch)
        .map(|_| {
            let c = sample_condition_prior(spec, rng);
            let x0 = sample_data(&c, spec, rng);
            let x1: Vec<f64> = (0..spec.dim()).map(|_| standard_normal(rng)).collect();
            let t: f64 = rng.random();
            let x_t = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let target = x0.iter().zip(&x1).map(|(a, b)| b - a).collect();
            FmSample {
                embedding: c.embed(),
                t,
                x_t,
                target,
            }
        })
        .collect()
}

/// Mean squared velocity error over all batch entries and dimensions, and
/// its gradient.
pub fn fm_loss_and_grad(params: &PolicyParams, batch: &[FmSample]) -> Result<(f64, GradientBuffer)> {
    if batch.is_empty() {
        return Err(Error::invalid("flow-matching batch is empty"));
    }
    let d = params.config().data_dim;
    let denom = (batch.len() * d) as f64;
    let mut grad = GradientBuffer::zeros(params.len());
    let mut loss = 0.0;
    for s in batch {
        let (v, cache) = velocity_with_cache(params, &s.x_t, s.t, &s.embedding)?;
        let resid: Vec<f64> = v.iter().zip(&s.target).map(|(a, b)| a - b).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        let dy: Vec<f64> = resid.iter().map(|r| 2.0 * r / denom).collect();
        velocity_vjp(params, &cache, &dy, &mut grad.0);
    }
    Ok((loss / denom, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            optimizer: AdamWConfig {
                learning_rate: 2e-3,
                weight_decay: 0.0,
                max_grad_norm: Some(10.0),
                ..AdamWConfig::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("pretrain.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be at least 1"));
        }
        self.optimizer.validate("pretrain.optimizer")
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: PolicyParams,
    pub losses: Vec<f64>,
}

/// Flow-matching pretraining of the base policy; deterministic in `seed`.
pub fn pretrain(
    cfg: &PretrainConfig,
    spec: &ToyDataSpec,
    model: &VelocityFieldConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut params = PolicyParams::init(model.clone(), &mut stream(seed, Purpose::Init, &[]))?;
    let mut state = AdamWState::new(params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = stream(seed, Purpose::Pretrain, &[step as u64]);
        let batch = draw_fm_batch(spec, cfg.batch_size, &mut rng);
        let (loss, grad) = fm_loss_and_grad(&params, &batch).map_err(|e| e.with_context(format!("pretrain step {step}")))?;
        optimizer_step(&mut state, &mut params, &grad, &cfg.optimizer)?;
        losses.push(loss);
    }
    Ok(PretrainOutcome { params, losses })
}
