//! The training loop: per iteration, snapshot the policy, roll out a group
//! per prompt, augment, score every view, and take one optimizer step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{multiview_advantages, mv_objective};
use crate::condspace::{reward, sample_condition_prior, RewardConfig, ToyDataSpec};
use crate::enhancer::{Enhancer, EnhancerConfig, EnhancerKind};
use crate::error::{Error, Result};
use crate::flowmodel::checkpoint;
use crate::flowmodel::{GradientBuffer, PolicyParams};
use crate::grpo::{
    advantages, optimizer_step, single_view_objective, AdamWConfig, AdamWState, ClipConfig, KlConfig, ObjectiveContext,
    OldPolicySnapshot, RatioStats,
};
use crate::rng::{stream, Purpose};
use crate::sampler::{rollout_group, NoiseSchedule, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub sampling_steps: usize,
    pub shift: f64,
    /// Stochastic step indices, counted from the noise end.
    pub sde_steps: Vec<usize>,
    pub eta: f64,
    /// All samples of a group start from one noise draw.
    pub init_same_noise: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 16,
            shift: 3.0,
            sde_steps: vec![0, 2, 4, 6],
            eta: 0.7,
            init_same_noise: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampling_steps == 0 {
            return Err(Error::config("sampling.sampling_steps", "must be at least 1"));
        }
        if !(self.shift >= 1.0 && self.shift.is_finite()) {
            return Err(Error::config("sampling.shift", "must be finite and >= 1"));
        }
        if let Some(k) = self.sde_steps.iter().find(|&&k| k >= self.sampling_steps) {
            return Err(Error::config(
                "sampling.sde_steps",
                format!("index {k} is not below sampling_steps = {}", self.sampling_steps),
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("sampling.eta", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        self.validate()?;
        TimeGrid::new(self.sampling_steps, self.shift, &self.sde_steps)
    }

    pub fn schedule(&self, grid: &TimeGrid) -> Result<NoiseSchedule> {
        NoiseSchedule::for_grid(self.eta, grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub condition_number_k: usize,
    pub prompts_per_iteration: usize,
    pub iterations: usize,
    pub clip_range: f64,
    pub adv_clip_max: f64,
    pub std_guard: f64,
    pub kl_beta: f64,
    /// Scale the augmented-view terms by `1/K`.
    pub normalize_views: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            condition_number_k: 8,
            prompts_per_iteration: 4,
            iterations: 200,
            clip_range: 1e-4,
            adv_clip_max: 5.0,
            std_guard: 1e-8,
            kl_beta: 0.0,
            normalize_views: false,
        }
    }
}

impl GrpoConfig {
    pub fn clip(&self) -> ClipConfig {
        ClipConfig {
            clip_range: self.clip_range,
            adv_clip_max: self.adv_clip_max,
            std_guard: self.std_guard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("grpo.group_size", "must be at least 2"));
        }
        if self.prompts_per_iteration == 0 {
            return Err(Error::config("grpo.prompts_per_iteration", "must be at least 1"));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::config("grpo.kl_beta", "must be finite and >= 0"));
        }
        self.clip().validate()
    }
}

/// Everything the trainer needs besides the starting parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: ToyDataSpec,
    pub reward: RewardConfig,
    pub sampling: SamplingConfig,
    pub grpo: GrpoConfig,
    pub optimizer: AdamWConfig,
    pub enhancer: EnhancerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.reward.validate(self.data.layout)?;
        self.sampling.validate()?;
        self.grpo.validate()?;
        self.optimizer.validate("optimizer")?;
        self.enhancer.validate()?;
        if self.enhancer.kind == EnhancerKind::Posterior && self.grpo.condition_number_k > self.grpo.group_size {
            return Err(Error::config(
                "grpo.condition_number_k",
                "must not exceed group_size with the posterior enhancer",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Single-view GRPO on the anchor condition only.
    Baseline,
    /// Anchor plus `condition_number_k` augmented views.
    MultiView,
}

/// One metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Mean over prompts of the group's mean anchor reward.
    pub anchor_mean_reward: f64,
    /// Same, per view; index 0 is the anchor.
    pub view_mean_rewards: Vec<f64>,
    pub loss: f64,
    pub ratio_min: f64,
    pub ratio_mean: f64,
    pub ratio_max: f64,
    pub clip_fraction: f64,
    /// Velocity evaluations of the rollouts.
    pub nfe: usize,
    /// Velocity evaluations of the objective (current and old policy).
    pub training_evals: usize,
    pub grad_norm: f64,
    pub saturated_prompts: usize,
    /// Digest of the parameters after the update.
    pub param_digest: String,
    pub wall_time_s: Option<f64>,
}

/// Resumable trainer state besides the parameters themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: usize,
    pub optimizer_step: u64,
    /// Moment vectors as raw `f64` bit patterns, so a round trip is exact.
    pub m_bits: Vec<u64>,
    pub v_bits: Vec<u64>,
    pub enhancer_memory: Vec<Vec<i64>>,
}

impl TrainerState {
    fn optimizer(&self) -> AdamWState {
        AdamWState {
            step: self.optimizer_step,
            m: self.m_bits.iter().map(|b| f64::from_bits(*b)).collect(),
            v: self.v_bits.iter().map(|b| f64::from_bits(*b)).collect(),
        }
    }
}

#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    mode: TrainMode,
    grid: TimeGrid,
    schedule: NoiseSchedule,
    enhancer: Enhancer,
    params: PolicyParams,
    reference: Option<PolicyParams>,
    opt: AdamWState,
    iteration: usize,
    record_wall_time: bool,
}

#[derive(Default)]
struct RatioMerge {
    min: f64,
    max: f64,
    weighted_mean: f64,
    clipped: f64,
    count: usize,
}

impl RatioMerge {
    fn push(&mut self, r: &RatioStats) {
        if r.count == 0 {
            return;
        }
        if self.count == 0 {
            self.min = r.min;
            self.max = r.max;
        } else {
            self.min = self.min.min(r.min);
            self.max = self.max.max(r.max);
        }
        self.weighted_mean += r.mean * r.count as f64;
        self.clipped += r.clip_fraction * r.count as f64;
        self.count += r.count;
    }
}

impl Trainer {
    /// Starts from `base`, which also serves as the KL reference.
    pub fn new(cfg: TrainConfig, mode: TrainMode, base: PolicyParams) -> Result<Self> {
        let opt = AdamWState::new(base.len());
        Self::build(cfg, mode, base.clone(), base, opt, 0)
    }

    /// Continues a run from saved parameters and state.
    pub fn resume(cfg: TrainConfig, mode: TrainMode, base: PolicyParams, params: PolicyParams, state: &TrainerState) -> Result<Self> {
        let opt = state.optimizer();
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries for {} parameters",
                opt.m.len(),
                params.len()
            )));
        }
        let mut t = Self::build(cfg, mode, base, params, opt, state.iteration)?;
        t.enhancer.restore_memory(&state.enhancer_memory);
        Ok(t)
    }

    fn build(
        cfg: TrainConfig,
        mode: TrainMode,
        base: PolicyParams,
        params: PolicyParams,
        opt: AdamWState,
        iteration: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if params.config().data_dim != cfg.data.dim() || params.config().cond_dim != cfg.data.layout.embedding_len() {
            return Err(Error::invalid(format!(
                "model expects data_dim {} / cond_dim {}, toy spec has {} / {}",
                params.config().data_dim,
                params.config().cond_dim,
                cfg.data.dim(),
                cfg.data.layout.embedding_len()
            )));
        }
        let grid = cfg.sampling.grid()?;
        if grid.sde_steps().is_empty() {
            return Err(Error::config("sampling.sde_steps", "training needs at least one SDE step"));
        }
        let schedule = cfg.sampling.schedule(&grid)?;
        let enhancer = Enhancer::from_config(&cfg.enhancer, &cfg.data)?;
        let reference = (cfg.grpo.kl_beta > 0.0).then_some(base);
        Ok(Self {
            cfg,
            mode,
            grid,
            schedule,
            enhancer,
            params,
            reference,
            opt,
            iteration,
            record_wall_time: false,
        })
    }

    /// Includes wall-clock time in reports (which then differ run to run).
    pub fn record_wall_time(&mut self, on: bool) {
        self.record_wall_time = on;
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            iteration: self.iteration,
            optimizer_step: self.opt.step,
            m_bits: self.opt.m.iter().map(|v| v.to_bits()).collect(),
            v_bits: self.opt.v.iter().map(|v| v.to_bits()).collect(),
            enhancer_memory: self.enhancer.memory_keys(),
        }
    }

    fn views_per_prompt(&self) -> usize {
        match self.mode {
            TrainMode::Baseline => 0,
            TrainMode::MultiView => self.cfg.grpo.condition_number_k,
        }
    }

    /// Runs one iteration and advances the iteration counter.
    pub fn step(&mut self) -> Result<IterationReport> {
        let iteration = self.iteration;
        let report = self.step_inner().map_err(|e| Error::Iteration {
            iteration,
            source: Box::new(e),
        })?;
        self.iteration += 1;
        Ok(report)
    }

    fn step_inner(&mut self) -> Result<IterationReport> {
        let started = Instant::now();
        let it = self.iteration as u64;
        let seed = self.cfg.seed;
        let g = self.cfg.grpo.group_size;
        let n_prompts = self.cfg.grpo.prompts_per_iteration;
        let k_views = self.views_per_prompt();
        let clip = self.cfg.grpo.clip();
        let snapshot = OldPolicySnapshot::take(&self.params);
        let ctx = ObjectiveContext {
            snapshot: &snapshot,
            schedule: &self.schedule,
            clip: &clip,
            kl: KlConfig {
                beta: self.cfg.grpo.kl_beta,
                reference: self.reference.as_ref(),
            },
        };

        let mut grad = GradientBuffer::zeros(self.params.len());
        let mut loss = 0.0;
        let mut nfe = 0;
        let mut training_evals = 0;
        let mut ratios = RatioMerge::default();
        let mut view_sums = vec![0.0; k_views + 1];
        let mut view_counts = vec![0usize; k_views + 1];
        let mut saturated = 0;
        let m = self.grid.sde_steps().len();
        let kl_evals = if self.cfg.grpo.kl_beta > 0.0 { g * m } else { 0 };

        for p in 0..n_prompts as u64 {
            let c = sample_condition_prior(&self.cfg.data, &mut stream(seed, Purpose::Prompts, &[it, p]));
            let rollout = rollout_group(
                &self.params,
                &c,
                &self.grid,
                &self.schedule,
                g,
                &mut stream(seed, Purpose::Rollout, &[it, p]),
                self.cfg.sampling.init_same_noise,
            )
            .map_err(|e| e.with_context(format!("prompt {p}")))?;
            nfe += rollout.nfe;

            let out = match self.mode {
                TrainMode::Baseline => {
                    let rewards = rollout
                        .samples
                        .iter()
                        .map(|x| reward(x, &c, &self.cfg.reward))
                        .collect::<Result<Vec<_>>>()?;
                    let adv = advantages(&rewards, &clip)?;
                    view_sums[0] += rewards.iter().sum::<f64>() / g as f64;
                    view_counts[0] += 1;
                    training_evals += 2 * g * m + kl_evals;
                    single_view_objective(&self.params, &ctx, &rollout.trajectories, &adv, &c.embed())?
                }
                TrainMode::MultiView => {
                    let views = self
                        .enhancer
                        .enhance(&c, &rollout.samples, k_views, &mut stream(seed, Purpose::Enhancer, &[it, p]))
                        .map_err(|e| e.with_context(format!("prompt {p} enhancer")))?;
                    saturated += usize::from(views.saturated);
                    let conds: Vec<_> = views.conditions().cloned().collect();
                    let geval = multiview_advantages(&rollout.samples, &c, &conds, &self.cfg.reward, &clip)?;
                    for (v, mean) in geval.means.iter().enumerate() {
                        view_sums[v] += mean;
                        view_counts[v] += 1;
                    }
                    training_evals += 2 * g * m * (conds.len() + 1) + kl_evals;
                    mv_objective(
                        &self.params,
                        &ctx,
                        &rollout.trajectories,
                        &geval,
                        &c,
                        &conds,
                        self.cfg.grpo.normalize_views,
                    )
                    .map_err(|e| e.with_context(format!("prompt {p}")))?
                }
            };
            grad.add_assign(&out.grad);
            loss += out.loss;
            ratios.push(&out.ratios);
        }

        let scale = 1.0 / n_prompts as f64;
        for v in grad.0.iter_mut() {
            *v *= scale;
        }
        let stats = optimizer_step(&mut self.opt, &mut self.params, &grad, &self.cfg.optimizer)?;
        let view_mean_rewards: Vec<f64> = view_sums
            .iter()
            .zip(&view_counts)
            .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect();
        let n = ratios.count.max(1) as f64;
        Ok(IterationReport {
            iteration: self.iteration,
            anchor_mean_reward: view_mean_rewards[0],
            view_mean_rewards,
            loss: loss * scale,
            ratio_min: ratios.min,
            ratio_mean: ratios.weighted_mean / n,
            ratio_max: ratios.max,
            clip_fraction: ratios.clipped / n,
            nfe,
            training_evals,
            grad_norm: stats.grad_norm,
            saturated_prompts: saturated,
            param_digest: checkpoint::digest(&checkpoint::encode(&self.params)),
            wall_time_s: self.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        })
    }
}
