//! Single-view group-relative policy optimization.
//!
//! Rewards of a group are standardized against the group's own mean and
//! population standard deviation. The policy loss is the negated clipped
//! surrogate averaged over samples and stored SDE transitions, optionally
//! regularized toward a reference policy.

pub mod optim;

use serde::{Deserialize, Serialize};

use crate::condspace::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::flowmodel::{sum, value_and_grad, velocity, GradientBuffer, PolicyParams, Real, Tape, Var};
use crate::sampler::{
    gaussian_log_prob, mean_from_velocity, transition_coefficients, NoiseSchedule, Trajectory, TransitionRecord,
};

pub use optim::{optimizer_step, AdamWConfig, AdamWState, StepStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    /// Ratio clip half-width.
    pub clip_range: f64,
    /// Advantages are clamped to `[-adv_clip_max, adv_clip_max]`.
    pub adv_clip_max: f64,
    /// Groups whose reward std falls below this get all-zero advantages.
    pub std_guard: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            clip_range: 1e-4,
            adv_clip_max: 5.0,
            std_guard: 1e-8,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(Error::config("grpo.clip_range", "must lie in (0, 1)"));
        }
        if !(self.adv_clip_max > 0.0) {
            return Err(Error::config("grpo.adv_clip_max", "must be positive"));
        }
        if !(self.std_guard >= 0.0 && self.std_guard.is_finite()) {
            return Err(Error::config("grpo.std_guard", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// KL regularization strength and the reference policy it pulls toward.
#[derive(Debug, Clone, Copy)]
pub struct KlConfig<'a> {
    pub beta: f64,
    pub reference: Option<&'a PolicyParams>,
}

impl KlConfig<'_> {
    pub fn disabled() -> Self {
        KlConfig {
            beta: 0.0,
            reference: None,
        }
    }

    fn active(&self) -> Result<Option<&PolicyParams>> {
        if self.beta == 0.0 {
            return Ok(None);
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("KL beta {} must be finite and >= 0", self.beta)));
        }
        self.reference
            .map(Some)
            .ok_or_else(|| Error::invalid("KL beta > 0 requires reference parameters"))
    }
}

/// Frozen copy of the policy taken at the start of an iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OldPolicySnapshot(PolicyParams);

impl OldPolicySnapshot {
    pub fn take(params: &PolicyParams) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

/// Rewards and advantages of one group under the anchor (row 0) and each
/// augmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEvaluation {
    pub rewards: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GroupEvaluation {
    pub fn views(&self) -> usize {
        self.rewards.len()
    }

    pub fn group_size(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }
}

/// Population mean and standard deviation.
pub fn group_stats(rewards: &[f64]) -> (f64, f64) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardized advantages before clamping; all zeros when the reward std
/// is below the guard.
pub fn raw_advantages(rewards: &[f64], std_guard: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!("group of {} rewards; need at least 2", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("non-finite reward"));
    }
    let (mean, std) = group_stats(rewards);
    if std < std_guard || std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn advantages(rewards: &[f64], cfg: &ClipConfig) -> Result<Vec<f64>> {
    Ok(raw_advantages(rewards, cfg.std_guard)?
        .into_iter()
        .map(|a| a.clamp(-cfg.adv_clip_max, cfg.adv_clip_max))
        .collect())
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate<S: Real>(ratio: S, advantage: f64, clip_range: f64) -> S {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_range, 1.0 + clip_range) * advantage;
    unclipped.min(clipped)
}

fn record_log_prob<S: Real>(
    record: &TransitionRecord,
    v: &[S],
    schedule: &NoiseSchedule,
) -> Result<(Vec<S>, S, f64)> {
    let coeffs = transition_coefficients(record.t, record.h, schedule)?;
    if !(coeffs.variance > 0.0) {
        return Err(Error::invalid(format!(
            "stored transition at step {} has zero variance; ratios need eta > 0",
            record.step
        )));
    }
    let mean = mean_from_velocity(&record.x_t, v, &coeffs);
    let lp = gaussian_log_prob(&record.x_next, &mean, coeffs.variance);
    Ok((mean, lp, coeffs.variance))
}

/// Log-density of a stored transition under `params` and condition `e`.
pub fn transition_log_prob(
    params: &PolicyParams,
    record: &TransitionRecord,
    e: &ConditionEmbedding,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let v = velocity(params, &record.x_t, record.t, e)?;
    Ok(record_log_prob(record, &v, schedule)?.1)
}

/// Importance ratio of a stored transition, computed in log space.
pub fn ratio(
    params: &PolicyParams,
    snapshot: &OldPolicySnapshot,
    record: &TransitionRecord,
    e: &ConditionEmbedding,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let new = transition_log_prob(params, record, e, schedule)?;
    let old = transition_log_prob(snapshot.params(), record, e, schedule)?;
    let r = (new - old).exp();
    if !r.is_finite() {
        return Err(Error::numeric("ratio", format!("log-ratio {} overflows", new - old)));
    }
    Ok(r)
}

/// Mean over stored transitions of the closed-form KL between the policy
/// and reference transitions (equal isotropic variances).
pub fn kl_penalty(
    params: &PolicyParams,
    reference: &PolicyParams,
    records: &[&TransitionRecord],
    e: &ConditionEmbedding,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in records {
        let coeffs = transition_coefficients(r.t, r.h, schedule)?;
        let a = mean_from_velocity(&r.x_t, &velocity(params, &r.x_t, r.t, e)?, &coeffs);
        let b = mean_from_velocity(&r.x_t, &velocity(reference, &r.x_t, r.t, e)?, &coeffs);
        total += kl_equal_variance(&a, &b, coeffs.variance);
    }
    Ok(total / records.len() as f64)
}

fn kl_equal_variance<S: Real>(a: &[S], b: &[f64], variance: f64) -> S {
    sum(a.iter().zip(b).map(|(&x, &y)| (x - y).square())) * (0.5 / variance)
}

/// Ratio diagnostics over every `(sample, step)` term of an objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RatioStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub clip_fraction: f64,
    pub count: usize,
}

#[derive(Debug, Default)]
pub(crate) struct RatioAccumulator {
    min: f64,
    max: f64,
    sum: f64,
    clipped: usize,
    count: usize,
}

impl RatioAccumulator {
    fn push(&mut self, r: f64, clip_range: f64) {
        if self.count == 0 {
            self.min = r;
            self.max = r;
        } else {
            self.min = self.min.min(r);
            self.max = self.max.max(r);
        }
        self.sum += r;
        self.count += 1;
        if r < 1.0 - clip_range || r > 1.0 + clip_range {
            self.clipped += 1;
        }
    }

    pub(crate) fn finish(&self) -> RatioStats {
        if self.count == 0 {
            return RatioStats::default();
        }
        RatioStats {
            min: self.min,
            mean: self.sum / self.count as f64,
            max: self.max,
            clip_fraction: self.clipped as f64 / self.count as f64,
            count: self.count,
        }
    }
}

/// Everything an objective needs besides the parameters being optimized.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub snapshot: &'a OldPolicySnapshot,
    pub schedule: &'a NoiseSchedule,
    pub clip: &'a ClipConfig,
    pub kl: KlConfig<'a>,
}

/// The clipped-surrogate term of one view:
/// `(1/G) sum_i (1/|M|) sum_k L_clip(r_ik, A_i)` under embedding `e`.
/// When `kl_reference` is given, also returns the mean transition KL.
pub(crate) fn view_term<'t>(
    tape: &'t Tape<'_>,
    ctx: &ObjectiveContext<'_>,
    trajectories: &[Trajectory],
    advantages: &[f64],
    e: &ConditionEmbedding,
    kl_reference: Option<&PolicyParams>,
    stats: &mut RatioAccumulator,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    if trajectories.is_empty() {
        return Err(Error::invalid("objective needs at least one trajectory"));
    }
    if trajectories.len() != advantages.len() {
        return Err(Error::invalid(format!(
            "{} trajectories but {} advantages",
            trajectories.len(),
            advantages.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(trajectories.len());
    let mut kl_terms = Vec::new();
    for (i, (traj, &adv)) in trajectories.iter().zip(advantages).enumerate() {
        if traj.records.is_empty() {
            return Err(Error::invalid(format!("trajectory {i} has no stored SDE transitions")));
        }
        let mut terms = Vec::with_capacity(traj.records.len());
        for rec in &traj.records {
            let ctx_err = |err: Error| err.with_context(format!("sample {i} step {}", rec.step));
            let v_new = tape.velocity(&rec.x_t, rec.t, e).map_err(ctx_err)?;
            let (mean_new, lp_new, variance) = record_log_prob(rec, &v_new, ctx.schedule).map_err(ctx_err)?;
            let v_old = velocity(ctx.snapshot.params(), &rec.x_t, rec.t, e).map_err(ctx_err)?;
            let (_, lp_old, _) = record_log_prob(rec, &v_old, ctx.schedule).map_err(ctx_err)?;
            let r = (lp_new - lp_old).exp();
            if !r.value().is_finite() {
                return Err(Error::numeric("ratio", format!("sample {i} step {}: overflow", rec.step)));
            }
            stats.push(r.value(), ctx.clip.clip_range);
            terms.push(clipped_surrogate(r, adv, ctx.clip.clip_range));
            if let Some(reference) = kl_reference {
                let coeffs = transition_coefficients(rec.t, rec.h, ctx.schedule)?;
                let v_ref = velocity(reference, &rec.x_t, rec.t, e).map_err(ctx_err)?;
                let mean_ref = mean_from_velocity(&rec.x_t, &v_ref, &coeffs);
                kl_terms.push(kl_equal_variance(&mean_new, &mean_ref, variance));
            }
        }
        let n = terms.len() as f64;
        per_sample.push(sum(terms) * (1.0 / n));
    }
    let g = per_sample.len() as f64;
    let term = sum(per_sample) * (1.0 / g);
    let kl = if kl_terms.is_empty() {
        None
    } else {
        let n = kl_terms.len() as f64;
        Some(sum(kl_terms) * (1.0 / n))
    };
    Ok((term, kl))
}

/// `loss = -(anchor + sum augmented - beta KL)`, shared by the single- and
/// multi-view objectives so both reduce to the same operations.
pub(crate) fn assemble_loss<'t>(anchor: Var<'t>, augmented: Vec<Var<'t>>, kl: Option<Var<'t>>, beta: f64) -> Var<'t> {
    let mut total = anchor;
    for term in augmented {
        total = total + term;
    }
    if let Some(kl) = kl {
        total = total - kl * beta;
    }
    -total
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub grad: GradientBuffer,
    pub ratios: RatioStats,
}

/// Negated single-view objective and its gradient.
pub fn single_view_objective(
    params: &PolicyParams,
    ctx: &ObjectiveContext<'_>,
    trajectories: &[Trajectory],
    advantages: &[f64],
    e: &ConditionEmbedding,
) -> Result<ObjectiveOutput> {
    let reference = ctx.kl.active()?;
    let mut stats = RatioAccumulator::default();
    let (loss, grad) = value_and_grad(params, |tape| {
        let (anchor, kl) = view_term(tape, ctx, trajectories, advantages, e, reference, &mut stats)?;
        Ok(assemble_loss(anchor, Vec::new(), kl, ctx.kl.beta))
    })?;
    Ok(ObjectiveOutput {
        loss,
        grad,
        ratios: stats.finish(),
    })
}
