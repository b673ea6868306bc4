//! Multi-view GRPO: every group of samples is scored and optimized under
//! the anchor condition and under `K` augmented conditions, reusing the
//! stored SDE transitions for all views.

pub mod drift;
pub mod train;

use crate::condspace::{reward, Condition, RewardConfig};
use crate::error::{Error, Result};
use crate::flowmodel::{value_and_grad, PolicyParams};
use crate::grpo::{
    advantages, assemble_loss, group_stats, view_term, ClipConfig, GroupEvaluation, ObjectiveContext, ObjectiveOutput,
    RatioAccumulator,
};
use crate::sampler::Trajectory;

pub use drift::{drift_report, probability_drift, probability_drift_direct, DriftConfig, DriftReport, DriftSample, StepDrift};
pub use train::{GrpoConfig, IterationReport, SamplingConfig, TrainConfig, TrainMode, Trainer, TrainerState};

/// Rewards and advantages of `samples` under the anchor (row 0) and each
/// view, every row standardized and clamped on its own.
pub fn multiview_advantages(
    samples: &[Vec<f64>],
    c: &Condition,
    views: &[Condition],
    reward_cfg: &RewardConfig,
    clip: &ClipConfig,
) -> Result<GroupEvaluation> {
    let mut eval = GroupEvaluation {
        rewards: Vec::with_capacity(views.len() + 1),
        advantages: Vec::with_capacity(views.len() + 1),
        means: Vec::with_capacity(views.len() + 1),
        stds: Vec::with_capacity(views.len() + 1),
    };
    for (v, cond) in std::iter::once(c).chain(views).enumerate() {
        let rewards = samples
            .iter()
            .map(|x| reward(x, cond, reward_cfg))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.with_context(format!("view {v}")))?;
        let adv = advantages(&rewards, clip).map_err(|e| e.with_context(format!("view {v}")))?;
        let (mean, std) = group_stats(&rewards);
        eval.rewards.push(rewards);
        eval.advantages.push(adv);
        eval.means.push(mean);
        eval.stds.push(std);
    }
    Ok(eval)
}

/// Negated multi-view objective: the anchor term plus one clipped-surrogate
/// term per augmented view, each evaluated on the same stored transitions
/// with the view's condition. KL (if any) applies to the anchor view only.
/// With `normalize_views` the augmented terms are scaled by `1/K`.
pub fn mv_objective(
    params: &PolicyParams,
    ctx: &ObjectiveContext<'_>,
    trajectories: &[Trajectory],
    geval: &GroupEvaluation,
    c: &Condition,
    views: &[Condition],
    normalize_views: bool,
) -> Result<ObjectiveOutput> {
    if geval.views() != views.len() + 1 {
        return Err(Error::invalid(format!(
            "group evaluation has {} rows for {} views",
            geval.views(),
            views.len() + 1
        )));
    }
    let reference = if ctx.kl.beta == 0.0 {
        None
    } else {
        Some(
            ctx.kl
                .reference
                .ok_or_else(|| Error::invalid("KL beta > 0 requires reference parameters"))?,
        )
    };
    if !(ctx.kl.beta >= 0.0 && ctx.kl.beta.is_finite()) {
        return Err(Error::invalid(format!("KL beta {} must be finite and >= 0", ctx.kl.beta)));
    }
    let anchor_e = c.embed();
    let view_e: Vec<_> = views.iter().map(Condition::embed).collect();
    let mut stats = RatioAccumulator::default();
    let (loss, grad) = value_and_grad(params, |tape| {
        let (anchor, kl) = view_term(tape, ctx, trajectories, &geval.advantages[0], &anchor_e, reference, &mut stats)
            .map_err(|e| e.with_context("view 0"))?;
        let mut augmented = Vec::with_capacity(views.len());
        for (k, e) in view_e.iter().enumerate() {
            let (term, _) = view_term(tape, ctx, trajectories, &geval.advantages[k + 1], e, None, &mut stats)
                .map_err(|err| err.with_context(format!("view {}", k + 1)))?;
            augmented.push(if normalize_views { term * (1.0 / views.len() as f64) } else { term });
        }
        Ok(assemble_loss(anchor, augmented, kl, ctx.kl.beta))
    })?;
    Ok(ObjectiveOutput {
        loss,
        grad,
        ratios: stats.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condspace::{find_ranking_reversal, AttributeLayout};
    use crate::flowmodel::{Activation, VelocityFieldConfig};
    use crate::grpo::{single_view_objective, KlConfig, OldPolicySnapshot};
    use crate::rng::{stream, Purpose};
    use crate::sampler::{rollout_group, NoiseSchedule, TimeGrid};
    use rand::Rng;

    fn layout() -> AttributeLayout {
        AttributeLayout::new(1, 1).unwrap()
    }

    fn toy(seed: u64) -> (PolicyParams, Vec<Trajectory>, Vec<Vec<f64>>, Condition, NoiseSchedule) {
        let cfg = VelocityFieldConfig {
            data_dim: 2,
            cond_dim: 4,
            hidden: vec![6, 6],
            time_features: 4,
            activation: Activation::Silu,
        };
        let params = PolicyParams::init(cfg, &mut stream(seed, Purpose::Init, &[])).unwrap();
        let c = Condition::new(layout(), vec![Some(0.3), Some(-0.8)]).unwrap();
        let grid = TimeGrid::new(8, 3.0, &[0, 2, 4]).unwrap();
        let s = NoiseSchedule::for_grid(0.7, &grid).unwrap();
        let out = rollout_group(&params, &c, &grid, &s, 4, &mut stream(seed, Purpose::Rollout, &[]), true).unwrap();
        (params, out.trajectories, out.samples, c, s)
    }

    fn reward_cfg() -> RewardConfig {
        RewardConfig::uniform(2, 0.5)
    }

    #[test]
    fn k_zero_advantages_match_single_view() {
        let (_, _, samples, c, _) = toy(1);
        let clip = ClipConfig::default();
        let ev = multiview_advantages(&samples, &c, &[], &reward_cfg(), &clip).unwrap();
        assert_eq!(ev.views(), 1);
        let rewards: Vec<f64> = samples.iter().map(|x| reward(x, &c, &reward_cfg()).unwrap()).collect();
        assert_eq!(ev.advantages[0], advantages(&rewards, &clip).unwrap());
    }

    #[test]
    fn constant_view_row_is_zero() {
        // The view only has a subject slot; all samples share its feature.
        let samples = vec![vec![0.5, 0.1], vec![0.5, -0.7], vec![0.5, 1.3]];
        let c = Condition::new(layout(), vec![Some(0.5), Some(0.0)]).unwrap();
        let view = Condition::new(layout(), vec![Some(0.5), None]).unwrap();
        let ev = multiview_advantages(&samples, &c, &[view], &reward_cfg(), &ClipConfig::default()).unwrap();
        assert!(ev.advantages[1].iter().all(|a| *a == 0.0));
        assert!(ev.advantages[0].iter().any(|a| *a != 0.0));
    }

    #[test]
    fn reversed_ranking_flips_advantage_signs() {
        let mut rng = stream(2, Purpose::Control, &[]);
        let pool: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let c = Condition::new(layout(), vec![Some(0.0), Some(-1.0)]).unwrap();
        let view = Condition::new(layout(), vec![Some(0.0), Some(1.0)]).unwrap();
        let rc = reward_cfg();
        let rev = find_ranking_reversal(&pool, &[c.clone(), view.clone()], &rc)
            .unwrap()
            .expect("a reversal exists");
        assert_eq!((rev.first_condition, rev.second_condition), (0, 1));
        let pair = vec![pool[rev.first_sample].clone(), pool[rev.second_sample].clone()];
        let (anchor, other) = (&c, &view);
        let ev = multiview_advantages(&pair, anchor, std::slice::from_ref(other), &rc, &ClipConfig::default()).unwrap();
        assert!(ev.advantages[0][0] > 0.0 && ev.advantages[0][1] < 0.0);
        assert!(ev.advantages[1][0] < 0.0 && ev.advantages[1][1] > 0.0);
    }

    fn ctx_parts(params: &PolicyParams) -> (OldPolicySnapshot, ClipConfig) {
        (OldPolicySnapshot::take(params), ClipConfig::default())
    }

    #[test]
    fn k_zero_objective_reduces_exactly() {
        let (params, trajs, samples, c, s) = toy(3);
        let (snap, clip) = ctx_parts(&params);
        let ctx = ObjectiveContext {
            snapshot: &snap,
            schedule: &s,
            clip: &clip,
            kl: KlConfig::disabled(),
        };
        let ev = multiview_advantages(&samples, &c, &[], &reward_cfg(), &clip).unwrap();
        let mv = mv_objective(&params, &ctx, &trajs, &ev, &c, &[], false).unwrap();
        let sv = single_view_objective(&params, &ctx, &trajs, &ev.advantages[0], &c.embed()).unwrap();
        assert_eq!(mv.loss.to_bits(), sv.loss.to_bits());
        assert_eq!(mv.grad, sv.grad);
    }

    #[test]
    fn identical_views_scale_the_anchor_term() {
        let (params, trajs, samples, c, s) = toy(4);
        let mut rng = stream(4, Purpose::Control, &[]);
        let moved = params
            .with_values(params.values().iter().map(|v| v + 0.02 * rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let snap = OldPolicySnapshot::take(&params);
        let clip = ClipConfig {
            clip_range: 0.2,
            ..Default::default()
        };
        let ctx = ObjectiveContext {
            snapshot: &snap,
            schedule: &s,
            clip: &clip,
            kl: KlConfig::disabled(),
        };
        let views = vec![c.clone(); 3];
        let ev = multiview_advantages(&samples, &c, &views, &reward_cfg(), &clip).unwrap();
        let anchor = single_view_objective(&moved, &ctx, &trajs, &ev.advantages[0], &c.embed()).unwrap();
        let mv = mv_objective(&moved, &ctx, &trajs, &ev, &c, &views, false).unwrap();
        assert!(anchor.loss.abs() > 1e-6);
        assert!((mv.loss - 4.0 * anchor.loss).abs() <= 1e-12 * anchor.loss.abs().max(1.0));
        let normalized = mv_objective(&moved, &ctx, &trajs, &ev, &c, &views, true).unwrap();
        assert!((normalized.loss - 2.0 * anchor.loss).abs() <= 1e-12 * anchor.loss.abs().max(1.0));
    }

    #[test]
    fn mv_gradient_matches_finite_differences() {
        let (params, trajs, samples, c, s) = toy(5);
        let mut rng = stream(5, Purpose::Control, &[]);
        let snap = OldPolicySnapshot::take(
            &params
                .with_values(params.values().iter().map(|v| v + 0.01 * rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let clip = ClipConfig {
            clip_range: 0.2,
            ..Default::default()
        };
        let reference = params.with_values(params.values().iter().map(|v| 0.95 * v).collect()).unwrap();
        let ctx = ObjectiveContext {
            snapshot: &snap,
            schedule: &s,
            clip: &clip,
            kl: KlConfig {
                beta: 0.1,
                reference: Some(&reference),
            },
        };
        let views = vec![
            c.with_slot(1, Some(-0.2)).unwrap(),
            c.with_slot(1, None).unwrap(),
        ];
        let ev = multiview_advantages(&samples, &c, &views, &reward_cfg(), &clip).unwrap();
        let out = mv_objective(&params, &ctx, &trajs, &ev, &c, &views, false).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in 0..params.len() {
            let mut plus = params.values().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let f = |v: Vec<f64>| mv_objective(&params.with_values(v).unwrap(), &ctx, &trajs, &ev, &c, &views, false).unwrap().loss;
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            let g = out.grad.0[j];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8));
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn view_count_mismatch_is_rejected() {
        let (params, trajs, samples, c, s) = toy(6);
        let (snap, clip) = ctx_parts(&params);
        let ctx = ObjectiveContext {
            snapshot: &snap,
            schedule: &s,
            clip: &clip,
            kl: KlConfig::disabled(),
        };
        let ev = multiview_advantages(&samples, &c, &[], &reward_cfg(), &clip).unwrap();
        assert!(mv_objective(&params, &ctx, &trajs, &ev, &c, std::slice::from_ref(&c), false).is_err());
    }
}
