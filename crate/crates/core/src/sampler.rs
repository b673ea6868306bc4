//! ODE and SDE samplers over a discrete time grid.
//!
//! Time runs from `t = 1` (pure noise) down to `t = 0` (data). A step of
//! size `h` from `t` moves the state to time `t - h`. The deterministic
//! update is the Euler step `x - h v`; the stochastic step adds the
//! score-correction drift `(sigma_t^2 / 2t) * x1_hat` integrated over `-h`
//! plus isotropic Gaussian noise of variance `sigma_t^2 h`, which keeps the
//! marginals of the ODE.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condspace::{standard_normal, Condition, ConditionEmbedding};
use crate::error::{ensure_finite, Error, Result};
use crate::flowmodel::{sum, velocity, PolicyParams, Real};

/// Decreasing grid `1 = t_0 > t_1 > ... > t_T = 0` with the SDE step set.
///
/// Step `k` goes from `points[k]` to `points[k + 1]`; `k` therefore counts
/// denoising steps from the noise end.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    sde_steps: Vec<usize>,
    shift: f64,
}

impl TimeGrid {
    /// Uniform grid of `steps` intervals warped by `t -> s t / (1 + (s - 1) t)`.
    pub fn new(steps: usize, shift: f64, sde_steps: &[usize]) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("sampler.sampling_steps", "must be at least 1"));
        }
        if !(shift >= 1.0 && shift.is_finite()) {
            return Err(Error::config("sampler.shift", "must be finite and >= 1"));
        }
        let mut m = sde_steps.to_vec();
        m.sort_unstable();
        m.dedup();
        if let Some(&bad) = m.iter().find(|&&k| k >= steps) {
            return Err(Error::config(
                "sampler.sde_steps",
                format!("index {bad} is not below sampling_steps {steps}"),
            ));
        }
        let points: Vec<f64> = (0..=steps)
            .map(|k| {
                let u = 1.0 - k as f64 / steps as f64;
                shift * u / (1.0 + (shift - 1.0) * u)
            })
            .collect();
        debug_assert!(points.windows(2).all(|w| w[0] > w[1]));
        Ok(Self {
            points,
            sde_steps: m,
            shift,
        })
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn sde_steps(&self) -> &[usize] {
        &self.sde_steps
    }

    pub fn is_sde(&self, k: usize) -> bool {
        self.sde_steps.binary_search(&k).is_ok()
    }

    /// `(t, h)` of step `k`.
    pub fn step(&self, k: usize) -> (f64, f64) {
        let t = self.points[k];
        (t, t - self.points[k + 1])
    }

    /// Copy of the grid with a different SDE step set.
    pub fn with_sde_steps(&self, sde_steps: &[usize]) -> Result<Self> {
        Self::new(self.steps(), self.shift, sde_steps)
    }
}

/// Noise level `eta` and the clamp applied to `t` inside `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub eta: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    pub fn new(eta: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::config("sampler.eta", "must be finite and >= 0"));
        }
        if !(0.0 < t_min && t_min < t_max && t_max < 1.0) {
            return Err(Error::config(
                "sampler.t_clamp",
                format!("need 0 < t_min < t_max < 1, got [{t_min}, {t_max}]"),
            ));
        }
        Ok(Self { eta, t_min, t_max })
    }

    /// Clamp `[h_last / 2, 1 - h_first / 2]`: half a step away from both
    /// singular ends of `sqrt(t / (1 - t))`.
    pub fn for_grid(eta: f64, grid: &TimeGrid) -> Result<Self> {
        let (_, h_first) = grid.step(0);
        let (_, h_last) = grid.step(grid.steps() - 1);
        Self::new(eta, h_last / 2.0, 1.0 - h_first / 2.0)
    }

    pub fn clamp_time(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }
}

/// `sigma_t = eta * sqrt(t_c / (1 - t_c))` with `t_c` the clamped time.
pub fn sigma(t: f64, schedule: &NoiseSchedule) -> f64 {
    let tc = schedule.clamp_time(t);
    schedule.eta * (tc / (1.0 - tc)).sqrt()
}

/// Transition mean is affine in the velocity: `mu = state * x + velocity * v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoefficients {
    pub state: f64,
    pub velocity: f64,
    pub variance: f64,
}

/// Coefficients of `mu = x - h [v + sigma^2 / (2 t_c) (x + (1 - t) v)]`.
pub fn transition_coefficients(t: f64, h: f64, schedule: &NoiseSchedule) -> Result<TransitionCoefficients> {
    if !(h > 0.0) || !(t > 0.0 && t <= 1.0) || t - h < -1e-12 {
        return Err(Error::invalid(format!("invalid step t={t}, h={h}")));
    }
    let s = sigma(t, schedule);
    let s2 = s * s;
    let drift = s2 / (2.0 * schedule.clamp_time(t));
    Ok(TransitionCoefficients {
        state: 1.0 - h * drift,
        velocity: -h * (1.0 + drift * (1.0 - t)),
        variance: s2 * h,
    })
}

/// Transition mean from a velocity, shared by plain and taped evaluation.
pub fn mean_from_velocity<S: Real>(x: &[f64], v: &[S], coeffs: &TransitionCoefficients) -> Vec<S> {
    v.iter()
        .zip(x)
        .map(|(&vj, &xj)| vj * coeffs.velocity + coeffs.state * xj)
        .collect()
}

/// `log N(x_next; mean, var I)`, shared by plain and taped evaluation.
pub fn gaussian_log_prob<S: Real>(x_next: &[f64], mean: &[S], var: f64) -> S {
    let d = x_next.len() as f64;
    let sq = sum(mean.iter().zip(x_next).map(|(&m, &x)| (m - x).square()));
    sq * (-0.5 / var) - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub step: usize,
    pub t: f64,
    pub h: f64,
    pub x_t: Vec<f64>,
    pub x_next: Vec<f64>,
    pub noise: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TransitionRecord>,
    pub x_init: Vec<f64>,
    pub sample: Vec<f64>,
    pub condition: Condition,
}

/// Deterministic Euler step toward data.
pub fn ode_step(params: &PolicyParams, x: &[f64], t: f64, h: f64, e: &ConditionEmbedding) -> Result<Vec<f64>> {
    if !(h > 0.0) || t - h < -1e-12 {
        return Err(Error::invalid(format!("invalid ODE step t={t}, h={h}")));
    }
    let v = velocity(params, x, t, e)?;
    let out: Vec<f64> = x.iter().zip(&v).map(|(xj, vj)| xj - h * vj).collect();
    ensure_finite("ode_step", &out)?;
    Ok(out)
}

/// Clean-sample and noise estimates `(x - t v, x + (1 - t) v)`.
pub fn x0_x1_estimates(x: &[f64], t: f64, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let x0 = x.iter().zip(v).map(|(a, b)| a - t * b).collect();
    let x1 = x.iter().zip(v).map(|(a, b)| a + (1.0 - t) * b).collect();
    (x0, x1)
}

pub fn transition_mean(
    params: &PolicyParams,
    x: &[f64],
    t: f64,
    h: f64,
    e: &ConditionEmbedding,
    schedule: &NoiseSchedule,
) -> Result<TransitionGaussian> {
    let coeffs = transition_coefficients(t, h, schedule)?;
    let v = velocity(params, x, t, e)?;
    let mean = mean_from_velocity(x, &v, &coeffs);
    ensure_finite("transition_mean", &mean)?;
    Ok(TransitionGaussian {
        mean,
        variance: coeffs.variance,
    })
}

/// Euler-Maruyama step with an explicit standard-normal draw.
#[allow(clippy::too_many_arguments)]
pub fn sde_step_with_noise(
    params: &PolicyParams,
    x: &[f64],
    t: f64,
    h: f64,
    e: &ConditionEmbedding,
    schedule: &NoiseSchedule,
    noise: Vec<f64>,
    step: usize,
) -> Result<(Vec<f64>, TransitionRecord)> {
    let g = transition_mean(params, x, t, h, e, schedule)?;
    let scale = g.variance.sqrt();
    let x_next: Vec<f64> = g.mean.iter().zip(&noise).map(|(m, n)| m + scale * n).collect();
    ensure_finite("sde_step", &x_next)?;
    let record = TransitionRecord {
        step,
        t,
        h,
        x_t: x.to_vec(),
        x_next: x_next.clone(),
        noise,
        variance: g.variance,
    };
    Ok((x_next, record))
}

#[allow(clippy::too_many_arguments)]
pub fn sde_step<R: Rng + ?Sized>(
    params: &PolicyParams,
    x: &[f64],
    t: f64,
    h: f64,
    e: &ConditionEmbedding,
    schedule: &NoiseSchedule,
    step: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, TransitionRecord)> {
    let noise = (0..x.len()).map(|_| standard_normal(rng)).collect();
    sde_step_with_noise(params, x, t, h, e, schedule, noise, step)
}

pub fn log_prob(x_next: &[f64], g: &TransitionGaussian) -> Result<f64> {
    if !(g.variance > 0.0) {
        return Err(Error::invalid(format!("transition variance {} must be positive", g.variance)));
    }
    if x_next.len() != g.mean.len() {
        return Err(Error::invalid("log_prob dimension mismatch"));
    }
    Ok(gaussian_log_prob(x_next, &g.mean, g.variance))
}

/// Noise draw that would have produced `x_next` from the mean of `g`.
pub fn equivalent_noise(x_next: &[f64], g: &TransitionGaussian) -> Result<Vec<f64>> {
    if !(g.variance > 0.0) {
        return Err(Error::invalid(format!("transition variance {} must be positive", g.variance)));
    }
    let scale = g.variance.sqrt();
    Ok(x_next.iter().zip(&g.mean).map(|(x, m)| (x - m) / scale).collect())
}

#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub samples: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
    /// Velocity evaluations spent on the rollout.
    pub nfe: usize,
}

/// Samples `group_size` outputs for one condition, stochastic on the grid's
/// SDE steps and deterministic elsewhere.
pub fn rollout_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    c: &Condition,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    group_size: usize,
    rng: &mut R,
    shared_init: bool,
) -> Result<GroupRollout> {
    if group_size < 2 {
        return Err(Error::invalid(format!("group size {group_size} must be at least 2")));
    }
    let d = params.config().data_dim;
    let e = c.embed();
    let mut states: Vec<Vec<f64>> = if shared_init {
        let x: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        vec![x; group_size]
    } else {
        (0..group_size)
            .map(|_| (0..d).map(|_| standard_normal(rng)).collect())
            .collect()
    };
    let inits = states.clone();
    let mut records: Vec<Vec<TransitionRecord>> = vec![Vec::with_capacity(grid.sde_steps().len()); group_size];
    let mut nfe = 0;
    for k in 0..grid.steps() {
        let (t, h) = grid.step(k);
        for (i, x) in states.iter_mut().enumerate() {
            let ctx = |err: Error| err.with_context(format!("rollout sample {i} step {k}"));
            if grid.is_sde(k) {
                let (next, rec) = sde_step(params, x, t, h, &e, schedule, k, rng).map_err(ctx)?;
                records[i].push(rec);
                *x = next;
            } else {
                *x = ode_step(params, x, t, h, &e).map_err(ctx)?;
            }
            nfe += 1;
        }
    }
    let trajectories = records
        .into_iter()
        .zip(inits)
        .zip(&states)
        .map(|((records, x_init), sample)| Trajectory {
            records,
            x_init,
            sample: sample.clone(),
            condition: c.clone(),
        })
        .collect();
    Ok(GroupRollout {
        samples: states,
        trajectories,
        nfe,
    })
}

/// Deterministic sample from one initial noise vector.
pub fn ode_sample(params: &PolicyParams, x_init: &[f64], e: &ConditionEmbedding, grid: &TimeGrid) -> Result<Vec<f64>> {
    let mut x = x_init.to_vec();
    for k in 0..grid.steps() {
        let (t, h) = grid.step(k);
        x = ode_step(params, &x, t, h, e)?;
    }
    Ok(x)
}

/// Single trajectory sample; SDE on the grid's SDE steps.
pub fn sde_sample<R: Rng + ?Sized>(
    params: &PolicyParams,
    x_init: &[f64],
    e: &ConditionEmbedding,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x = x_init.to_vec();
    for k in 0..grid.steps() {
        let (t, h) = grid.step(k);
        x = if grid.is_sde(k) {
            sde_step(params, &x, t, h, e, schedule, k, rng)?.0
        } else {
            ode_step(params, &x, t, h, e)?
        };
    }
    Ok(x)
}

fn short_digest(v: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for x in v {
        hasher.update(x.to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Debug dump: one tab-separated line `k t h variance digest(x_t) digest(x_next)`
/// per stored transition.
pub fn write_trajectory_dump<W: Write>(out: &mut W, traj: &Trajectory) -> std::io::Result<()> {
    for r in &traj.records {
        writeln!(
            out,
            "{}\t{:e}\t{:e}\t{:e}\t{}\t{}",
            r.step,
            r.t,
            r.h,
            r.variance,
            short_digest(&r.x_t),
            short_digest(&r.x_next)
        )?;
    }
    Ok(())
}
