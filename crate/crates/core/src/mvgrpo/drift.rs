//! Probability drift: how much the log-density of a stored transition
//! changes when the condition is swapped for an augmented one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::condspace::{sample_condition_prior, ConditionEmbedding, ToyDataSpec};
use crate::enhancer::{Enhancer, Provenance};
use crate::error::{Error, Result};
use crate::flowmodel::PolicyParams;
use crate::rng::{stream, Purpose};
use crate::sampler::{log_prob, rollout_group, transition_mean, NoiseSchedule, TimeGrid, TransitionRecord};

/// `|log p(x' | c) - log p(x' | c_k)|` in its reduced form: the variances
/// agree, so only the squared distances to the two means remain.
pub fn probability_drift(
    params: &PolicyParams,
    record: &TransitionRecord,
    e_c: &ConditionEmbedding,
    e_ck: &ConditionEmbedding,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let a = transition_mean(params, &record.x_t, record.t, record.h, e_c, schedule)?;
    let b = transition_mean(params, &record.x_t, record.t, record.h, e_ck, schedule)?;
    if !(a.variance > 0.0) {
        return Err(Error::invalid("drift needs a stochastic transition (variance > 0)"));
    }
    let sq = |m: &[f64]| -> f64 { record.x_next.iter().zip(m).map(|(x, m)| (x - m) * (x - m)).sum() };
    Ok((sq(&a.mean) - sq(&b.mean)).abs() / (2.0 * a.variance))
}

/// The same quantity by subtracting two full log-densities.
pub fn probability_drift_direct(
    params: &PolicyParams,
    record: &TransitionRecord,
    e_c: &ConditionEmbedding,
    e_ck: &ConditionEmbedding,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let a = transition_mean(params, &record.x_t, record.t, record.h, e_c, schedule)?;
    let b = transition_mean(params, &record.x_t, record.t, record.h, e_ck, schedule)?;
    Ok((log_prob(&record.x_next, &a)? - log_prob(&record.x_next, &b)?).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub n_pairs: usize,
    pub bins: usize,
    /// Samples rolled out per anchor; the enhancer picks among them.
    pub group_size: usize,
    /// Upper edge of the histogram; the largest observed drift when unset.
    pub max_value: Option<f64>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            n_pairs: 500,
            bins: 20,
            group_size: 8,
            max_value: None,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::config("drift.n_pairs", "must be at least 1"));
        }
        if self.bins == 0 {
            return Err(Error::config("drift.bins", "must be at least 1"));
        }
        if self.group_size < 2 {
            return Err(Error::config("drift.group_size", "must be at least 2"));
        }
        if let Some(m) = self.max_value {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::config("drift.max_value", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub pair: usize,
    /// Index of the rolled-out sample whose transitions were scored.
    pub sample: usize,
    pub step: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDrift {
    pub step: usize,
    pub values: Vec<f64>,
    pub bin_centers: Vec<f64>,
    pub counts: Vec<usize>,
    pub median: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub steps: Vec<StepDrift>,
    pub samples: Vec<DriftSample>,
    pub bin_width: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Rolls out `n_pairs` prompt-prior anchors, draws one augmented condition
/// per anchor from `enhancer`, and scores the drift of every stored SDE
/// transition of the sample the condition was derived from (sample 0 for
/// enhancers that do not look at samples).
///
/// Anchors and rollouts depend only on `seed` and the pair index, so
/// reports for different enhancers are paired.
#[allow(clippy::too_many_arguments)]
pub fn drift_report(
    params: &PolicyParams,
    cfg: &DriftConfig,
    enhancer: &mut Enhancer,
    spec: &ToyDataSpec,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<DriftReport> {
    cfg.validate()?;
    if grid.sde_steps().is_empty() {
        return Err(Error::invalid("drift report needs at least one SDE step"));
    }
    let mut samples = Vec::with_capacity(cfg.n_pairs * grid.sde_steps().len());
    for pair in 0..cfg.n_pairs {
        let p = pair as u64;
        let c = sample_condition_prior(spec, &mut stream(seed, Purpose::Drift, &[p, 0]));
        let rollout = rollout_group(
            params,
            &c,
            grid,
            schedule,
            cfg.group_size,
            &mut stream(seed, Purpose::Drift, &[p, 1]),
            false,
        )?;
        let views = enhancer.enhance(&c, &rollout.samples, 1, &mut stream(seed, Purpose::Drift, &[p, 2]))?;
        let Some(view) = views.items.first() else {
            return Err(Error::invalid(format!("enhancer produced no condition for pair {pair}")));
        };
        let sample = match view.provenance {
            Provenance::Posterior { sample, .. } => sample,
            _ => 0,
        };
        let (e_c, e_ck) = (c.embed(), view.condition.embed());
        for rec in &rollout.trajectories[sample].records {
            let delta = probability_drift(params, rec, &e_c, &e_ck, schedule)
                .map_err(|e| e.with_context(format!("pair {pair} step {}", rec.step)))?;
            samples.push(DriftSample {
                pair,
                sample,
                step: rec.step,
                delta,
            });
        }
    }
    let hi = cfg.max_value.unwrap_or_else(|| {
        let m = samples.iter().map(|s| s.delta).fold(0.0, f64::max);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    });
    let bin_width = hi / cfg.bins as f64;
    let steps = grid
        .sde_steps()
        .iter()
        .map(|&step| {
            let mut values: Vec<f64> = samples.iter().filter(|s| s.step == step).map(|s| s.delta).collect();
            let mut counts = vec![0usize; cfg.bins];
            for v in &values {
                let b = ((v / bin_width) as usize).min(cfg.bins - 1);
                counts[b] += 1;
            }
            let bin_centers = (0..cfg.bins).map(|b| (b as f64 + 0.5) * bin_width).collect();
            let unsorted = values.clone();
            values.sort_by(f64::total_cmp);
            StepDrift {
                step,
                median: quantile(&values, 0.5),
                p90: quantile(&values, 0.9),
                values: unsorted,
                bin_centers,
                counts,
            }
        })
        .collect();
    Ok(DriftReport {
        steps,
        samples,
        bin_width,
    })
}

impl StepDrift {
    /// Tab-separated `bin_center count` rows under a header, followed by a
    /// `#summary` row with the median and 90th percentile.
    pub fn table(&self) -> String {
        let mut out = String::from("bin_center\tcount\n");
        for (c, n) in self.bin_centers.iter().zip(&self.counts) {
            let _ = writeln!(out, "{c}\t{n}");
        }
        let _ = writeln!(out, "#summary\tmedian={}\tp90={}", self.median, self.p90);
        out
    }
}

impl DriftReport {
    /// Writes `{prefix}_step{k}.tsv` per SDE step; returns the paths.
    pub fn write_tables(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let path = dir.join(format!("{prefix}_step{}.tsv", s.step));
            std::fs::write(&path, s.table()).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condspace::{standard_normal, AttributeLayout, Condition};
    use crate::enhancer::{EnhancerConfig, EnhancerKind};
    use crate::flowmodel::{Activation, VelocityFieldConfig};
    use crate::sampler::{transition_coefficients, TransitionGaussian};
    use proptest::prelude::*;

    fn params(seed: u64) -> PolicyParams {
        let cfg = VelocityFieldConfig {
            data_dim: 6,
            cond_dim: 12,
            hidden: vec![8],
            time_features: 4,
            activation: Activation::Silu,
        };
        PolicyParams::init(cfg, &mut stream(seed, Purpose::Init, &[])).unwrap()
    }

    fn one_dim_zero_params() -> PolicyParams {
        let cfg = VelocityFieldConfig {
            data_dim: 1,
            cond_dim: 2,
            hidden: vec![1],
            time_features: 2,
            activation: Activation::Silu,
        };
        PolicyParams::zeros(cfg).unwrap()
    }

    #[test]
    fn drift_of_identical_conditions_is_zero() {
        let p = params(1);
        let s = NoiseSchedule::new(0.7, 0.05, 0.95).unwrap();
        let c = Condition::new(AttributeLayout::default(), vec![Some(0.2), Some(1.0), None, None, Some(0.4), None]).unwrap();
        let grid = TimeGrid::new(8, 3.0, &[0, 1, 2]).unwrap();
        let out = rollout_group(&p, &c, &grid, &s, 2, &mut stream(1, Purpose::Rollout, &[]), false).unwrap();
        for rec in &out.trajectories[0].records {
            assert_eq!(probability_drift(&p, rec, &c.embed(), &c.embed(), &s).unwrap(), 0.0);
        }
    }

    #[test]
    fn mean_shift_drift_is_half_squared_distance() {
        // With unit variance and x' at the first mean, the drift is
        // |0 - |delta|^2| / 2.
        let g = TransitionGaussian {
            mean: vec![0.3, -0.2],
            variance: 1.0,
        };
        let delta = [0.5, 1.0];
        let shifted = TransitionGaussian {
            mean: vec![0.8, 0.8],
            variance: 1.0,
        };
        let x = g.mean.clone();
        let direct = (log_prob(&x, &g).unwrap() - log_prob(&x, &shifted).unwrap()).abs();
        let expected = (delta[0] * delta[0] + delta[1] * delta[1]) / 2.0;
        assert!((direct - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_network_drift_vanishes() {
        let p = one_dim_zero_params();
        let s = NoiseSchedule::new(0.7, 0.05, 0.95).unwrap();
        let coeffs = transition_coefficients(0.5, 0.1, &s).unwrap();
        let rec = TransitionRecord {
            step: 0,
            t: 0.5,
            h: 0.1,
            x_t: vec![0.4],
            x_next: vec![0.1],
            noise: vec![0.0],
            variance: coeffs.variance,
        };
        let a = ConditionEmbedding(vec![1.0, 0.5]);
        let b = ConditionEmbedding(vec![1.0, -2.0]);
        assert_eq!(probability_drift(&p, &rec, &a, &b, &s).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn reduced_form_matches_direct_subtraction(seed in 0u64..1000) {
            let p = params(seed);
            let s = NoiseSchedule::new(0.7, 0.05, 0.95).unwrap();
            let mut rng = stream(seed, Purpose::Control, &[]);
            let x_t: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
            let x_next: Vec<f64> = x_t.iter().map(|v| v + 0.3 * standard_normal(&mut rng)).collect();
            let coeffs = transition_coefficients(0.6, 0.07, &s).unwrap();
            let rec = TransitionRecord { step: 0, t: 0.6, h: 0.07, x_t, x_next, noise: vec![0.0; 6], variance: coeffs.variance };
            let a = ConditionEmbedding((0..12).map(|_| standard_normal(&mut rng)).collect());
            let b = ConditionEmbedding((0..12).map(|_| standard_normal(&mut rng)).collect());
            let reduced = probability_drift(&p, &rec, &a, &b, &s).unwrap();
            let direct = probability_drift_direct(&p, &rec, &a, &b, &s).unwrap();
            prop_assert!(reduced >= 0.0);
            prop_assert!((reduced - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    fn report(kind: EnhancerKind, n_pairs: usize) -> DriftReport {
        let p = params(3);
        let spec = ToyDataSpec::default();
        let grid = TimeGrid::new(8, 3.0, &[0, 2]).unwrap();
        let s = NoiseSchedule::for_grid(0.7, &grid).unwrap();
        let cfg = EnhancerConfig {
            kind,
            ..Default::default()
        };
        let mut e = Enhancer::from_config(&cfg, &spec).unwrap();
        let dc = DriftConfig {
            n_pairs,
            bins: 10,
            group_size: 4,
            max_value: None,
        };
        drift_report(&p, &dc, &mut e, &spec, &grid, &s, 9).unwrap()
    }

    #[test]
    fn identity_report_is_all_zero() {
        let r = report(EnhancerKind::Identity, 20);
        for s in &r.steps {
            assert!(s.values.iter().all(|v| *v == 0.0));
            assert_eq!(s.counts[0], 20);
            assert_eq!(s.counts.iter().sum::<usize>(), 20);
            assert_eq!(s.median, 0.0);
        }
    }

    #[test]
    fn histogram_bookkeeping() {
        let r = report(EnhancerKind::Posterior, 30);
        assert_eq!(r.steps.len(), 2);
        for s in &r.steps {
            assert_eq!(s.counts.len(), 10);
            assert_eq!(s.counts.iter().sum::<usize>(), 30);
            let table = s.table();
            assert_eq!(table.lines().filter(|l| !l.starts_with('#') && !l.starts_with("bin")).count(), 10);
        }
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.9), 5.0);
        assert!((quantile(&[0.0, 10.0], 0.9) - 9.0).abs() < 1e-12);
    }
}
