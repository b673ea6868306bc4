//! Synthetic condition space.
//!
//! A condition is a masked vector of attribute slots: the first
//! `n_subject` slots describe the "subject" of a sample and the remaining
//! slots describe its "style". Data points live in `R^d` with `d` equal to
//! the slot count, so every data dimension carries exactly one attribute.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Present values are confined to this symmetric range.
pub const VALUE_LIMIT: f64 = 3.0;

/// Spread of present style dimensions around their requested value.
pub const PRESENT_STYLE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLayout {
    pub n_subject: usize,
    pub n_style: usize,
}

impl Default for AttributeLayout {
    fn default() -> Self {
        Self {
            n_subject: 2,
            n_style: 4,
        }
    }
}

impl AttributeLayout {
    pub fn new(n_subject: usize, n_style: usize) -> Result<Self> {
        if n_subject == 0 {
            return Err(Error::invalid("layout needs at least one subject slot"));
        }
        Ok(Self { n_subject, n_style })
    }

    pub fn len(&self) -> usize {
        self.n_subject + self.n_style
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_subject(&self, slot: usize) -> bool {
        slot < self.n_subject
    }

    pub fn style_slots(&self) -> std::ops::Range<usize> {
        self.n_subject..self.len()
    }

    pub fn embedding_len(&self) -> usize {
        2 * self.len()
    }

    /// Human-readable slot name used by the text serialization.
    pub fn slot_name(&self, slot: usize) -> String {
        if self.is_subject(slot) {
            format!("subject{slot}")
        } else {
            format!("style{}", slot - self.n_subject)
        }
    }

    pub fn slot_by_name(&self, name: &str) -> Option<usize> {
        let (rest, offset, bound) = match name.strip_prefix("subject") {
            Some(rest) => (rest, 0, self.n_subject),
            None => (name.strip_prefix("style")?, self.n_subject, self.n_style),
        };
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let idx: usize = rest.parse().ok()?;
        (idx < bound).then_some(offset + idx)
    }
}

/// A point of the condition space: one optional value per attribute slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    layout: AttributeLayout,
    slots: Vec<Option<f64>>,
}

impl Condition {
    pub fn new(layout: AttributeLayout, slots: Vec<Option<f64>>) -> Result<Self> {
        if slots.len() != layout.len() {
            return Err(Error::invalid(format!(
                "condition has {} slots, layout expects {}",
                slots.len(),
                layout.len()
            )));
        }
        if !slots[..layout.n_subject].iter().any(Option::is_some) {
            return Err(Error::invalid("condition has no present subject slot"));
        }
        for (a, v) in slots.iter().enumerate() {
            if let Some(v) = v {
                if !v.is_finite() || v.abs() > VALUE_LIMIT {
                    return Err(Error::invalid(format!(
                        "slot {a} value {v} outside [-{VALUE_LIMIT}, {VALUE_LIMIT}]"
                    )));
                }
            }
        }
        Ok(Self { layout, slots })
    }

    pub fn layout(&self) -> AttributeLayout {
        self.layout
    }

    pub fn slots(&self) -> &[Option<f64>] {
        &self.slots
    }

    pub fn get(&self, slot: usize) -> Option<f64> {
        self.slots[slot]
    }

    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn present_slots(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(a, v)| v.map(|v| (a, v)))
    }

    /// Returns a copy with one slot replaced, re-validating the invariants.
    pub fn with_slot(&self, slot: usize, value: Option<f64>) -> Result<Self> {
        if slot >= self.slots.len() {
            return Err(Error::invalid(format!("slot {slot} out of range")));
        }
        let mut slots = self.slots.clone();
        slots[slot] = value;
        Self::new(self.layout, slots)
    }

    /// Per slot `(mask, mask * value)`.
    pub fn embed(&self) -> ConditionEmbedding {
        let mut vec = Vec::with_capacity(2 * self.slots.len());
        for v in &self.slots {
            match v {
                Some(v) => vec.extend_from_slice(&[1.0, *v]),
                None => vec.extend_from_slice(&[0.0, 0.0]),
            }
        }
        ConditionEmbedding(vec)
    }
}

/// Fixed-width real encoding of a condition fed to the velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding(pub Vec<f64>);

impl ConditionEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &ConditionEmbedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Generative description of the toy data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataSpec {
    pub layout: AttributeLayout,
    /// Standard deviation of present subject dimensions around their value.
    pub subject_noise: f64,
    /// Centers of the two-component style prior.
    pub style_modes: [f64; 2],
    pub style_mode_std: f64,
    /// Probability that a prior-drawn condition sets a given style slot.
    pub style_present_prob: f64,
    /// Subject values of prior-drawn conditions are uniform in `[-r, r]`.
    pub subject_range: f64,
}

impl Default for ToyDataSpec {
    fn default() -> Self {
        Self {
            layout: AttributeLayout::default(),
            subject_noise: 0.3,
            style_modes: [-1.0, 1.0],
            style_mode_std: 0.5,
            style_present_prob: 0.25,
            subject_range: 2.0,
        }
    }
}

impl ToyDataSpec {
    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout.n_subject == 0 {
            return Err(Error::config("data.layout.n_subject", "must be at least 1"));
        }
        if !(self.subject_noise >= 0.0 && self.subject_noise.is_finite()) {
            return Err(Error::config("data.subject_noise", "must be finite and >= 0"));
        }
        if !(self.style_mode_std > 0.0 && self.style_mode_std.is_finite()) {
            return Err(Error::config("data.style_mode_std", "must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.style_present_prob) {
            return Err(Error::config("data.style_present_prob", "must lie in [0, 1]"));
        }
        if !(self.subject_range > 0.0 && self.subject_range <= VALUE_LIMIT) {
            return Err(Error::config("data.subject_range", "must lie in (0, 3]"));
        }
        if self.style_modes.iter().any(|m| m.abs() > VALUE_LIMIT) {
            return Err(Error::config("data.style_modes", "must lie in [-3, 3]"));
        }
        Ok(())
    }

    /// One draw from the two-component style prior.
    pub fn sample_style_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mode = if rng.random::<bool>() {
            self.style_modes[1]
        } else {
            self.style_modes[0]
        };
        mode + self.style_mode_std * standard_normal(rng)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Draws a prompt-like condition: every subject slot present, each style
/// slot present independently with `style_present_prob`.
pub fn sample_condition_prior<R: Rng + ?Sized>(spec: &ToyDataSpec, rng: &mut R) -> Condition {
    let layout = spec.layout;
    let r = spec.subject_range;
    let mut slots = Vec::with_capacity(layout.len());
    for _ in 0..layout.n_subject {
        slots.push(Some(rng.random_range(-r..=r)));
    }
    for _ in 0..layout.n_style {
        let present = rng.random::<f64>() < spec.style_present_prob;
        // The value is drawn unconditionally so the stream advances identically.
        let value = spec.sample_style_prior(rng).clamp(-VALUE_LIMIT, VALUE_LIMIT);
        slots.push(present.then_some(value));
    }
    Condition::new(layout, slots).expect("prior draws satisfy the condition invariants")
}

/// Draws a data point from `p_data(. | c)`.
pub fn sample_data<R: Rng + ?Sized>(c: &Condition, spec: &ToyDataSpec, rng: &mut R) -> Vec<f64> {
    let layout = spec.layout;
    c.slots()
        .iter()
        .enumerate()
        .map(|(a, v)| match v {
            Some(v) if layout.is_subject(a) => v + spec.subject_noise * standard_normal(rng),
            Some(v) => v + PRESENT_STYLE_STD * standard_normal(rng),
            None => spec.sample_style_prior(rng),
        })
        .collect()
}

/// Perception stand-in: data dimension `a` is the value of slot `a`.
pub fn extract_features(x: &[f64], layout: AttributeLayout) -> Result<Vec<f64>> {
    if x.len() != layout.len() {
        return Err(Error::invalid(format!(
            "feature extraction expects {} dims, got {}",
            layout.len(),
            x.len()
        )));
    }
    Ok(x.iter()
        .map(|v| v.clamp(-VALUE_LIMIT, VALUE_LIMIT))
        .collect())
}

/// Gaussian-kernel reward parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kernel_widths: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self::uniform(AttributeLayout::default().len(), 0.1)
    }
}

impl RewardConfig {
    pub fn uniform(n_slots: usize, width: f64) -> Self {
        Self {
            kernel_widths: vec![width; n_slots],
            weights: vec![1.0; n_slots],
        }
    }

    pub fn validate(&self, layout: AttributeLayout) -> Result<()> {
        if self.kernel_widths.len() != layout.len() {
            return Err(Error::config(
                "reward.kernel_widths",
                format!("expected {} entries", layout.len()),
            ));
        }
        if self.weights.len() != layout.len() {
            return Err(Error::config(
                "reward.weights",
                format!("expected {} entries", layout.len()),
            ));
        }
        if self.kernel_widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::config("reward.kernel_widths", "must be positive"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("reward.weights", "must be nonnegative"));
        }
        if self.weights[..layout.n_subject].iter().all(|w| *w == 0.0) {
            return Err(Error::config(
                "reward.weights",
                "at least one subject weight must be positive",
            ));
        }
        Ok(())
    }
}

/// `R(x, c) = sum_a w_a exp(-(x_a - c_a)^2 / tau_a)` over present slots,
/// with weights renormalized over those slots.
pub fn reward(x: &[f64], c: &Condition, cfg: &RewardConfig) -> Result<f64> {
    let n = c.layout().len();
    if x.len() != n || cfg.kernel_widths.len() != n || cfg.weights.len() != n {
        return Err(Error::invalid(format!(
            "reward dimension mismatch: x {}, condition {n}, config {}/{}",
            x.len(),
            cfg.kernel_widths.len(),
            cfg.weights.len()
        )));
    }
    let mut total_w = 0.0;
    let mut acc = 0.0;
    for (a, value) in c.present_slots() {
        let w = cfg.weights[a];
        let diff = x[a] - value;
        acc += w * (-(diff * diff) / cfg.kernel_widths[a]).exp();
        total_w += w;
    }
    if total_w <= 0.0 {
        return Err(Error::invalid("all present slots carry zero reward weight"));
    }
    Ok(acc / total_w)
}

/// Two samples whose reward order flips between two conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReversal {
    pub first_condition: usize,
    pub second_condition: usize,
    pub first_sample: usize,
    pub second_sample: usize,
}

/// Exhaustive search for a pair of conditions and a pair of samples with
/// `R(x1, c) > R(x2, c)` but `R(x1, c') < R(x2, c')`.
pub fn find_ranking_reversal(
    pool: &[Vec<f64>],
    conditions: &[Condition],
    cfg: &RewardConfig,
) -> Result<Option<RankingReversal>> {
    let table = conditions
        .iter()
        .map(|c| pool.iter().map(|x| reward(x, c, cfg)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    for (ci, ri) in table.iter().enumerate() {
        for (cj, rj) in table.iter().enumerate().skip(ci + 1) {
            for s1 in 0..pool.len() {
                for s2 in 0..pool.len() {
                    if ri[s1] > ri[s2] && rj[s1] < rj[s2] {
                        return Ok(Some(RankingReversal {
                            first_condition: ci,
                            second_condition: cj,
                            first_sample: s1,
                            second_sample: s2,
                        }));
                    }
                }
            }
        }
    }
    Ok(None)
}
