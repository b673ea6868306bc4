//! Condition enhancers: operators that map an anchor condition (and
//! optionally the group's samples) to `K` semantically adjacent conditions.
//!
//! * posterior: reads style features off individual samples,
//! * prior: edits the anchor directly (add / delete / paraphrase) and keeps
//!   a memory of past outputs to avoid repeats,
//! * identity and random: controls for the drift analysis,
//! * remote: a chat-completions client, see [`remote`].

pub mod remote;

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condspace::{extract_features, standard_normal, AttributeLayout, Condition, ToyDataSpec, VALUE_LIMIT};
use crate::error::{Error, Result};

pub use remote::{RemoteEnhancer, RemoteEnhancerConfig, RemoteError};

pub const VLM_INSTRUCTIONS: &str = include_str!("../../assets/vlm_instructions.txt");
pub const LLM_INSTRUCTIONS: &str = include_str!("../../assets/llm_instructions.txt");

/// Where an augmented condition came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Posterior {
        sample: usize,
        perspective: usize,
        /// The output equals the anchor in every value.
        degenerate: bool,
    },
    Prior {
        op: EditOp,
        slot: usize,
    },
    Remote {
        digest: String,
        retries: u32,
    },
    Identity,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCondition {
    pub condition: Condition,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentedConditionSet {
    pub items: Vec<AugmentedCondition>,
    /// The prior enhancer ran out of attempts before finding `K` novel
    /// conditions.
    pub saturated: bool,
}

impl AugmentedConditionSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn conditions(&self) -> impl Iterator<Item = &Condition> {
        self.items.iter().map(|a| &a.condition)
    }
}

/// A descriptive perspective: an instruction and the style slots it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Perspective {
    pub instruction: String,
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveSet(Vec<Perspective>);

impl PerspectiveSet {
    pub fn new(perspectives: Vec<Perspective>) -> Result<Self> {
        if perspectives.is_empty() {
            return Err(Error::invalid("perspective set is empty"));
        }
        if let Some(p) = perspectives.iter().find(|p| p.slots.is_empty()) {
            return Err(Error::invalid(format!("perspective {:?} names no slot", p.instruction)));
        }
        Ok(Self(perspectives))
    }

    /// Nine perspectives, one per bundled instruction, mapped onto style
    /// slot subsets: singles first, then pairs at growing stride, then all
    /// style slots together. Subsets repeat when the layout has too few
    /// style slots to fill nine distinct ones.
    pub fn default_for(layout: AttributeLayout) -> Result<Self> {
        let style: Vec<usize> = layout.style_slots().collect();
        if style.is_empty() {
            return Err(Error::invalid("posterior perspectives need at least one style slot"));
        }
        let mut subsets: Vec<Vec<usize>> = style.iter().map(|&s| vec![s]).collect();
        for stride in 1..style.len() {
            for i in 0..style.len() - stride {
                subsets.push(vec![style[i], style[i + stride]]);
            }
        }
        if style.len() > 2 {
            subsets.push(style.clone());
        }
        let perspectives = VLM_INSTRUCTIONS
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| Perspective {
                instruction: line.trim().to_string(),
                slots: subsets[i % subsets.len()].clone(),
            })
            .collect();
        Self::new(perspectives)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> &Perspective {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Add,
    Delete,
    Paraphrase,
}

impl EditOp {
    pub const ALL: [EditOp; 3] = [EditOp::Add, EditOp::Delete, EditOp::Paraphrase];

    /// The bundled instruction text of this operation.
    pub fn instruction(self) -> &'static str {
        let idx = match self {
            EditOp::Add => 0,
            EditOp::Delete => 1,
            EditOp::Paraphrase => 2,
        };
        LLM_INSTRUCTIONS.lines().nth(idx).unwrap_or_default().trim()
    }
}

/// Parameters of the edit operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditOpSet {
    /// Standard deviation of the paraphrase jitter.
    pub jitter: f64,
}

impl Default for EditOpSet {
    fn default() -> Self {
        Self { jitter: 0.15 }
    }
}

/// Bounded FIFO set of canonical condition keys.
#[derive(Debug, Clone)]
pub struct EnhancerMemory {
    capacity: usize,
    order: VecDeque<Vec<i64>>,
    keys: HashSet<Vec<i64>>,
}

impl EnhancerMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            order: VecDeque::new(),
            keys: HashSet::new(),
        }
    }

    /// Mask bits followed by values rounded to 1e-3.
    pub fn key(c: &Condition) -> Vec<i64> {
        c.slots()
            .iter()
            .map(|v| match v {
                Some(v) => (v * 1000.0).round() as i64 * 2 + 1,
                None => 0,
            })
            .collect()
    }

    pub fn contains(&self, c: &Condition) -> bool {
        self.keys.contains(&Self::key(c))
    }

    /// Inserts `c`; returns false if it was already remembered.
    pub fn insert(&mut self, c: &Condition) -> bool {
        if self.capacity == 0 {
            return true;
        }
        let key = Self::key(c);
        if self.keys.contains(&key) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.keys.remove(&old);
            }
        }
        self.keys.insert(key.clone());
        self.order.push_back(key);
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Keys in insertion order, oldest first.
    pub fn keys(&self) -> Vec<Vec<i64>> {
        self.order.iter().cloned().collect()
    }

    /// Replaces the contents with `keys` (oldest first).
    pub fn restore(&mut self, keys: &[Vec<i64>]) {
        self.order.clear();
        self.keys.clear();
        let skip = keys.len().saturating_sub(self.capacity);
        for k in &keys[skip..] {
            if self.keys.insert(k.clone()) {
                self.order.push_back(k.clone());
            }
        }
    }
}

/// Builds a condition whose values move from `anchor` toward `target`
/// (same layout, `None` meaning "keep the anchor slot") while keeping the
/// embedding within `bound` of the anchor's.
///
/// Newly added slots cost one unit of squared distance each for the mask
/// bit; at most `floor(bound^2)` of them are kept. Value changes are then
/// scaled by a common factor to fit the remaining budget.
pub fn limit_to_bound(anchor: &Condition, target: &[Option<f64>], bound: f64) -> Result<Condition> {
    let mut added = 0usize;
    let max_added = (bound * bound * (1.0 - 1e-12)).floor() as usize;
    let mut changes: Vec<(usize, f64, f64)> = Vec::new();
    for (a, t) in target.iter().enumerate() {
        let Some(t) = t else { continue };
        match anchor.get(a) {
            Some(old) => changes.push((a, old, t - old)),
            None if added < max_added => {
                added += 1;
                changes.push((a, 0.0, *t));
            }
            None => {}
        }
    }
    let budget = bound * bound - added as f64;
    let norm2: f64 = changes.iter().map(|(_, _, d)| d * d).sum();
    let scale = if norm2 > budget {
        (budget.max(0.0) / norm2).sqrt() * (1.0 - 1e-12)
    } else {
        1.0
    };
    let mut slots = anchor.slots().to_vec();
    for (a, base, delta) in changes {
        slots[a] = Some((base + scale * delta).clamp(-VALUE_LIMIT, VALUE_LIMIT));
    }
    Condition::new(anchor.layout(), slots)
}

/// Posterior enhancement: output `k` reads the style features of sample
/// `k` (a random permutation of the group) through a random perspective.
pub fn enhance_posterior<R: Rng + ?Sized>(
    c: &Condition,
    samples: &[Vec<f64>],
    k: usize,
    perspectives: &PerspectiveSet,
    bound: f64,
    rng: &mut R,
) -> Result<AugmentedConditionSet> {
    if k > samples.len() {
        return Err(Error::invalid(format!(
            "posterior enhancer asked for {k} conditions from {} samples",
            samples.len()
        )));
    }
    let layout = c.layout();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut items = Vec::with_capacity(k);
    for &sample in &order[..k] {
        let features = extract_features(&samples[sample], layout)?;
        let perspective = rng.random_range(0..perspectives.len());
        let mut target = vec![None; layout.len()];
        for &slot in &perspectives.get(perspective).slots {
            target[slot] = Some(features[slot]);
        }
        let condition = limit_to_bound(c, &target, bound)?;
        let degenerate = condition == *c;
        items.push(AugmentedCondition {
            condition,
            provenance: Provenance::Posterior {
                sample,
                perspective,
                degenerate,
            },
        });
    }
    Ok(AugmentedConditionSet { items, saturated: false })
}

fn applicable_ops(c: &Condition, bound: f64) -> Vec<(EditOp, Vec<usize>)> {
    let layout = c.layout();
    let absent: Vec<usize> = layout.style_slots().filter(|&a| c.get(a).is_none()).collect();
    // Removing slot a moves the embedding by sqrt(1 + value^2).
    let deletable: Vec<usize> = layout
        .style_slots()
        .filter(|&a| c.get(a).is_some_and(|v| (1.0 + v * v).sqrt() <= bound))
        .collect();
    let present: Vec<usize> = c.present_slots().map(|(a, _)| a).collect();
    let mut ops = Vec::new();
    if !absent.is_empty() && bound >= 1.0 {
        ops.push((EditOp::Add, absent));
    }
    if !deletable.is_empty() {
        ops.push((EditOp::Delete, deletable));
    }
    ops.push((EditOp::Paraphrase, present));
    ops
}

fn apply_op<R: Rng + ?Sized>(
    c: &Condition,
    op: EditOp,
    slot: usize,
    spec: &ToyDataSpec,
    edits: &EditOpSet,
    bound: f64,
    rng: &mut R,
) -> Result<Condition> {
    match op {
        EditOp::Add => {
            let mut target = vec![None; c.layout().len()];
            target[slot] = Some(spec.sample_style_prior(rng).clamp(-VALUE_LIMIT, VALUE_LIMIT));
            limit_to_bound(c, &target, bound)
        }
        EditOp::Delete => c.with_slot(slot, None),
        EditOp::Paraphrase => {
            let old = c.get(slot).expect("paraphrase targets a present slot");
            let mut target = vec![None; c.layout().len()];
            target[slot] = Some(old + edits.jitter * standard_normal(rng));
            limit_to_bound(c, &target, bound)
        }
    }
}

/// Prior enhancement: each output applies one uniformly drawn applicable
/// edit. Outputs already in `memory` (or equal to the anchor) are
/// rejected; accepted outputs are remembered.
pub fn enhance_prior<R: Rng + ?Sized>(
    c: &Condition,
    k: usize,
    spec: &ToyDataSpec,
    edits: &EditOpSet,
    memory: &mut EnhancerMemory,
    bound: f64,
    rng: &mut R,
) -> Result<AugmentedConditionSet> {
    if k == 0 {
        return Err(Error::invalid("prior enhancer needs K >= 1"));
    }
    if !(edits.jitter > 0.0) {
        return Err(Error::invalid("paraphrase jitter must be positive"));
    }
    let ops = applicable_ops(c, bound);
    let anchor_key = EnhancerMemory::key(c);
    let mut items = Vec::with_capacity(k);
    let mut attempts = 0;
    while items.len() < k && attempts < 100 * k {
        attempts += 1;
        let (op, slots) = &ops[rng.random_range(0..ops.len())];
        let slot = slots[rng.random_range(0..slots.len())];
        let candidate = apply_op(c, *op, slot, spec, edits, bound, rng)?;
        if EnhancerMemory::key(&candidate) == anchor_key || !memory.insert(&candidate) {
            continue;
        }
        items.push(AugmentedCondition {
            condition: candidate,
            provenance: Provenance::Prior { op: *op, slot },
        });
    }
    let saturated = items.len() < k;
    Ok(AugmentedConditionSet { items, saturated })
}

/// `k` copies of the anchor.
pub fn enhance_identity(c: &Condition, k: usize) -> AugmentedConditionSet {
    AugmentedConditionSet {
        items: (0..k)
            .map(|_| AugmentedCondition {
                condition: c.clone(),
                provenance: Provenance::Identity,
            })
            .collect(),
        saturated: false,
    }
}

/// Control: conditions with the anchor's present slots but fresh values
/// drawn from the prompt prior, unrelated to the anchor or the samples.
pub fn enhance_random<R: Rng + ?Sized>(c: &Condition, k: usize, spec: &ToyDataSpec, rng: &mut R) -> Result<AugmentedConditionSet> {
    let layout = c.layout();
    let r = spec.subject_range;
    let mut items = Vec::with_capacity(k);
    for _ in 0..k {
        let slots = c
            .slots()
            .iter()
            .enumerate()
            .map(|(a, v)| {
                v.map(|_| {
                    if layout.is_subject(a) {
                        rng.random_range(-r..=r)
                    } else {
                        spec.sample_style_prior(rng).clamp(-VALUE_LIMIT, VALUE_LIMIT)
                    }
                })
            })
            .collect();
        items.push(AugmentedCondition {
            condition: Condition::new(layout, slots)?,
            provenance: Provenance::Random,
        });
    }
    Ok(AugmentedConditionSet { items, saturated: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhancerKind {
    Posterior,
    Prior,
    Identity,
    Random,
    Remote,
}

impl EnhancerKind {
    pub fn name(self) -> &'static str {
        match self {
            EnhancerKind::Posterior => "posterior",
            EnhancerKind::Prior => "prior",
            EnhancerKind::Identity => "identity",
            EnhancerKind::Random => "random",
            EnhancerKind::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerConfig {
    pub kind: EnhancerKind,
    /// Maximum embedding distance between an augmented condition and its
    /// anchor.
    pub adjacency_bound: f64,
    pub edits: EditOpSet,
    pub memory_capacity: usize,
    pub remote: Option<RemoteEnhancerConfig>,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            kind: EnhancerKind::Posterior,
            adjacency_bound: 1.5,
            edits: EditOpSet::default(),
            memory_capacity: 256,
            remote: None,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adjacency_bound > 0.0 && self.adjacency_bound.is_finite()) {
            return Err(Error::config("enhancer.adjacency_bound", "must be positive"));
        }
        if !(self.edits.jitter > 0.0 && self.edits.jitter.is_finite()) {
            return Err(Error::config("enhancer.edits.jitter", "must be positive"));
        }
        match (&self.kind, &self.remote) {
            (EnhancerKind::Remote, None) => Err(Error::config("enhancer.remote", "required when kind = \"remote\"")),
            (_, Some(r)) => r.validate(),
            _ => Ok(()),
        }
    }
}

/// A configured enhancer together with its mutable state.
#[derive(Debug)]
pub enum Enhancer {
    Posterior { perspectives: PerspectiveSet, bound: f64 },
    Prior { spec: ToyDataSpec, edits: EditOpSet, memory: EnhancerMemory, bound: f64 },
    Identity,
    Random { spec: ToyDataSpec },
    Remote(RemoteEnhancer),
}

impl Enhancer {
    pub fn from_config(cfg: &EnhancerConfig, spec: &ToyDataSpec) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            EnhancerKind::Posterior => Enhancer::Posterior {
                perspectives: PerspectiveSet::default_for(spec.layout)?,
                bound: cfg.adjacency_bound,
            },
            EnhancerKind::Prior => Enhancer::Prior {
                spec: spec.clone(),
                edits: cfg.edits.clone(),
                memory: EnhancerMemory::new(cfg.memory_capacity),
                bound: cfg.adjacency_bound,
            },
            EnhancerKind::Identity => Enhancer::Identity,
            EnhancerKind::Random => Enhancer::Random { spec: spec.clone() },
            EnhancerKind::Remote => {
                let remote = cfg.remote.clone().expect("validated above");
                Enhancer::Remote(RemoteEnhancer::new(remote, spec.layout)?)
            }
        })
    }

    /// Keys remembered by the prior enhancer; empty for the others.
    pub fn memory_keys(&self) -> Vec<Vec<i64>> {
        match self {
            Enhancer::Prior { memory, .. } => memory.keys(),
            _ => Vec::new(),
        }
    }

    pub fn restore_memory(&mut self, keys: &[Vec<i64>]) {
        if let Enhancer::Prior { memory, .. } = self {
            memory.restore(keys);
        }
    }

    /// Produces up to `k` augmented conditions for anchor `c` given the
    /// group's final samples.
    pub fn enhance<R: Rng + ?Sized>(
        &mut self,
        c: &Condition,
        samples: &[Vec<f64>],
        k: usize,
        rng: &mut R,
    ) -> Result<AugmentedConditionSet> {
        if k == 0 {
            return Ok(AugmentedConditionSet::default());
        }
        match self {
            Enhancer::Posterior { perspectives, bound } => enhance_posterior(c, samples, k, perspectives, *bound, rng),
            Enhancer::Prior {
                spec,
                edits,
                memory,
                bound,
            } => enhance_prior(c, k, spec, edits, memory, *bound, rng),
            Enhancer::Identity => Ok(enhance_identity(c, k)),
            Enhancer::Random { spec } => enhance_random(c, k, spec, rng),
            Enhancer::Remote(remote) => {
                let features = samples
                    .iter()
                    .map(|x| extract_features(x, c.layout()))
                    .collect::<Result<Vec<_>>>()?;
                let pick = if features.is_empty() { None } else { Some(features.as_slice()) };
                Ok(remote.enhance(c, k, pick)?)
            }
        }
    }
}
