//! Allocation plans: per-layer, per-projection expert counts and ranks.
//!
//! Plans come from searched selection vectors ([`extract_plan`]) or from the
//! fixed baselines ([`uniform_allocation`], [`mola_group_allocation`],
//! [`normal_e_allocation`] with [`normal_r_allocation`]).

pub mod apportion;

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsv::GuidedSelectionVector;
use crate::lora_moe::{LoraMoeLayerState, MaterializedLayer};
use crate::numerics::Scalar;

pub use apportion::{apportion, apportion_uniform_bounds, TieBreak};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Adapted projection matrices. The derived order (attention first, then
/// feed-forward) is the order used everywhere plans are listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Target {
    pub const ALL: [Target; 7] = [
        Target::Q,
        Target::K,
        Target::V,
        Target::O,
        Target::Gate,
        Target::Up,
        Target::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
            Target::Gate => "gate",
            Target::Up => "up",
            Target::Down => "down",
        }
    }

    pub fn group(self) -> ModuleGroup {
        match self {
            Target::Q | Target::K | Target::V | Target::O => ModuleGroup::Mha,
            Target::Gate | Target::Up | Target::Down => ModuleGroup::Ffn,
        }
    }

    /// `(d1, d2)`: output and input width of the projection.
    pub fn dims(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            Target::Q | Target::K | Target::V | Target::O => (d_model, d_model),
            Target::Gate | Target::Up => (d_ff, d_model),
            Target::Down => (d_model, d_ff),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown target matrix '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleGroup {
    Mha,
    Ffn,
}

impl ModuleGroup {
    pub fn targets(self) -> &'static [Target] {
        match self {
            ModuleGroup::Mha => &Target::ALL[..4],
            ModuleGroup::Ffn => &Target::ALL[4..],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Guilomo,
    Uniform,
    MolaGroup,
    NormalER,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleAllocation {
    pub expert_count: usize,
    pub ranks: Vec<usize>,
}

impl ModuleAllocation {
    pub fn new(ranks: Vec<usize>) -> Self {
        ModuleAllocation {
            expert_count: ranks.len(),
            ranks,
        }
    }

    pub fn total_rank(&self) -> usize {
        self.ranks.iter().sum()
    }

    pub fn validate(&self, e_max: usize, r_max: usize) -> Result<()> {
        if self.expert_count == 0 || self.expert_count > e_max {
            return Err(Error::InvalidPlan(format!(
                "expert_count {} outside [1, {e_max}]",
                self.expert_count
            )));
        }
        if self.ranks.len() != self.expert_count {
            return Err(Error::InvalidPlan(format!(
                "{} ranks listed for expert_count {}",
                self.ranks.len(),
                self.expert_count
            )));
        }
        if let Some(r) = self.ranks.iter().find(|&&r| r == 0 || r > r_max) {
            return Err(Error::InvalidPlan(format!("rank {r} outside [1, {r_max}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanMetadata {
    pub e_max: usize,
    pub r_max: usize,
    pub source: PlanSource,
    pub seed: u64,
}

pub type LayerPlan = BTreeMap<Target, ModuleAllocation>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub schema_version: u32,
    pub metadata: PlanMetadata,
    pub layers: Vec<LayerPlan>,
}

impl AllocationPlan {
    pub fn new(metadata: PlanMetadata, layers: Vec<LayerPlan>) -> Result<Self> {
        let plan = AllocationPlan {
            schema_version: PLAN_SCHEMA_VERSION,
            metadata,
            layers,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::InvalidPlan(format!(
                "schema_version {} (expected {PLAN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let PlanMetadata { e_max, r_max, .. } = self.metadata;
        if e_max == 0 || r_max == 0 {
            return Err(Error::InvalidPlan("e_max and r_max must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidPlan("plan has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::InvalidPlan(format!("layer {l} has no modules")));
            }
            for (t, m) in layer {
                m.validate(e_max, r_max)
                    .map_err(|e| Error::InvalidPlan(format!("layer {l} module {t}: {}", inner_message(e))))?;
            }
        }
        Ok(())
    }

    pub fn module(&self, layer: usize, target: Target) -> Option<&ModuleAllocation> {
        self.layers.get(layer).and_then(|l| l.get(&target))
    }

    /// Every `(layer, target, allocation)` in plan order.
    pub fn modules(&self) -> impl Iterator<Item = (usize, Target, &ModuleAllocation)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.iter().map(move |(t, m)| (l, *t, m)))
    }

    pub fn total_rank(&self) -> usize {
        self.modules().map(|(_, _, m)| m.total_rank()).sum()
    }

    pub fn total_experts(&self) -> usize {
        self.modules().map(|(_, _, m)| m.expert_count).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: AllocationPlan =
            serde_json::from_str(s).map_err(|e| Error::InvalidPlan(format!("malformed plan file: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Closed-form trainable count `Σ_modules [Σ_j (d1 + d2 + 1) r_j + d2 e]`.
    pub fn trainable_count(&self, d_model: usize, d_ff: usize) -> usize {
        self.modules()
            .map(|(_, t, m)| {
                let (d1, d2) = t.dims(d_model, d_ff);
                (d1 + d2 + 1) * m.total_rank() + d2 * m.expert_count
            })
            .sum()
    }
}

fn inner_message(e: Error) -> String {
    match e {
        Error::InvalidPlan(m) => m,
        other => other.to_string(),
    }
}

/// Layer count, adapted targets and bounds shared by the baseline allocators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanShape {
    pub layers: usize,
    pub targets: Vec<Target>,
    pub e_max: usize,
    pub r_max: usize,
}

impl PlanShape {
    pub fn new(layers: usize, targets: &[Target], e_max: usize, r_max: usize) -> Result<Self> {
        if layers == 0 || targets.is_empty() || e_max == 0 || r_max == 0 {
            return Err(Error::InvalidArgument(format!(
                "plan shape needs positive sizes (layers {layers}, {} targets, e_max {e_max}, r_max {r_max})",
                targets.len()
            )));
        }
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        Ok(PlanShape {
            layers,
            targets,
            e_max,
            r_max,
        })
    }

    fn metadata(&self, source: PlanSource, seed: u64) -> PlanMetadata {
        PlanMetadata {
            e_max: self.e_max,
            r_max: self.r_max,
            source,
            seed,
        }
    }

    fn build(&self, source: PlanSource, mut per_layer: impl FnMut(usize) -> Vec<usize>) -> Result<AllocationPlan> {
        let layers = (0..self.layers)
            .map(|l| {
                let ranks = per_layer(l);
                self.targets
                    .iter()
                    .map(|&t| (t, ModuleAllocation::new(ranks.clone())))
                    .collect()
            })
            .collect();
        AllocationPlan::new(self.metadata(source, 0), layers)
    }
}

/// Expert count and ranks of one module from its selection vectors:
/// `e* = argmax g_E`, `r*_j = argmax g_R,j` for `j ≤ e*`.
pub fn extract_module<S: Scalar>(
    expert: &GuidedSelectionVector<S>,
    ranks: &[GuidedSelectionVector<S>],
) -> Result<ModuleAllocation> {
    let e = expert.selected_index();
    if ranks.len() < e {
        return Err(Error::InvalidArgument(format!(
            "expert count {e} selected but only {} rank vectors present",
            ranks.len()
        )));
    }
    Ok(ModuleAllocation::new(ranks[..e].iter().map(|g| g.selected_index()).collect()))
}

pub fn extract_plan<S: Scalar, L: Borrow<LoraMoeLayerState<S>>>(
    layers: &[BTreeMap<Target, L>],
    seed: u64,
) -> Result<AllocationPlan> {
    let first = layers
        .iter()
        .flat_map(|l| l.values())
        .map(|s| s.borrow())
        .next()
        .ok_or_else(|| Error::InvalidArgument("no adapted modules to extract".into()))?;
    let (e_max, r_max) = (first.e_max(), first.r_max());
    let plan_layers = layers
        .iter()
        .enumerate()
        .map(|(l, modules)| {
            modules
                .iter()
                .map(|(&t, state)| {
                    let state = state.borrow();
                    extract_module(&state.expert_gsv, &state.rank_gsvs)
                        .map(|m| (t, m))
                        .map_err(|e| Error::InvalidArgument(format!("layer {l} module {t}: {e}")))
                })
                .collect::<Result<LayerPlan>>()
        })
        .collect::<Result<Vec<_>>>()?;
    AllocationPlan::new(
        PlanMetadata {
            e_max,
            r_max,
            source: PlanSource::Guilomo,
            seed,
        },
        plan_layers,
    )
}

/// Prunes search-form layers to the plan, copying retained weights.
pub fn materialize<S: Scalar, L: Borrow<LoraMoeLayerState<S>>>(
    plan: &AllocationPlan,
    layers: &[BTreeMap<Target, L>],
) -> Result<Vec<BTreeMap<Target, MaterializedLayer<S>>>> {
    plan.validate()?;
    if plan.layers.len() != layers.len() {
        return Err(Error::InvalidPlan(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            layers.len()
        )));
    }
    plan.layers
        .iter()
        .zip(layers)
        .enumerate()
        .map(|(l, (lp, states))| {
            if lp.keys().ne(states.keys()) {
                return Err(Error::InvalidPlan(format!("layer {l}: plan and model adapt different targets")));
            }
            lp.iter()
                .map(|(&t, m)| {
                    let layer = states[&t]
                        .borrow()
                        .materialize(&m.ranks)
                        .map_err(|e| Error::InvalidPlan(format!("layer {l} module {t}: {}", inner_message(e))))?;
                    Ok((t, layer))
                })
                .collect()
        })
        .collect()
}

/// Every module gets `n_experts` experts of rank `rank`.
pub fn uniform_allocation(shape: &PlanShape, n_experts: usize, rank: usize) -> Result<AllocationPlan> {
    check_range("n_experts", n_experts, shape.e_max)?;
    check_range("rank", rank, shape.r_max)?;
    shape.build(PlanSource::Uniform, |_| vec![rank; n_experts])
}

/// Four equal contiguous layer groups; group `g` gets `group_counts[g]`
/// experts of rank `rank` in every module.
pub fn mola_group_allocation(shape: &PlanShape, group_counts: [usize; 4], rank: usize) -> Result<AllocationPlan> {
    if !shape.layers.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "layer count {} is not divisible into 4 groups",
            shape.layers
        )));
    }
    for &c in &group_counts {
        check_range("group expert count", c, shape.e_max)?;
    }
    check_range("rank", rank, shape.r_max)?;
    let per_group = shape.layers / 4;
    shape.build(PlanSource::MolaGroup, |l| vec![rank; group_counts[l / per_group]])
}

/// Uniform expert count `n_experts` in every module with ranks spread as
/// evenly as possible so the whole plan totals exactly `total_rank`.
pub fn uniform_with_total_rank(shape: &PlanShape, n_experts: usize, total_rank: usize) -> Result<AllocationPlan> {
    check_range("n_experts", n_experts, shape.e_max)?;
    let modules = shape.layers * shape.targets.len();
    let per_module = apportion_uniform_bounds(
        &vec![1.0; modules],
        total_rank as u64,
        n_experts as u64,
        (n_experts * shape.r_max) as u64,
        TieBreak::LowestIndex,
    )?;
    let layers = (0..shape.layers)
        .map(|l| {
            shape
                .targets
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let total = per_module[l * shape.targets.len() + i] as usize;
                    let ranks = (0..n_experts)
                        .map(|j| total / n_experts + usize::from(j < total % n_experts))
                        .collect();
                    (t, ModuleAllocation::new(ranks))
                })
                .collect()
        })
        .collect();
    AllocationPlan::new(shape.metadata(PlanSource::Uniform, 0), layers)
}

fn check_range(what: &str, v: usize, max: usize) -> Result<()> {
    if v == 0 || v > max {
        return Err(Error::InvalidArgument(format!("{what} {v} outside [1, {max}]")));
    }
    Ok(())
}

/// Standard normal density at `count` evenly spaced points of `[-2, 2]`.
pub fn normal_profile(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![1.0];
    }
    (0..count)
        .map(|i| {
            let x = 2.0 * (2.0 * i as f64 - (count - 1) as f64) / (count - 1) as f64;
            (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
        })
        .collect()
}

/// Per-layer expert counts proportional to the normal profile, at least one
/// and at most `e_max` per layer, summing to `budget`.
pub fn normal_e_allocation(layers: usize, budget: usize, e_max: usize) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::InvalidArgument("layer count must be positive".into()));
    }
    if budget < layers {
        return Err(Error::Infeasible(format!(
            "expert budget {budget} is below one expert for each of {layers} layers"
        )));
    }
    let counts = apportion_uniform_bounds(&normal_profile(layers), budget as u64, 1, e_max as u64, TieBreak::Mirrored)?;
    Ok(counts.into_iter().map(|c| c as usize).collect())
}

/// Splits a per-module rank budget across layers along the normal profile.
/// Layer `l` receives between `e_l` and `e_l · r_max` rank units, shared as
/// evenly as possible among its experts (earlier experts take the remainder).
pub fn normal_r_allocation(expert_counts: &[usize], budget: usize, r_max: usize) -> Result<Vec<Vec<usize>>> {
    if expert_counts.is_empty() || expert_counts.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "expert counts must be non-empty and positive, got {expert_counts:?}"
        )));
    }
    let lo: Vec<u64> = expert_counts.iter().map(|&e| e as u64).collect();
    let hi: Vec<u64> = expert_counts.iter().map(|&e| (e * r_max) as u64).collect();
    let shares = apportion(&normal_profile(expert_counts.len()), budget as u64, &lo, &hi, TieBreak::Mirrored)?;
    Ok(shares
        .iter()
        .zip(expert_counts)
        .map(|(&s, &e)| {
            let s = s as usize;
            (0..e).map(|j| s / e + usize::from(j < s % e)).collect()
        })
        .collect())
}

/// NormalE expert counts with NormalR ranks applied to every target.
pub fn normal_plan(shape: &PlanShape, expert_budget: usize, rank_budget: usize) -> Result<AllocationPlan> {
    let counts = normal_e_allocation(shape.layers, expert_budget, shape.e_max)?;
    let ranks = normal_r_allocation(&counts, rank_budget, shape.r_max)?;
    shape.build(PlanSource::NormalER, |l| ranks[l].clone())
}
