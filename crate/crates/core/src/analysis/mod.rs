//! Post-hoc metrics over allocation plans and rank-preserving perturbations.

mod report;

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{apportion_uniform_bounds, AllocationPlan, ModuleAllocation, ModuleGroup, PlanSource, TieBreak};
use crate::error::{Error, Result};

pub use report::{emit_report, ed_bin, ReportMetric, ED_BINS};

/// Expert diversity: the largest subset of experts with pairwise distinct
/// ranks, as a fraction of all experts.
pub fn ed_score(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("ed_score of an empty rank list".into()));
    }
    let distinct = ranks.iter().collect::<BTreeSet<_>>().len();
    Ok(distinct as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RangeTotals {
    pub start: usize,
    pub end: usize,
    pub total_rank: usize,
    pub total_experts: usize,
}

/// Sums ranks and expert counts over each 0-based half-open layer range,
/// restricted to the targets of `group`.
pub fn layer_range_totals(plan: &AllocationPlan, ranges: &[Range<usize>], group: ModuleGroup) -> Result<Vec<RangeTotals>> {
    let depth = plan.layers.len();
    for (i, r) in ranges.iter().enumerate() {
        if r.is_empty() || r.end > depth {
            return Err(Error::InvalidArgument(format!(
                "layer range {}..{} invalid for {depth} layers",
                r.start, r.end
            )));
        }
        if let Some(o) = ranges[..i].iter().find(|o| o.start < r.end && r.start < o.end) {
            return Err(Error::InvalidArgument(format!(
                "layer ranges {}..{} and {}..{} overlap",
                o.start, o.end, r.start, r.end
            )));
        }
    }
    Ok(ranges
        .iter()
        .map(|r| {
            let modules = plan
                .modules()
                .filter(|(l, t, _)| r.contains(l) && t.group() == group)
                .map(|(_, _, m)| m);
            let (total_rank, total_experts) =
                modules.fold((0, 0), |(tr, te), m| (tr + m.total_rank(), te + m.expert_count));
            RangeTotals {
                start: r.start,
                end: r.end,
                total_rank,
                total_experts,
            }
        })
        .collect())
}

/// `parts` contiguous ranges covering `0..layers` as evenly as possible.
pub fn even_ranges(layers: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, layers.max(1));
    (0..parts)
        .map(|i| i * layers / parts..(i + 1) * layers / parts)
        .filter(|r| !r.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationKind {
    #[serde(rename = "IEN")]
    Ien,
    #[serde(rename = "DEN")]
    Den,
    #[serde(rename = "MRA_half")]
    MraHalf,
    #[serde(rename = "MRA_random")]
    MraRandom,
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IEN" => Ok(PerturbationKind::Ien),
            "DEN" => Ok(PerturbationKind::Den),
            "MRA_half" => Ok(PerturbationKind::MraHalf),
            "MRA_random" => Ok(PerturbationKind::MraRandom),
            _ => Err(Error::InvalidArgument(format!(
                "unknown perturbation '{s}' (expected IEN, DEN, MRA_half or MRA_random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// 0-based layer index.
    pub layer: usize,
    pub amount: usize,
    pub seed: u64,
}

/// Applies `spec` to every module of one layer, keeping each module's total
/// rank. Other layers are copied unchanged.
pub fn perturb(plan: &AllocationPlan, spec: &PerturbationSpec) -> Result<AllocationPlan> {
    plan.validate()?;
    if spec.layer >= plan.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "layer {} outside model depth {}",
            spec.layer,
            plan.layers.len()
        )));
    }
    if spec.amount == 0 && spec.kind != PerturbationKind::MraRandom {
        return Err(Error::InvalidArgument("perturbation amount must be at least 1".into()));
    }
    let (e_max, r_max) = (plan.metadata.e_max, plan.metadata.r_max);
    let mut out = plan.clone();
    out.metadata.source = PlanSource::Perturbed;
    out.metadata.seed = spec.seed;
    for (t, m) in out.layers[spec.layer].iter_mut() {
        let ranks = perturb_module(&m.ranks, spec, e_max, r_max)
            .map_err(|e| Error::Infeasible(format!("layer {} module {t}: {e}", spec.layer)))?;
        *m = ModuleAllocation::new(ranks);
    }
    out.validate()?;
    Ok(out)
}

fn perturb_module(ranks: &[usize], spec: &PerturbationSpec, e_max: usize, r_max: usize) -> Result<Vec<usize>> {
    let n = ranks.len();
    let total: usize = ranks.iter().sum();
    let rescale = |weights: Vec<f64>| -> Result<Vec<usize>> {
        Ok(apportion_uniform_bounds(&weights, total as u64, 1, r_max as u64, TieBreak::LowestIndex)?
            .into_iter()
            .map(|r| r as usize)
            .collect())
    };
    match spec.kind {
        PerturbationKind::Ien => {
            let e = n + spec.amount;
            if e > e_max {
                return Err(Error::Infeasible(format!("{e} experts exceed e_max {e_max}")));
            }
            let mean = total as f64 / n as f64;
            let weights = ranks.iter().map(|&r| r as f64).chain(std::iter::repeat_n(mean, spec.amount));
            rescale(weights.collect())
        }
        PerturbationKind::Den => {
            if spec.amount >= n {
                return Err(Error::Infeasible(format!(
                    "removing {} of {n} experts leaves none",
                    spec.amount
                )));
            }
            rescale(ranks[..n - spec.amount].iter().map(|&r| r as f64).collect())
        }
        PerturbationKind::MraHalf => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (ranks[i], i));
            let raised = n.div_ceil(2);
            let mut out = ranks.to_vec();
            for (pos, &i) in order.iter().enumerate() {
                if pos < raised {
                    // With an odd count the last raised expert keeps its rank
                    // so the module total is unchanged.
                    if !(n % 2 == 1 && pos == raised - 1) {
                        out[i] += spec.amount;
                    }
                } else {
                    out[i] = out[i]
                        .checked_sub(spec.amount)
                        .filter(|&r| r >= 1)
                        .ok_or_else(|| Error::Infeasible(format!("rank {} cannot drop by {}", ranks[i], spec.amount)))?;
                }
            }
            if let Some(r) = out.iter().find(|&&r| r > r_max) {
                return Err(Error::Infeasible(format!("rank {r} exceeds r_max {r_max}")));
            }
            Ok(out)
        }
        PerturbationKind::MraRandom => {
            let mut out = ranks.to_vec();
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub level: String,
    pub avg_experts: f64,
    pub avg_rank: f64,
}

/// Mean expert count over modules and mean rank over experts of one plan.
pub fn plan_averages(plan: &AllocationPlan) -> (f64, f64) {
    let modules = plan.modules().count();
    (
        plan.total_experts() as f64 / modules as f64,
        plan.total_rank() as f64 / plan.total_experts() as f64,
    )
}

pub fn difficulty_ladder_stats(levels: &[(String, AllocationPlan)]) -> Result<Vec<LadderRow>> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("difficulty ladder needs at least one plan".into()));
    }
    levels
        .iter()
        .map(|(level, plan)| {
            plan.validate()?;
            let (avg_experts, avg_rank) = plan_averages(plan);
            Ok(LadderRow {
                level: level.clone(),
                avg_experts,
                avg_rank,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{uniform_allocation, PlanShape, Target};

    fn shape() -> PlanShape {
        PlanShape::new(8, &Target::ALL, 8, 8).unwrap()
    }

    fn with_ranks(ranks: Vec<usize>) -> AllocationPlan {
        let mut plan = uniform_allocation(&shape(), 1, 1).unwrap();
        for m in plan.layers[2].values_mut() {
            *m = ModuleAllocation::new(ranks.clone());
        }
        plan
    }

    fn spec(kind: PerturbationKind, amount: usize) -> PerturbationSpec {
        PerturbationSpec {
            kind,
            layer: 2,
            amount,
            seed: 11,
        }
    }

    #[test]
    fn ed_examples() {
        assert_eq!(ed_score(&[3, 5, 6, 3, 7]).unwrap(), 0.8);
        assert_eq!(ed_score(&[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(ed_score(&[4, 4, 4]).unwrap(), 1.0 / 3.0);
        assert!(ed_score(&[]).is_err());
    }

    #[test]
    fn range_totals() {
        let plan = uniform_allocation(&shape(), 5, 8).unwrap();
        let t = layer_range_totals(&plan, &[0..4], ModuleGroup::Ffn).unwrap();
        assert_eq!(t[0].total_rank, 480);
        let parts = layer_range_totals(&plan, &even_ranges(8, 3), ModuleGroup::Mha).unwrap();
        assert_eq!(parts.iter().map(|r| r.total_rank).sum::<usize>(), 8 * 4 * 40);
        assert!(layer_range_totals(&plan, &[0..4, 3..5], ModuleGroup::Mha).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let p = perturb(&with_ranks(vec![5, 2, 8]), &spec(PerturbationKind::MraRandom, 1)).unwrap();
        let mut r = p.module(2, Target::Q).unwrap().ranks.clone();
        r.sort();
        assert_eq!(r, vec![2, 5, 8]);

        let p = perturb(&with_ranks(vec![4, 4, 6, 6]), &spec(PerturbationKind::MraHalf, 1)).unwrap();
        assert_eq!(p.module(2, Target::Up).unwrap().ranks, vec![5, 5, 5, 5]);

        let p = perturb(&with_ranks(vec![8, 8, 8, 8]), &spec(PerturbationKind::Ien, 1)).unwrap();
        assert_eq!(p.module(2, Target::K).unwrap().ranks, vec![7, 7, 6, 6, 6]);
        assert_eq!(p.metadata.source, PlanSource::Perturbed);

        let p = perturb(&with_ranks(vec![2, 2, 2]), &spec(PerturbationKind::Den, 1)).unwrap();
        assert_eq!(p.module(2, Target::O).unwrap().ranks, vec![3, 3]);

        let p = perturb(&with_ranks(vec![3, 5, 7]), &spec(PerturbationKind::MraHalf, 2)).unwrap();
        assert_eq!(p.module(2, Target::V).unwrap().ranks, vec![5, 5, 5]);
    }

    #[test]
    fn infeasible_perturbations_fail() {
        assert!(perturb(&with_ranks(vec![4]), &spec(PerturbationKind::Den, 1)).is_err());
        assert!(perturb(&with_ranks(vec![8; 8]), &spec(PerturbationKind::Ien, 1)).is_err());
        assert!(perturb(&with_ranks(vec![8, 8, 8]), &spec(PerturbationKind::Den, 1)).is_err());
        assert!(perturb(&with_ranks(vec![1, 1]), &spec(PerturbationKind::MraHalf, 1)).is_err());
        let mut s = spec(PerturbationKind::Ien, 1);
        s.layer = 8;
        assert!(perturb(&with_ranks(vec![2]), &s).is_err());
    }

    #[test]
    fn ladder_rows() {
        let plan = uniform_allocation(&shape(), 5, 8).unwrap();
        let rows = difficulty_ladder_stats(&[("K=3".into(), plan.clone()), ("K=5".into(), plan)]).unwrap();
        assert_eq!((rows[0].avg_experts, rows[0].avg_rank), (5.0, 8.0));
        assert_eq!(rows[0].avg_experts, rows[1].avg_experts);
        assert!(difficulty_ladder_stats(&[]).is_err());
    }
}
