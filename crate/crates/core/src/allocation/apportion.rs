use crate::error::{Error, Result};

/// How equal remainders are ordered when handing out leftover units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    LowestIndex,
    /// Mirror positions `i` and `n-1-i` are adjacent in the ordering, so an
    /// even number of leftover units over symmetric weights stays symmetric.
    Mirrored,
}

/// Splits `total` integer units proportionally to `weights` with per-entry
/// bounds `lo[i] <= out[i] <= hi[i]`, using largest-remainder rounding.
///
/// Ideal shares are water-filled against the bounds first (entries whose
/// share falls outside their bounds are pinned and the rest re-split), then
/// floored, and the leftover units go to the largest fractional remainders.
/// The result always sums to exactly `total`.
pub fn apportion(weights: &[f64], total: u64, lo: &[u64], hi: &[u64], tie: TieBreak) -> Result<Vec<u64>> {
    let n = weights.len();
    if n == 0 || lo.len() != n || hi.len() != n {
        return Err(Error::InvalidArgument(format!(
            "apportion over {n} weights with {} lower and {} upper bounds",
            lo.len(),
            hi.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Err(Error::Infeasible("a lower bound exceeds its upper bound".into()));
    }
    let (min_total, max_total): (u64, u64) = (lo.iter().sum(), hi.iter().sum());
    if total < min_total || total > max_total {
        return Err(Error::Infeasible(format!(
            "budget {total} outside the feasible range [{min_total}, {max_total}]"
        )));
    }

    // Find the multiplier λ with Σ clamp(λ w_i, lo_i, hi_i) = total; the
    // entries clamped at that λ are pinned and the rest split exactly.
    let clamped_sum = |lambda: f64| -> f64 {
        (0..n)
            .map(|i| (lambda * weights[i]).clamp(lo[i] as f64, hi[i] as f64))
            .sum()
    };
    let (mut a, mut b) = (0.0f64, 1.0f64);
    while clamped_sum(b) < total as f64 && b < 1e300 {
        b *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if clamped_sum(mid) < total as f64 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let lambda = b;
    let pinned: Vec<Option<u64>> = (0..n)
        .map(|i| {
            let v = lambda * weights[i];
            if v <= lo[i] as f64 {
                Some(lo[i])
            } else if v >= hi[i] as f64 {
                Some(hi[i])
            } else {
                None
            }
        })
        .collect();
    let pinned_total: u64 = pinned.iter().flatten().sum();
    let free_weight: f64 = (0..n).filter(|&i| pinned[i].is_none()).map(|i| weights[i]).sum();
    let remaining = total.saturating_sub(pinned_total) as f64;
    let share: Vec<f64> = (0..n)
        .map(|i| match pinned[i] {
            Some(v) => v as f64,
            None => (remaining * weights[i] / free_weight).clamp(lo[i] as f64, hi[i] as f64),
        })
        .collect();

    let mut out: Vec<u64> = (0..n)
        .map(|i| match pinned[i] {
            Some(v) => v,
            None => (share[i].floor() as u64).clamp(lo[i], hi[i]),
        })
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();
    let rem = |i: usize| share[i] - share[i].floor();
    order.sort_by(|&a, &b| {
        rem(b)
            .partial_cmp(&rem(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| match tie {
                TieBreak::LowestIndex => std::cmp::Ordering::Equal,
                TieBreak::Mirrored => a.min(n - 1 - a).cmp(&b.min(n - 1 - b)),
            })
            .then(a.cmp(&b))
    });
    // Pinning at a bisection boundary can overshoot by a unit; take it back
    // from the smallest remainders.
    while out.iter().sum::<u64>() > total {
        let i = order
            .iter()
            .rev()
            .copied()
            .chain((0..n).rev())
            .find(|&i| out[i] > lo[i])
            .ok_or_else(|| Error::Infeasible("cannot meet lower bounds".into()))?;
        out[i] -= 1;
    }
    let mut leftover = total - out.iter().sum::<u64>();
    while leftover > 0 {
        let before = leftover;
        for &i in &order {
            if leftover == 0 {
                break;
            }
            if out[i] < hi[i] {
                out[i] += 1;
                leftover -= 1;
            }
        }
        if leftover == before {
            return Err(Error::Infeasible("no entry can absorb leftover units".into()));
        }
    }
    Ok(out)
}

/// [`apportion`] with the same bounds for every entry.
pub fn apportion_uniform_bounds(weights: &[f64], total: u64, lo: u64, hi: u64, tie: TieBreak) -> Result<Vec<u64>> {
    let n = weights.len();
    apportion(weights, total, &vec![lo; n], &vec![hi; n], tie)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rescaling_four_eights_into_five() {
        let out = apportion_uniform_bounds(&[8.0, 8.0, 8.0, 8.0, 8.0], 32, 1, 8, TieBreak::LowestIndex).unwrap();
        assert_eq!(out, vec![7, 7, 6, 6, 6]);
    }

    #[test]
    fn pins_at_bounds() {
        let out = apportion_uniform_bounds(&[100.0, 1.0, 1.0], 12, 1, 8, TieBreak::LowestIndex).unwrap();
        assert_eq!(out, vec![8, 2, 2]);
        let out = apportion_uniform_bounds(&[0.0, 1.0], 5, 1, 8, TieBreak::LowestIndex).unwrap();
        assert_eq!(out, vec![1, 4]);
    }

    #[test]
    fn infeasible_budgets_fail() {
        assert!(apportion_uniform_bounds(&[1.0, 1.0], 1, 1, 8, TieBreak::LowestIndex).is_err());
        assert!(apportion_uniform_bounds(&[1.0, 1.0], 17, 1, 8, TieBreak::LowestIndex).is_err());
    }

    #[test]
    fn mirrored_ties_stay_symmetric() {
        let w = [1.0, 2.0, 2.0, 1.0];
        let out = apportion_uniform_bounds(&w, 8, 0, 100, TieBreak::Mirrored).unwrap();
        assert_eq!(out, vec![1, 3, 3, 1]);
        let out = apportion_uniform_bounds(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 8, 0, 100, TieBreak::Mirrored).unwrap();
        assert_eq!(out, vec![2, 1, 1, 1, 1, 2]);
    }

    proptest! {
        #[test]
        fn conserves_total_and_respects_bounds(
            weights in prop::collection::vec(0.0f64..10.0, 1..12),
            lo in 0u64..3,
            span in 0u64..6,
            frac in 0.0f64..1.0,
        ) {
            let hi = lo + span;
            let n = weights.len() as u64;
            let total = n * lo + ((n * span) as f64 * frac).round() as u64;
            let out = apportion_uniform_bounds(&weights, total, lo, hi, TieBreak::LowestIndex).unwrap();
            prop_assert_eq!(out.iter().sum::<u64>(), total);
            prop_assert!(out.iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
