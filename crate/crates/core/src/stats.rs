//! Two-sided Mann–Whitney U test.
//!
//! Exact enumeration over all group assignments of the pooled mid-ranks
//! when both groups have at most [`EXACT_MAX`] members, normal
//! approximation with tie and continuity correction otherwise.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const EXACT_MAX: usize = 8;
/// Scores closer than this count as equally extreme.
const EXTREME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of the first group: pairs `(x, y)` with `x > y`, ties counting ½.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Mid-ranks (1-based) of `values`.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Invalid("Mann–Whitney U needs two non-empty groups".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("Mann–Whitney U input contains non-finite values".into()));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = mid_ranks(&pooled);
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - offset;
    let mean = (n1 * n2) as f64 / 2.0;

    if n1 <= EXACT_MAX && n2 <= EXACT_MAX {
        let observed = (u - mean).abs();
        let mut extreme = 0u64;
        let mut total = 0u64;
        for_each_combination(ranks.len(), n1, &mut |chosen| {
            let r: f64 = chosen.iter().map(|&i| ranks[i]).sum();
            total += 1;
            if ((r - offset) - mean).abs() >= observed - EXTREME_TOL {
                extreme += 1;
            }
        });
        return Ok(MannWhitney {
            u,
            p_value: extreme as f64 / total as f64,
            exact: true,
        });
    }

    let n = (n1 + n2) as f64;
    let mut tie_sum = 0.0;
    let mut sorted = pooled;
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_sum += t * t * t - t;
        i = j;
    }
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney {
            u,
            p_value: 1.0,
            exact: false,
        });
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::standard();
    let p = (2.0 * std_normal.sf(z)).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(MannWhitney {
        u,
        p_value: p,
        exact: false,
    })
}

/// Calls `f` with every `k`-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_small_case() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn identical_groups_give_one() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let big: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(mann_whitney_u(&big, &big).unwrap().p_value, 1.0);
    }

    #[test]
    fn combinations_are_complete() {
        let mut n = 0;
        for_each_combination(6, 3, &mut |_| n += 1);
        assert_eq!(n, 20);
        let mut n = 0;
        for_each_combination(4, 0, &mut |c| {
            assert!(c.is_empty());
            n += 1
        });
        assert_eq!(n, 1);
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn approximation_is_close_to_exact_for_moderate_sizes() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 1.3).collect();
        let y: Vec<f64> = (0..8).map(|i| i as f64 * 1.1 + 2.0).collect();
        let exact = mann_whitney_u(&x, &y).unwrap();
        let mut x9 = x.clone();
        x9.push(4.1);
        let approx = mann_whitney_u(&x9, &y).unwrap();
        assert!(!approx.exact);
        assert!((exact.p_value - approx.p_value).abs() < 0.2);
    }

    #[test]
    fn rejects_empty_groups() {
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }
}
