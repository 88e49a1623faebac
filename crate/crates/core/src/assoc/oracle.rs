//! Exhaustive-permutation assignment oracle.
//!
//! Verification-only counterpart to [`super::hungarian`]: enumerates every
//! injective mapping (feasible up to n ≈ 8) and applies the same
//! minimum-total, then lexicographically-smallest selection rule. The
//! implementation path is independent of the Hungarian solver.

use super::hungarian::{Assignment, CostMatrix};

fn enumerate(
    costs: &CostMatrix,
    row_idx: usize,
    cols_used: &mut Vec<bool>,
    current: &mut Vec<(usize, usize)>,
    best: &mut Option<(f64, Vec<(usize, usize)>)>,
) {
    let target = costs.rows().min(costs.cols());
    if current.len() == target {
        let pairs = current.clone();
        let total: f64 = pairs.iter().map(|&(r, c)| costs.at(r, c)).sum();
        let better = match best {
            None => true,
            Some((bt, bp)) => total < *bt || (total == *bt && pairs < *bp),
        };
        if better {
            *best = Some((total, pairs));
        }
        return;
    }
    if row_idx >= costs.rows() {
        return;
    }
    // Assign this row to each free column; current stays row-sorted because
    // rows are visited in order.
    for c in 0..costs.cols() {
        if !cols_used[c] {
            cols_used[c] = true;
            current.push((row_idx, c));
            enumerate(costs, row_idx + 1, cols_used, current, best);
            current.pop();
            cols_used[c] = false;
        }
    }
    // Or leave it unassigned when enough rows remain to reach the target.
    if costs.rows() - row_idx - 1 >= target - current.len() {
        enumerate(costs, row_idx + 1, cols_used, current, best);
    }
}

/// Minimum-total assignment by brute force, lexicographically smallest
/// among exact-total ties.
pub fn brute_force_assignment(costs: &CostMatrix) -> Assignment {
    if costs.rows() == 0 || costs.cols() == 0 {
        return Assignment { pairs: Vec::new() };
    }
    assert!(
        costs.rows().min(costs.cols()) <= 8,
        "brute force limited to 8 assignable pairs"
    );
    let mut cols_used = vec![false; costs.cols()];
    let mut current = Vec::new();
    let mut best = None;
    enumerate(costs, 0, &mut cols_used, &mut current, &mut best);
    Assignment { pairs: best.expect("nonempty matrix has assignments").1 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_finds_known_optimum() {
        let m = CostMatrix::new(3, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]).unwrap();
        let a = brute_force_assignment(&m);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.total_cost(&m), 5.0);
    }

    #[test]
    fn oracle_handles_wide_and_tall() {
        let wide = CostMatrix::new(1, 3, vec![5.0, 2.0, 7.0]).unwrap();
        assert_eq!(brute_force_assignment(&wide).pairs, vec![(0, 1)]);
        let tall = CostMatrix::new(3, 1, vec![5.0, 2.0, 7.0]).unwrap();
        assert_eq!(brute_force_assignment(&tall).pairs, vec![(1, 0)]);
    }
}
