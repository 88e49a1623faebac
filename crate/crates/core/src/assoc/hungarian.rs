//! Minimum-cost injective assignment (Kuhn–Munkres with potentials),
//! with a deterministic lexicographic tie-break among optimal assignments.

use super::AssocError;

/// Rectangular cost matrix; rows are predictions, columns ground truth.
/// Zero-sized matrices are valid and yield empty assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AssocError> {
        if data.len() != rows * cols {
            return Err(AssocError::BadShape { rows, cols, len: data.len() });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(AssocError::NonFiniteCost { row: i / cols.max(1), col: i % cols.max(1) });
            }
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, AssocError> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CostMatrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Injective pairing covering `min(rows, cols)` pairs, sorted by row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Total cost, summed in ascending-row order (the canonical order used
    /// for optimality comparisons).
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| costs.at(r, c)).sum()
    }

    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|&(_, c)| c)
    }

    /// Row matched to `col`, if any.
    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, c)| *c == col).map(|&(r, _)| r)
    }
}

/// Shortest-augmenting-path assignment for `rows <= cols`. Returns for each
/// row its matched column. Classic O(rows²·cols) potentials formulation.
fn solve_rows_le_cols(costs: &CostMatrix) -> Vec<usize> {
    let n = costs.rows;
    let m = costs.cols;
    debug_assert!(n <= m);
    // 1-based with a sentinel column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = costs.at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Some optimal assignment (no tie-break guarantees).
fn solve(costs: &CostMatrix) -> Assignment {
    if costs.rows == 0 || costs.cols == 0 {
        return Assignment { pairs: Vec::new() };
    }
    if costs.rows <= costs.cols {
        let r2c = solve_rows_le_cols(costs);
        let pairs = r2c.into_iter().enumerate().map(|(r, c)| (r, c)).collect();
        Assignment { pairs }
    } else {
        let t = CostMatrix::from_fn(costs.cols, costs.rows, |r, c| costs.at(c, r))
            .expect("transpose of finite matrix");
        let c2r = solve_rows_le_cols(&t);
        let mut pairs: Vec<(usize, usize)> =
            c2r.into_iter().enumerate().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        Assignment { pairs }
    }
}

/// Optimal total of a subproblem over `rows` × `cols` (index lists into
/// `costs`), matching `min(len
/// s)` pairs. Returns the chosen pairs in original indices.
fn solve_sub(costs: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    let sub = CostMatrix::from_fn(rows.len(), cols.len(), |r, c| costs.at(rows[r], cols[c]))
        .expect("submatrix of finite matrix");
    solve(&sub).pairs.into_iter().map(|(r, c)| (rows[r], cols[c])).collect()
}

fn total_of(costs: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    let mut sorted: Vec<(usize, usize)> = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&(r, c)| costs.at(r, c)).sum()
}

/// Globally minimal-cost injective assignment covering `min(rows, cols)`
/// pairs. Among optimal assignments the lexicographically smallest pair
/// list (sorted by row) is returned, so ties break deterministically.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    if costs.rows == 0 || costs.cols == 0 {
        return Assignment { pairs: Vec::new() };
    }
    let reference = solve(costs);
    let best_total = total_of(costs, &reference.pairs);
    let k = costs.rows.min(costs.cols);

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut avail_cols: Vec<usize> = (0..costs.cols).collect();
    'rows: for r in 0..costs.rows {
        if fixed.len() == k {
            break;
        }
        let remaining_rows: Vec<usize> = (r + 1..costs.rows).collect();
        // Try columns in ascending order; keep the first that still admits
        // an optimal completion.
        for (ci, &c) in avail_cols.iter().enumerate() {
            let rest_cols: Vec<usize> =
                avail_cols.iter().copied().filter(|&x| x != c).collect();
            let mut candidate = fixed.clone();
            candidate.push((r, c));
            candidate.extend(solve_sub(costs, &remaining_rows, &rest_cols));
            if candidate.len() == k && total_of(costs, &candidate) == best_total {
                fixed.push((r, c));
                avail_cols.remove(ci);
                continue 'rows;
            }
        }
        // Skipping r must itself preserve optimality (only possible when
        // rows outnumber columns).
        let mut candidate = fixed.clone();
        candidate.extend(solve_sub(costs, &remaining_rows, &avail_cols));
        if !(candidate.len() == k && total_of(costs, &candidate) == best_total) {
            // Float-pathological tie: fall back to the reference optimum,
            // keeping what has been fixed consistent with it.
            let mut pairs = reference.pairs.clone();
            pairs.sort_unstable();
            return Assignment { pairs };
        }
    }
    fixed.sort_unstable();
    Assignment { pairs: fixed }
}

#[cfg(test)]
mod tests {
    use super::super::oracle::brute_force_assignment;
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> CostMatrix {
        CostMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn diagonal_optimum() {
        let a = hungarian(&mat(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&mat(2, 2, &[0.0, 1.0, 1.0, 0.0])), 0.0);
    }

    #[test]
    fn three_by_three_known_optimum() {
        let m = mat(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = hungarian(&m);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.total_cost(&m), 5.0);
    }

    #[test]
    fn empty_matrix_gives_empty_assignment() {
        let m = CostMatrix::new(0, 3, vec![]).unwrap();
        assert!(hungarian(&m).pairs.is_empty());
        let m = CostMatrix::new(2, 0, vec![]).unwrap();
        assert!(hungarian(&m).pairs.is_empty());
    }

    #[test]
    fn rejects_non_finite_costs() {
        assert!(matches!(
            CostMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(AssocError::NonFiniteCost { row: 0, col: 1 })
        ));
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..300 {
            let rows = rng.gen_range(1..=6);
            let cols = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect();
            let m = CostMatrix::new(rows, cols, data).unwrap();
            let fast = hungarian(&m);
            let slow = brute_force_assignment(&m);
            assert_eq!(
                fast.total_cost(&m),
                slow.total_cost(&m),
                "trial {}: {:?} vs {:?}",
                trial,
                fast.pairs,
                slow.pairs
            );
            assert_eq!(fast.pairs, slow.pairs, "trial {} tie-break", trial);
        }
    }

    #[test]
    fn constant_shift_leaves_argmin_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.gen_range(2..=5);
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let shift = rng.gen_range(-100.0..100.0f64);
            let m1 = CostMatrix::new(n, n, data.clone()).unwrap();
            let m2 = CostMatrix::new(n, n, data.iter().map(|v| v + shift).collect()).unwrap();
            assert_eq!(hungarian(&m1).pairs, hungarian(&m2).pairs);
        }
    }

    #[test]
    fn lexicographic_tie_break_on_uniform_costs() {
        // All-equal costs: every permutation is optimal; the smallest pair
        // list is the identity pairing.
        let m = mat(3, 3, &[1.0; 9]);
        assert_eq!(hungarian(&m).pairs, vec![(0, 0), (1, 1), (2, 2)]);
        // Rectangular: rows outnumber cols; identity on the first rows.
        let m = mat(3, 2, &[1.0; 6]);
        assert_eq!(hungarian(&m).pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn negative_costs_are_fine() {
        let m = mat(2, 2, &[-5.0, -1.0, -1.0, -5.0]);
        let a = hungarian(&m);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&m), -10.0);
    }
}
