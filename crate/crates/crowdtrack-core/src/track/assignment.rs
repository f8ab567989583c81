//! Minimum-cost bipartite assignment on rectangular matrices with
//! infeasible entries, via shortest augmenting paths with dual potentials
//! (the O(n^3) Hungarian scheme).
//!
//! Infeasible pairs are priced at a large constant, so the solver first
//! maximizes the number of feasible matches and then minimizes their total
//! cost; pairs that come back at the infeasible price are reported
//! unmatched.

use alloc::vec;
use alloc::vec::Vec;

/// Price of an infeasible pairing; vastly dominates any real cost.
const BIG: f64 = 1e12;

/// Rectangular cost matrix with a feasibility mask.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
    feasible: Vec<bool>,
}

impl CostMatrix {
    /// All pairs start infeasible.
    pub fn new(rows: usize, cols: usize) -> Self {
        CostMatrix {
            rows,
            cols,
            costs: vec![0.0; rows * cols],
            feasible: vec![false; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn set(&mut self, row: usize, col: usize, cost: f64) {
        let i = row * self.cols + col;
        self.costs[i] = cost;
        self.feasible[i] = cost.is_finite();
    }

    pub fn mark_infeasible(&mut self, row: usize, col: usize) {
        self.feasible[row * self.cols + col] = false;
    }

    pub fn cost(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.cols + col]
    }

    pub fn is_feasible(&self, row: usize, col: usize) -> bool {
        self.feasible[row * self.cols + col]
    }
}

/// Result of an assignment: matched (row, col) pairs plus the unmatched
/// rows and columns, all in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    /// Total cost of the matched pairs, summed in row order.
    pub fn total_cost(&self, m: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| m.cost(r, c)).sum()
    }
}

/// Minimum-cost assignment over the feasible pairs, maximizing match
/// cardinality first. Exhaustively optimal on small instances (checked
/// against brute force in the tests and the acceptance suite).
pub fn hungarian(m: &CostMatrix) -> Assignment {
    let n = usize::max(m.rows, m.cols);
    if n == 0 {
        return Assignment {
            pairs: Vec::new(),
            unmatched_rows: Vec::new(),
            unmatched_cols: Vec::new(),
        };
    }

    // Square matrix with BIG on padding and infeasible entries.
    let price = |r: usize, c: usize| -> f64 {
        if r < m.rows && c < m.cols && m.feasible[r * m.cols + c] {
            m.costs[r * m.cols + c]
        } else {
            BIG
        }
    };

    // Shortest-augmenting-path Hungarian with potentials, 1-indexed
    // internally; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = price(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut pairs = Vec::new();
    let mut row_matched = vec![false; m.rows];
    let mut col_matched = vec![false; m.cols];
    for j in 1..=n {
        let i = p[j];
        if i == 0 {
            continue;
        }
        let (r, c) = (i - 1, j - 1);
        if r < m.rows && c < m.cols && m.feasible[r * m.cols + c] {
            pairs.push((r, c));
            row_matched[r] = true;
            col_matched[c] = true;
        }
    }
    pairs.sort_unstable();
    let unmatched_rows = (0..m.rows).filter(|&r| !row_matched[r]).collect();
    let unmatched_cols = (0..m.cols).filter(|&c| !col_matched[c]).collect();
    Assignment { pairs, unmatched_rows, unmatched_cols }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Exhaustive oracle: maximize feasible-match count, then minimize
    /// cost, enumerating all injective row-to-column maps.
    pub(crate) fn brute_force(m: &CostMatrix) -> (usize, f64) {
        fn rec(
            m: &CostMatrix,
            row: usize,
            used: &mut Vec<bool>,
            matched: usize,
            cost: f64,
            best: &mut (usize, f64),
        ) {
            if row == m.rows() {
                if matched > best.0 || (matched == best.0 && cost < best.1) {
                    *best = (matched, cost);
                }
                return;
            }
            // Leave this row unmatched.
            rec(m, row + 1, used, matched, cost, best);
            for c in 0..m.cols() {
                if !used[c] && m.is_feasible(row, c) {
                    used[c] = true;
                    rec(m, row + 1, used, matched + 1, cost + m.cost(row, c), best);
                    used[c] = false;
                }
            }
        }
        let mut best = (0usize, f64::INFINITY);
        let mut used = vec![false; m.cols()];
        rec(m, 0, &mut used, 0, 0.0, &mut best);
        if best.0 == 0 {
            best.1 = 0.0;
        }
        best
    }

    #[test]
    fn diagonal_dominant_identity() {
        let mut m = CostMatrix::new(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                m.set(r, c, if r == c { 0.001 } else { 10.0 });
            }
        }
        let a = hungarian(&m);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(a.unmatched_rows.is_empty());
        assert!(a.unmatched_cols.is_empty());
    }

    #[test]
    fn single_feasible_entry() {
        let mut m = CostMatrix::new(1, 1);
        m.set(0, 0, 3.5);
        let a = hungarian(&m);
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn fully_infeasible_rows_reported_unmatched() {
        let mut m = CostMatrix::new(2, 2);
        m.set(0, 0, 1.0);
        // Row 1 has no feasible column.
        let a = hungarian(&m);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.unmatched_rows, vec![1]);
        assert_eq!(a.unmatched_cols, vec![1]);
    }

    #[test]
    fn rectangular_matrices() {
        let mut m = CostMatrix::new(2, 4);
        for r in 0..2 {
            for c in 0..4 {
                m.set(r, c, ((r + 1) * (c + 1)) as f64);
            }
        }
        let a = hungarian(&m);
        assert_eq!(a.pairs.len(), 2);
        let (card, cost) = brute_force(&m);
        assert_eq!(card, 2);
        assert_eq!(a.total_cost(&m), cost);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = SplitMix64::new(64);
        for _ in 0..500 {
            let rows = 1 + rng.below(6);
            let cols = 1 + rng.below(6);
            let mut m = CostMatrix::new(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    if rng.next_f64() < 0.85 {
                        m.set(r, c, rng.next_f64());
                    }
                }
            }
            let a = hungarian(&m);
            let (card, cost) = brute_force(&m);
            assert_eq!(a.pairs.len(), card, "cardinality");
            if card > 0 {
                assert_eq!(a.total_cost(&m), cost, "cost");
            }
        }
    }

    #[test]
    fn prefers_cardinality_over_cost() {
        // Matching both rows costs 100 + 100; matching only row 0 would
        // cost 0.1 but leaves a feasible row unmatched.
        let mut m = CostMatrix::new(2, 2);
        m.set(0, 0, 0.1);
        m.set(0, 1, 100.0);
        m.set(1, 0, 100.0);
        let a = hungarian(&m);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }
}
