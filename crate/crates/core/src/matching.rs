//! Minimum-cost bipartite assignment with a deterministic tie-break.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `(row, column)` pairs sorted by row; rows without a pair are unmatched.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &Matrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
    }

    pub fn target_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Potentials-based Hungarian solver for `rows.len() <= cols.len()`.
/// Returns the column assigned to each listed row.
fn solve_wide(cost: &Matrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

/// Optimal total cost over the sub-matrix `rows x cols` with
/// `min(|rows|, |cols|)` pairs.
fn min_cost(cost: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let assigned = solve_wide(cost, rows, cols);
        rows.iter().zip(&assigned).map(|(&i, &j)| cost.get(i, j)).sum()
    } else {
        let t = cost.transpose();
        let assigned = solve_wide(&t, cols, rows);
        cols.iter().zip(&assigned).map(|(&j, &i)| cost.get(i, j)).sum()
    }
}

/// Minimum-cost assignment of `min(n, m)` pairs. Among optimal assignments
/// (costs equal up to a rounding tolerance) the lexicographically smallest
/// sorted pair list is returned.
pub fn hungarian_match(cost: &Matrix) -> Result<MatchAssignment> {
    if cost.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cost matrix has non-finite entries"));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let k = n.min(m);
    if k == 0 {
        return Ok(MatchAssignment::default());
    }
    let scale = cost.as_slice().iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let eps = 1e-12 * (1.0 + scale) * k as f64;
    let all_rows: Vec<usize> = (0..n).collect();
    let mut cols_left: Vec<usize> = (0..m).collect();
    let opt = min_cost(cost, &all_rows, &cols_left);

    // Fix rows in order, each to the smallest column (or to nothing) that
    // still admits an optimal completion.
    let mut pairs = Vec::with_capacity(k);
    let mut fixed = 0.0;
    for i in 0..n {
        if pairs.len() == k {
            break;
        }
        let rows_left: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in cols_left.iter().enumerate() {
            let mut rest = cols_left.clone();
            rest.remove(pos);
            if pairs.len() + 1 + rows_left.len().min(rest.len()) != k {
                continue;
            }
            let total = fixed + cost.get(i, j) + min_cost(cost, &rows_left, &rest);
            if total <= opt + eps {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let j = cols_left.remove(pos);
                fixed += cost.get(i, j);
                pairs.push((i, j));
            }
            None => debug_assert!(pairs.len() + rows_left.len().min(cols_left.len()) == k),
        }
    }
    debug_assert_eq!(pairs.len(), k);
    Ok(MatchAssignment { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over injective maps from the smaller side, returning
    /// the optimal cost and the lexicographically smallest optimal pair list.
    fn brute_force(cost: &Matrix) -> (f64, Vec<(usize, usize)>) {
        let (n, m) = (cost.rows(), cost.cols());
        let k = n.min(m);
        let mut best = (f64::INFINITY, Vec::new());
        fn rec(
            cost: &Matrix,
            flip: bool,
            depth: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            best: &mut (f64, Vec<(usize, usize)>),
        ) {
            let small = if flip { cost.cols() } else { cost.rows() };
            if depth == small {
                let mut pairs: Vec<(usize, usize)> = cur
                    .iter()
                    .enumerate()
                    .map(|(s, &b)| if flip { (b, s) } else { (s, b) })
                    .collect();
                pairs.sort_unstable();
                let total: f64 = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
                if total < best.0 || (total == best.0 && pairs < best.1) {
                    *best = (total, pairs);
                }
                return;
            }
            for b in 0..used.len() {
                if !used[b] {
                    used[b] = true;
                    cur.push(b);
                    rec(cost, flip, depth + 1, used, cur, best);
                    cur.pop();
                    used[b] = false;
                }
            }
        }
        if k > 0 {
            let flip = n > m;
            let big = n.max(m);
            rec(cost, flip, 0, &mut vec![false; big], &mut Vec::new(), &mut best);
        } else {
            best.0 = 0.0;
        }
        best
    }

    fn random_matrix(rng: &mut ChaCha8Rng, integer: bool) -> Matrix {
        let n = rng.random_range(1..=7);
        let m = rng.random_range(1..=7);
        Matrix::from_fn(n, m, |_, _| {
            if integer {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-5.0..5.0)
            }
        })
    }

    #[test]
    fn identity_on_zero_diagonal() {
        let c = Matrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 + (i * j) as f64 });
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn two_by_two() {
        let c = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&c), 2.0);
    }

    #[test]
    fn rejects_non_finite() {
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            let c = Matrix::from_rows(&[vec![0.0, bad]]);
            assert!(hungarian_match(&c).is_err());
        }
    }

    #[test]
    fn empty_matrices() {
        assert!(hungarian_match(&Matrix::zeros(0, 4)).unwrap().pairs.is_empty());
        assert!(hungarian_match(&Matrix::zeros(3, 0)).unwrap().pairs.is_empty());
    }

    #[test]
    fn all_equal_rows_tie_break() {
        let c = Matrix::from_fn(6, 3, |_, _| 0.5);
        assert_eq!(hungarian_match(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let c = Matrix::from_fn(2, 5, |_, _| 0.5);
        assert_eq!(hungarian_match(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..300 {
            let c = random_matrix(&mut rng, false);
            let (best, _) = brute_force(&c);
            let a = hungarian_match(&c).unwrap();
            assert_eq!(a.pairs.len(), c.rows().min(c.cols()));
            assert!((a.total_cost(&c) - best).abs() <= 1e-12 * (1.0 + best.abs()), "case {case}");
        }
    }

    #[test]
    fn integer_ties_resolve_lexicographically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let c = random_matrix(&mut rng, true);
            let (best, pairs) = brute_force(&c);
            let a = hungarian_match(&c).unwrap();
            assert_eq!(a.total_cost(&c), best);
            assert_eq!(a.pairs, pairs);
        }
    }
}
