//! Rectangular linear assignment (Hungarian method with potentials,
//! O(n²m)), generic over the cost type so that lexicographic objectives can
//! be solved exactly.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

/// Totally ordered additive cost.
pub trait Cost: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> {
    fn zero() -> Self;
    /// Larger than any finite cost; only ever compared, never summed with itself.
    fn infinity() -> Self;
}

impl Cost for f64 {
    fn zero() -> Self {
        0.0
    }

    fn infinity() -> Self {
        f64::INFINITY
    }
}

/// Triple compared lexicographically: the first component dominates, then the
/// second, then the third.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lex3(pub [f64; 3]);

impl PartialOrd for Lex3 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        for k in 0..3 {
            match self.0[k].partial_cmp(&other.0[k])? {
                Ordering::Equal => continue,
                o => return Some(o),
            }
        }
        Some(Ordering::Equal)
    }
}

impl Add for Lex3 {
    type Output = Lex3;
    fn add(self, o: Lex3) -> Lex3 {
        Lex3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Lex3 {
    type Output = Lex3;
    fn sub(self, o: Lex3) -> Lex3 {
        Lex3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Cost for Lex3 {
    fn zero() -> Self {
        Lex3([0.0; 3])
    }

    fn infinity() -> Self {
        Lex3([f64::INFINITY, 0.0, 0.0])
    }
}

/// Minimum-cost assignment for an `n × m` matrix given as rows.
///
/// Returns, for every row, the assigned column. Exactly `min(n, m)` rows
/// receive a column; when `n > m` the surplus rows get `None`.
pub fn solve<C: Cost>(cost: &[Vec<C>]) -> Vec<Option<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n <= m {
        solve_wide(n, m, |i, j| cost[i][j])
    } else {
        let by_col = solve_wide(m, n, |i, j| cost[j][i]);
        let mut out = vec![None; n];
        for (col, row) in by_col.into_iter().enumerate() {
            if let Some(r) = row {
                out[r] = Some(col);
            }
        }
        out
    }
}

fn solve_wide<C: Cost>(n: usize, m: usize, a: impl Fn(usize, usize) -> C) -> Vec<Option<usize>> {
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![C::zero(); n + 1];
    let mut v = vec![C::zero(); m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![C::infinity(); m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = C::infinity();
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Minimum-cost assignment returning `(row, col)` pairs sorted by row.
pub fn linear_sum_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    solve(cost)
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (r, c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_classic() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = linear_sum_assignment(&cost);
        let total: f64 = a.iter().map(|&(r, c)| cost[r][c]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn tall_and_wide() {
        let cost = vec![vec![1.0], vec![0.5], vec![2.0]];
        assert_eq!(solve(&cost), vec![None, Some(0), None]);
        let wide = vec![vec![3.0, 0.1, 2.0]];
        assert_eq!(solve(&wide), vec![Some(1)]);
        assert!(solve::<f64>(&[]).is_empty());
    }

    #[test]
    fn lexicographic_prefers_first_component() {
        // row 0 can take col 0 with a huge secondary gain, but taking col 1
        // lets row 1 match too (more matches wins).
        let c = |a: f64, b: f64| Lex3([a, b, 0.0]);
        let cost = vec![
            vec![c(-1.0, -100.0), c(-1.0, 0.0)],
            vec![c(-1.0, 0.0), c(0.0, 0.0)],
        ];
        assert_eq!(solve(&cost), vec![Some(1), Some(0)]);
    }
}
