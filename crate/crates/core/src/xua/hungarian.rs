//! O(n³) shortest-augmenting-path assignment with row/column potentials.

use crate::error::{Error, Result};

/// Minimum-cost assignment on an `m × n` cost matrix given as rows.
/// Returns `min(m, n)` pairs `(row, col)` sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let m = cost.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::shape("hungarian", "ragged cost matrix"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::domain("hungarian", "non-finite cost"));
    }
    // pad to square; every padded cell gets the same sentinel so padding never
    // changes which real pairs are optimal
    let s = m.max(n);
    let sentinel = cost.iter().flatten().fold(0.0f64, |a, &c| a.max(c.abs())) + 1.0;
    let at = |i: usize, j: usize| if i < m && j < n { cost[i][j] } else { sentinel };

    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; s + 1];
    let mut v = vec![0.0; s + 1];
    let mut p = vec![0usize; s + 1];
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=s {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=s {
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
    let mut pairs: Vec<(usize, usize)> =
        (1..=s).filter(|&j| p[j] >= 1 && p[j] - 1 < m && j - 1 < n).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over injective maps from the smaller side.
    pub(crate) fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let m = cost.len();
        let n = cost[0].len();
        let (small, large, tr) = if m <= n { (m, n, false) } else { (n, m, true) };
        let c = |a: usize, b: usize| if tr { cost[b][a] } else { cost[a][b] };
        fn rec(
            k: usize,
            small: usize,
            large: usize,
            used: &mut Vec<bool>,
            acc: f64,
            best: &mut f64,
            c: &dyn Fn(usize, usize) -> f64,
        ) {
            if k == small {
                *best = best.min(acc);
                return;
            }
            for j in 0..large {
                if !used[j] {
                    used[j] = true;
                    rec(k + 1, small, large, used, acc + c(k, j), best, c);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, small, large, &mut vec![false; large], 0.0, &mut best, &c);
        best
    }

    #[test]
    fn examples() {
        let diag: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        assert_eq!(hungarian(&diag).unwrap(), (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(hungarian(&[vec![3.5]]).unwrap(), vec![(0, 0)]);
        assert!(hungarian(&[]).unwrap().is_empty());
        assert!(hungarian(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn rectangular_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let m = rng.random_range(1..=6);
            let n = rng.random_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let pairs = hungarian(&cost).unwrap();
            assert_eq!(pairs.len(), m.min(n));
            let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), pairs.len());
            assert_eq!(cols.len(), pairs.len());
            let got = assignment_cost(&cost, &pairs);
            assert!((got - brute_force(&cost)).abs() < 1e-9);
        }
    }
}
