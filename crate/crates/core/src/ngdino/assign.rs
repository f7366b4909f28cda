//! Minimum-cost one-to-one assignment (Hungarian method with potentials).

use crate::error::{Error, Result};

/// Solves the rectangular assignment problem for a row-major `rows x cols`
/// cost matrix. Every row is assigned when `rows <= cols`, every column
/// otherwise. Returns `(row, col)` pairs sorted by row.
pub fn assign(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::LengthMismatch {
            left: cost.len(),
            right: rows * cols,
        });
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::InvariantViolation {
            at: format!("cost entry {i}"),
            message: "assignment costs must be finite".into(),
        });
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if rows <= cols {
        Ok(solve(|r, c| cost[r * cols + c], rows, cols))
    } else {
        let mut pairs: Vec<_> = solve(|r, c| cost[c * cols + r], cols, rows)
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// `n <= m`. Indices are shifted by one internally; slot 0 is a sentinel.
fn solve(a: impl Fn(usize, usize) -> f64, n: usize, m: usize) -> Vec<(usize, usize)> {
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
    let mut pairs: Vec<_> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}
