//! Dense linear assignment (shortest augmenting paths with potentials,
//! Jonker–Volgenant family), plus the block construction that lets rows and
//! columns stay unassigned at a fixed price.

use ndarray::Array2;

/// Minimum-cost assignment of every row to a distinct column.
///
/// Requires `rows <= cols` and finite costs. Returns the column of each row.
pub fn solve_rect(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m, "solve_rect needs rows <= cols ({n} > {m})");
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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

    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Assignment where `link[[i, j]]` may be `f64::INFINITY` (forbidden) and
/// leaving row `i` or column `j` unassigned costs `row_skip[i]` /
/// `col_skip[j]`.
///
/// Uses the usual `(n + m)²` block matrix: links top-left, diagonal
/// no-link blocks, and the transposed feasibility pattern at zero cost in the
/// bottom-right so that skipped rows and columns can pair up.
pub fn solve_with_skips(link: &Array2<f64>, row_skip: &[f64], col_skip: &[f64]) -> Vec<Option<usize>> {
    let (n, m) = link.dim();
    assert_eq!(row_skip.len(), n);
    assert_eq!(col_skip.len(), m);
    if n == 0 {
        return Vec::new();
    }
    if m == 0 {
        return vec![None; n];
    }
    let finite_sum: f64 = link
        .iter()
        .chain(row_skip)
        .chain(col_skip)
        .filter(|c| c.is_finite())
        .map(|c| c.abs())
        .sum();
    let big = 1e6 * (finite_sum + 1.0);

    let size = n + m;
    let mut c = Array2::from_elem((size, size), big);
    for i in 0..n {
        for j in 0..m {
            let x = link[[i, j]];
            if x.is_finite() {
                c[[i, j]] = x;
                c[[n + j, m + i]] = 0.0;
            }
        }
        c[[i, m + i]] = row_skip[i];
    }
    for j in 0..m {
        c[[n + j, j]] = col_skip[j];
    }
    let sol = solve_rect(&c);
    (0..n)
        .map(|i| {
            let j = sol[i];
            (j < m && link[[i, j]].is_finite()).then_some(j)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_force_square(c: &Array2<f64>) -> f64 {
        fn rec(c: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = c.nrows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.ncols() {
                if !used[j] {
                    used[j] = true;
                    rec(c, row + 1, used, acc + c[[row, j]], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.ncols()], 0.0, &mut best);
        best
    }

    #[test]
    fn small_square_matches_brute_force() {
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let sol = solve_rect(&c);
        let total: f64 = sol.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        assert_eq!(total, brute_force_square(&c));
        assert_eq!(total, 5.0);
    }

    #[test]
    fn rectangular_rows_get_distinct_columns() {
        let c = array![[1.0, 9.0, 0.5, 3.0], [1.0, 0.1, 0.4, 2.0]];
        let sol = solve_rect(&c);
        assert_ne!(sol[0], sol[1]);
        let total: f64 = sol.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        assert!((total - 0.6).abs() < 1e-12);
    }

    #[test]
    fn skips_are_taken_when_links_are_expensive() {
        let inf = f64::INFINITY;
        let link = array![[0.1, inf], [5.0, inf]];
        let sol = solve_with_skips(&link, &[1.0, 1.0], &[1.0, 1.0]);
        assert_eq!(sol, vec![Some(0), None]);
    }

    #[test]
    #[should_panic]
    fn skip_lengths_must_match() {
        let link = array![[0.1]];
        solve_with_skips(&link, &[1.0], &[]);
    }
}
