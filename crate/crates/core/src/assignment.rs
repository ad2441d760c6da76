//! Optimal linear assignment (Hungarian method with potentials, O(n^2 m)).

/// Minimum-cost assignment of rows to distinct columns of a `rows x cols`
/// matrix. Every row (if `rows <= cols`) or every column (otherwise) is
/// assigned. Returns `assign[row] = Some(col)`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let by_col = min_cost_assignment(&transposed);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }

    // 1-based potentials formulation; column 0 is a virtual start.
    let (n, m) = (rows, cols);
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
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Maximum-weight assignment; see [`min_cost_assignment`].
pub fn max_weight_assignment(weight: &[Vec<f64>]) -> Vec<Option<usize>> {
    let neg: Vec<Vec<f64>> = weight
        .iter()
        .map(|r| r.iter().map(|&w| -w).collect())
        .collect();
    min_cost_assignment(&neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_known_optimum() {
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = min_cost_assignment(&c);
        let total: f64 = a.iter().enumerate().map(|(r, c2)| c[r][c2.unwrap()]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let w = vec![vec![1.0, 9.0, 2.0], vec![8.0, 7.0, 1.0]];
        let a = max_weight_assignment(&w);
        assert_eq!(a, vec![Some(1), Some(0)]);
        let t: Vec<Vec<f64>> = (0..3).map(|c| (0..2).map(|r| w[r][c]).collect()).collect();
        let b = max_weight_assignment(&t);
        assert_eq!(b, vec![Some(1), Some(0), None]);
    }

    #[test]
    fn empty_inputs() {
        assert!(min_cost_assignment(&[]).is_empty());
        assert_eq!(min_cost_assignment(&[vec![], vec![]]), vec![None, None]);
    }
}
