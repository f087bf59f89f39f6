//! Dense tableau simplex for the least-absolute-deviation LP:
//! minimize sum(u + v) subject to X(b+ - b-) + u - v = y, all variables >= 0.

pub struct LpSolution {
    pub objective: f64,
    pub coef: Vec<f64>,
}

/// `x` is row-major with `p` columns.
pub fn lad_lp(x: &[Vec<f64>], y: &[f64]) -> LpSolution {
    let n = x.len();
    let p = x[0].len();
    // columns: b+ (p), b- (p), u (n), v (n), rhs
    let nv = 2 * p + 2 * n;
    let mut t = vec![vec![0.0f64; nv + 1]; n + 1];
    let mut basis = vec![0usize; n];
    for k in 0..n {
        let sgn = if y[k] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..p {
            t[k][j] = sgn * x[k][j];
            t[k][p + j] = -sgn * x[k][j];
        }
        t[k][2 * p + k] = sgn;
        t[k][2 * p + n + k] = -sgn;
        t[k][nv] = sgn * y[k];
        basis[k] = if sgn > 0.0 { 2 * p + k } else { 2 * p + n + k };
    }
    // reduced costs: c_j - c_B B^-1 A_j, stored in the last row
    let mut cost = vec![0.0f64; nv];
    for c in cost.iter_mut().skip(2 * p) {
        *c = 1.0;
    }
    for j in 0..=nv {
        let mut z = 0.0;
        for k in 0..n {
            z += cost[basis[k]] * t[k][j];
        }
        t[n][j] = if j < nv { cost[j] - z } else { -z };
    }
    let eps = 1e-11;
    loop {
        // Bland: smallest index with negative reduced cost
        let Some(e) = (0..nv).find(|&j| t[n][j] < -eps) else { break };
        let mut leave: Option<(f64, usize, usize)> = None;
        for k in 0..n {
            if t[k][e] > eps {
                let ratio = t[k][nv] / t[k][e];
                let better = match leave {
                    None => true,
                    Some((r, _, b)) => ratio < r - 1e-12 || ((ratio - r).abs() <= 1e-12 && basis[k] < b),
                };
                if better {
                    leave = Some((ratio, k, basis[k]));
                }
            }
        }
        let (_, l, _) = leave.expect("LAD LP is bounded below by zero");
        let piv = t[l][e];
        for v in t[l].iter_mut() {
            *v /= piv;
        }
        let pivot_row = t[l].clone();
        for (k, row) in t.iter_mut().enumerate() {
            if k != l && row[e] != 0.0 {
                let f = row[e];
                for (a, b) in row.iter_mut().zip(&pivot_row) {
                    *a -= f * b;
                }
            }
        }
        basis[l] = e;
    }
    let mut vals = vec![0.0f64; nv];
    for k in 0..n {
        vals[basis[k]] = t[k][nv];
    }
    let coef = (0..p).map(|j| vals[j] - vals[p + j]).collect();
    LpSolution { objective: -t[n][nv], coef }
}
