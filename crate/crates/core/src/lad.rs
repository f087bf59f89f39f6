//! Least-absolute-deviation regression by iteratively reweighted least
//! squares, finished with an exact interpolation through the best-fitting
//! samples (an L1 optimum sits on a vertex where `p` residuals vanish).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadOptions {
    /// Floor on |residual| when forming weights.
    pub eps: f64,
    pub max_iter: usize,
    /// Stop when the objective improves by less than this.
    pub tol: f64,
}

impl Default for LadOptions {
    fn default() -> Self {
        Self { eps: 1e-8, max_iter: 200, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn l1(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> (DVector<f64>, f64) {
    let r = y - x * beta;
    let obj = r.iter().map(|v| v.abs()).sum();
    (r, obj)
}

/// Columns of `x` that are not identifiable (non-zero weight in some null
/// direction of `x^T x`). Empty when `x` has full column rank.
pub fn unidentifiable_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    if x.nrows() < p {
        return (0..p).collect();
    }
    let gram = x.tr_mul(x);
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut bad = vec![false; p];
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 1e-9 * top.max(1.0) {
            for (i, b) in bad.iter_mut().enumerate() {
                if eig.eigenvectors[(i, k)].abs() > 1e-6 {
                    *b = true;
                }
            }
        }
    }
    (0..p).filter(|&i| bad[i]).collect()
}

fn weighted_solve(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for v in 0..x.nrows() {
        let row = x.row(v);
        let wv = w[v];
        for i in 0..p {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let wx = wv * xi;
            b[i] += wx * y[v];
            for j in i..p {
                a[(i, j)] += wx * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    a.clone().cholesky().map(|c| c.solve(&b)).or_else(|| a.lu().solve(&b))
}

/// Exact solution through `p` linearly independent samples with the
/// smallest |residual|, preferring earlier samples on ties.
fn vertex_polish(x: &DMatrix<f64>, y: &DVector<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    // greedy independent row selection via Gram-Schmidt
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut picked = Vec::with_capacity(p);
    for &v in &order {
        let mut q = x.row(v).transpose();
        let norm0 = q.norm();
        if norm0 == 0.0 {
            continue;
        }
        for e in &basis {
            let d = e.dot(&q);
            q -= e * d;
        }
        let n = q.norm();
        if n > 1e-9 * norm0 {
            basis.push(q / n);
            picked.push(v);
            if picked.len() == p {
                break;
            }
        }
    }
    if picked.len() < p {
        return None;
    }
    let a = DMatrix::from_fn(p, p, |i, j| x[(picked[i], j)]);
    let b = DVector::from_fn(p, |i, _| y[picked[i]]);
    a.lu().solve(&b)
}

/// Minimize `sum |y - x beta|` over `beta`.
pub fn lad_fit(x: &DMatrix<f64>, y: &DVector<f64>, opts: &LadOptions) -> Result<LadFit> {
    if x.nrows() != y.len() {
        return Err(Error::Shape { expected: format!("{} responses", x.nrows()), got: y.len().to_string() });
    }
    let bad = unidentifiable_columns(x);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { cells: bad });
    }
    let ones = DVector::from_element(x.nrows(), 1.0);
    let mut beta = weighted_solve(x, y, &ones).ok_or(Error::RankDeficient { cells: (0..x.ncols()).collect() })?;
    let (mut r, mut obj) = l1(x, y, &beta);
    let mut iterations = 0;
    while iterations < opts.max_iter && obj > 0.0 {
        iterations += 1;
        let w = r.map(|v| 1.0 / v.abs().max(opts.eps));
        let Some(next) = weighted_solve(x, y, &w) else { break };
        let (nr, nobj) = l1(x, y, &next);
        let improved = obj - nobj;
        if nobj < obj {
            beta = next;
            r = nr;
            obj = nobj;
        }
        if improved < opts.tol {
            break;
        }
    }
    // walk vertices while the exact interpolation keeps improving
    for _ in 0..x.ncols() {
        let Some(cand) = vertex_polish(x, y, &r) else { break };
        let (cr, cobj) = l1(x, y, &cand);
        if cobj <= obj && cand != beta {
            let done = cobj == obj;
            beta = cand;
            r = cr;
            obj = cobj;
            if done {
                break;
            }
        } else {
            break;
        }
    }
    Ok(LadFit { coef: beta, residuals: r, objective: obj, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn median_of_intercept_only() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 2.0, 7.0, 3.0, 100.0]);
        let fit = lad_fit(&x, &y, &LadOptions::default()).unwrap();
        assert!((fit.coef[0] - 3.0).abs() < 1e-9);
        assert!((fit.objective - (2.0 + 1.0 + 4.0 + 0.0 + 97.0)).abs() < 1e-9);
    }

    #[test]
    fn exact_system_recovered() {
        let x = design(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let y = DVector::from_vec(vec![2.0, -1.0, 1.0, 1.0]);
        let fit = lad_fit(&x, &y, &LadOptions::default()).unwrap();
        assert!(fit.objective < 1e-12);
        assert!((fit.coef[0] - 2.0).abs() < 1e-9 && (fit.coef[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_column_named() {
        let x = design(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        match lad_fit(&x, &y, &LadOptions::default()) {
            Err(Error::RankDeficient { cells }) => assert_eq!(cells, vec![1]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn duplicated_columns_named() {
        let x = design(&[&[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 1.0, 1.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(unidentifiable_columns(&x), vec![0, 1]);
    }
}
