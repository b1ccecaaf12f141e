//! Shared helpers for integration tests: a brute-force QP oracle and
//! random problem generators. Everything here is deliberately independent
//! of the solver implementation it checks.

#![allow(dead_code)]

use fsplan::qp::{QpProblem, QP_INFINITY};
use rand::prelude::*;

/// Dense Gaussian elimination with partial pivoting. Returns `None` for
/// (numerically) singular systems.
pub fn dense_solve(matrix: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let mut a: Vec<Vec<f64>> = matrix.iter().cloned().collect();
    let mut b = rhs.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-11 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Dense view of a QP for the oracle.
pub struct DenseQp {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DenseQp {
    pub fn from_problem(problem: &QpProblem) -> Self {
        let n = problem.n_vars();
        let m = problem.n_constraints();
        let mut p = vec![vec![0.0; n]; n];
        for (r, c, v) in problem.quadratic().iter() {
            p[r][c] += v;
            if r != c {
                p[c][r] += v;
            }
        }
        let mut a = vec![vec![0.0; n]; m];
        for (r, c, v) in problem.constraints().iter() {
            a[r][c] += v;
        }
        Self {
            p,
            q: problem.linear().to_vec(),
            a,
            lower: problem.lower().to_vec(),
            upper: problem.upper().to_vec(),
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut value = 0.0;
        for i in 0..n {
            value += self.q[i] * x[i];
            for j in 0..n {
                value += 0.5 * x[i] * self.p[i][j] * x[j];
            }
        }
        value
    }

    fn feasible(&self, x: &[f64], tol: f64) -> bool {
        for (row, coeffs) in self.a.iter().enumerate() {
            let ax: f64 = coeffs.iter().zip(x).map(|(c, v)| c * v).sum();
            if ax < self.lower[row] - tol || ax > self.upper[row] + tol {
                return false;
            }
        }
        true
    }
}

/// Global minimum of a strictly convex QP by enumerating every active-set
/// combination and solving the equality-constrained KKT system densely.
pub fn brute_force_qp_minimum(qp: &DenseQp) -> Option<Vec<f64>> {
    let n = qp.q.len();
    let m = qp.lower.len();

    // Options per row: 0 = inactive, 1 = at lower, 2 = at upper.
    let mut options: Vec<Vec<(u8, f64)>> = Vec::with_capacity(m);
    for i in 0..m {
        let lo_finite = qp.lower[i] > -QP_INFINITY;
        let hi_finite = qp.upper[i] < QP_INFINITY;
        if lo_finite && hi_finite && (qp.upper[i] - qp.lower[i]).abs() < 1e-12 {
            options.push(vec![(1, qp.lower[i])]);
        } else {
            let mut row = vec![(0u8, 0.0)];
            if lo_finite {
                row.push((1, qp.lower[i]));
            }
            if hi_finite {
                row.push((2, qp.upper[i]));
            }
            options.push(row);
        }
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut choice = vec![0usize; m];
    loop {
        let active: Vec<(usize, f64)> = (0..m)
            .filter_map(|i| {
                let (kind, b) = options[i][choice[i]];
                (kind != 0).then_some((i, b))
            })
            .collect();
        // Reduce to a linearly independent subset of active rows; redundant
        // consistent rows are dropped, inconsistent combinations skipped.
        if let Some(active) = independent_rows(&active, &qp.a, n) {
            let ma = active.len();
            let dim = n + ma;
            let mut kkt = vec![vec![0.0; dim]; dim];
            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                for j in 0..n {
                    kkt[i][j] = qp.p[i][j];
                }
                rhs[i] = -qp.q[i];
            }
            for (k, &(row, b)) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[n + k][j] = qp.a[row][j];
                    kkt[j][n + k] = qp.a[row][j];
                }
                rhs[n + k] = b;
            }
            if let Some(sol) = dense_solve(&kkt, &rhs) {
                let x = &sol[..n];
                if qp.feasible(x, 1e-8) {
                    let value = qp.objective(x);
                    if best.as_ref().map_or(true, |(v, _)| value < *v) {
                        best = Some((value, x.to_vec()));
                    }
                }
            }
        }
        // Advance the mixed-radix counter.
        let mut idx = 0;
        loop {
            if idx == m {
                return best.map(|(_, x)| x);
            }
            choice[idx] += 1;
            if choice[idx] < options[idx].len() {
                break;
            }
            choice[idx] = 0;
            idx += 1;
        }
    }
}

/// Gaussian elimination over the active rows. Keeps rows that increase the
/// rank; drops dependent rows whose right-hand side stays consistent and
/// returns `None` when an inconsistent dependent row makes the active set
/// infeasible.
fn independent_rows(
    active: &[(usize, f64)],
    a: &[Vec<f64>],
    n: usize,
) -> Option<Vec<(usize, f64)>> {
    let mut kept: Vec<(usize, f64)> = Vec::new();
    let mut basis: Vec<(Vec<f64>, f64)> = Vec::new();
    for &(row, b) in active {
        let mut coeffs = a[row].clone();
        let mut rhs = b;
        for (vec, vb) in &basis {
            let pivot_col = vec.iter().position(|v| v.abs() > 1e-9).unwrap();
            let f = coeffs[pivot_col] / vec[pivot_col];
            if f != 0.0 {
                for j in 0..n {
                    coeffs[j] -= f * vec[j];
                }
                rhs -= f * vb;
            }
        }
        let norm = coeffs.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if norm < 1e-9 {
            if rhs.abs() > 1e-8 {
                return None;
            }
            // Redundant but consistent; drop it.
        } else {
            kept.push((row, b));
            basis.push((coeffs, rhs));
        }
    }
    Some(kept)
}

/// Random strictly convex QP with a guaranteed-feasible interior point.
pub fn random_strictly_convex_qp(rng: &mut impl Rng, max_vars: usize, max_cons: usize) -> QpProblem {
    let n = rng.gen_range(1..=max_vars);
    let m = rng.gen_range(1..=max_cons);

    // P = M' M + eps I, stored upper triangle.
    let mut mfac = vec![vec![0.0; n]; n];
    for row in mfac.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let mut p_upper = Vec::new();
    for i in 0..n {
        for j in i..n {
            let mut v = 0.0;
            for k in 0..n {
                v += mfac[k][i] * mfac[k][j];
            }
            if i == j {
                v += 0.1;
            }
            p_upper.push((i, j, v));
        }
    }
    let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut a_triplets = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for row in 0..m {
        let mut coeffs = vec![0.0f64; n];
        let mut any = false;
        for (j, c) in coeffs.iter_mut().enumerate() {
            if rng.gen_bool(0.7) {
                let value = rng.gen_range(-1.5..1.5);
                *c = value;
                if value.abs() > 1e-9 {
                    any = true;
                }
                a_triplets.push((row, j, value));
            }
        }
        if !any {
            coeffs[0] = 1.0;
            a_triplets.push((row, 0, 1.0));
        }
        let ax: f64 = coeffs.iter().zip(&x0).map(|(c, v)| c * v).sum();
        match rng.gen_range(0..4) {
            0 => {
                // Equality through the interior point.
                lower.push(ax);
                upper.push(ax);
            }
            1 => {
                lower.push(ax - rng.gen_range(0.05..1.5));
                upper.push(f64::INFINITY);
            }
            2 => {
                lower.push(-f64::INFINITY);
                upper.push(ax + rng.gen_range(0.05..1.5));
            }
            _ => {
                lower.push(ax - rng.gen_range(0.05..1.5));
                upper.push(ax + rng.gen_range(0.05..1.5));
            }
        }
    }
    QpProblem::new(n, &p_upper, q, &a_triplets, lower, upper).unwrap()
}
