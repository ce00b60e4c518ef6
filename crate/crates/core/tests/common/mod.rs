//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Dense strictly convex QP `min ½uᵀHu + fᵀu  s.t.  G·u ≤ g`.
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
}

pub struct QpSolution {
    pub u: DVector<f64>,
    /// Multipliers of all rows of `G`, zero for inactive rows.
    pub mult: DVector<f64>,
}

impl DenseQp {
    /// Primal active-set method from a feasible starting point.
    pub fn solve(&self, start: DVector<f64>) -> QpSolution {
        let n = self.h.nrows();
        let m = self.g_mat.nrows();
        let mut u = start;
        let slack = |u: &DVector<f64>| &self.g_vec - &self.g_mat * u;
        assert!(slack(&u).min() >= -1e-12, "oracle needs a feasible start");
        let mut work: Vec<usize> = Vec::new();
        let mut at_minimizer = false;
        for _ in 0..10 * (n + m) {
            let k = work.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
            for (r, &i) in work.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = self.g_mat[(i, j)];
                    kkt[(j, n + r)] = self.g_mat[(i, j)];
                }
            }
            let mut rhs = DVector::zeros(n + k);
            rhs.rows_mut(0, n).copy_from(&(-(&self.h * &u + &self.f)));
            let sol = kkt.lu().solve(&rhs).expect("working set keeps the KKT matrix regular");
            let p = sol.rows(0, n).into_owned();
            // After an unblocked full step `u` minimizes over the working set.
            if at_minimizer || p.amax() <= 1e-13 * (1.0 + u.amax()) {
                at_minimizer = false;
                let mu = sol.rows(n, k);
                match (0..k).min_by(|&a, &b| mu[a].total_cmp(&mu[b])) {
                    Some(r) if mu[r] < -1e-12 => {
                        work.remove(r);
                    }
                    _ => {
                        let mut mult = DVector::zeros(m);
                        for (r, &i) in work.iter().enumerate() {
                            mult[i] = mu[r];
                        }
                        return QpSolution { u, mult };
                    }
                }
                continue;
            }
            let gp = &self.g_mat * &p;
            let s = slack(&u);
            let mut alpha = 1.0;
            let mut block = None;
            for i in 0..m {
                if !work.contains(&i) && gp[i] > 1e-14 {
                    let a = s[i].max(0.0) / gp[i];
                    if a < alpha {
                        alpha = a;
                        block = Some(i);
                    }
                }
            }
            u += alpha * p;
            match block {
                Some(i) => work.push(i),
                None => at_minimizer = true,
            }
        }
        panic!("active-set oracle did not terminate");
    }
}

/// Case-study parameters in the order (a11, a12, a22, b1, b2, d1, d2, dx1).
pub struct CaseQp {
    pub qp: DenseQp,
    /// Row ranges of `G`: state rows first, then input rows.
    pub n_state_rows: usize,
    /// Penalty weight each state row may carry before its slack would activate.
    pub row_weight: Vec<f64>,
}

/// Condensed OCP over the inputs with the state bounds imposed as hard constraints.
///
/// When every state-row multiplier stays below its slack weight, the
/// minimizer coincides with the softened problem's (exact penalty).
pub fn condensed_case_qp(theta: &[f64], s: [f64; 2], horizon: usize, slack_weight: f64, terminal_weight: f64) -> CaseQp {
    let n = horizon;
    let a = DMatrix::from_row_slice(2, 2, &[theta[0], theta[1], 0.0, theta[2]]);
    let b = DVector::from_vec(vec![theta[3], theta[4]]);
    let d = DVector::from_vec(vec![theta[5], theta[6]]);
    let p_term = DMatrix::from_row_slice(2, 2, &[5.7, 1.3, 1.3, 3.3]);
    // x_k = X_k u + c_k for k = 1..=N
    let mut xs = Vec::new();
    let mut cs = Vec::new();
    let mut x_mat = DMatrix::zeros(2, n);
    let mut c = DVector::from_vec(s.to_vec());
    for k in 0..n {
        x_mat = &a * &x_mat;
        for i in 0..2 {
            x_mat[(i, k)] += b[i];
        }
        c = &a * &c + &d;
        xs.push(x_mat.clone());
        cs.push(c.clone());
    }
    let mut h = DMatrix::identity(n, n);
    let mut f = DVector::zeros(n);
    for k in 0..n {
        let q = if k == n - 1 { 2.0 * &p_term } else { 2.0 * DMatrix::identity(2, 2) };
        h += xs[k].transpose() * &q * &xs[k];
        f += xs[k].transpose() * &q * &cs[k];
    }
    let lb = [theta[7], -1.0];
    let ub = [1.0, 1.0];
    let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for k in 0..n {
        let w = if k == n - 1 { terminal_weight } else { slack_weight };
        for i in 0..2 {
            let r = xs[k].row(i).transpose();
            rows.push((-r.clone(), cs[k][i] - lb[i], w));
            rows.push((r, ub[i] - cs[k][i], w));
        }
    }
    let n_state_rows = rows.len();
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        rows.push((e.clone(), 1.0, f64::INFINITY));
        rows.push((-e, 1.0, f64::INFINITY));
    }
    let m = rows.len();
    let mut g_mat = DMatrix::zeros(m, n);
    let mut g_vec = DVector::zeros(m);
    let mut row_weight = Vec::new();
    for (i, (r, rhs, w)) in rows.into_iter().enumerate() {
        g_mat.set_row(i, &r.transpose());
        g_vec[i] = rhs;
        row_weight.push(w);
    }
    CaseQp {
        qp: DenseQp { h, f, g_mat, g_vec },
        n_state_rows,
        row_weight,
    }
}

/// First input from the oracle, or `None` when a slack would be active.
///
/// An elastic variable `t ≥ 0` relaxes the state rows so that `u = 0` is a
/// feasible start; a large linear penalty drives it to zero whenever the
/// hard-constrained problem is feasible.
pub fn oracle_first_input(theta: &[f64], s: [f64; 2], horizon: usize) -> Option<f64> {
    let case = condensed_case_qp(theta, s, horizon, 100.0, 100.0);
    let (n, m) = (horizon, case.qp.g_vec.len());
    let mut h = DMatrix::identity(n + 1, n + 1);
    h.view_mut((0, 0), (n, n)).copy_from(&case.qp.h);
    let mut f = DVector::from_element(n + 1, 1e4);
    f.rows_mut(0, n).copy_from(&case.qp.f);
    let mut g_mat = DMatrix::zeros(m + 1, n + 1);
    g_mat.view_mut((0, 0), (m, n)).copy_from(&case.qp.g_mat);
    for i in 0..case.n_state_rows {
        g_mat[(i, n)] = -1.0;
    }
    g_mat[(m, n)] = -1.0;
    let mut g_vec = DVector::zeros(m + 1);
    g_vec.rows_mut(0, m).copy_from(&case.qp.g_vec);
    let mut start = DVector::zeros(n + 1);
    start[n] = (-case.qp.g_vec.min()).max(0.0) + 1.0;
    let sol = DenseQp { h, f, g_mat, g_vec }.solve(start);
    let relaxed = sol.u[n] > 1e-9;
    let certified = (0..case.n_state_rows).all(|i| sol.mult[i] < case.row_weight[i] - 1e-9);
    (!relaxed && certified).then(|| sol.u[0])
}

/// Central finite differences of `f` along each coordinate.
pub fn central_fd(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> DVector<f64>) -> DMatrix<f64> {
    let mut cols = Vec::new();
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        cols.push((f(&xp) - f(&xm)) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}
