//! First- and second-order parametric sensitivities of primal-dual solutions.
//!
//! With `F(ξ, p) = 0` at a solution, the implicit function theorem gives
//! `∇ξF · ∂ξ/∂p = −∇pF`. Differentiating column `j` of that identity once more
//! along `p_k` yields, with `v_j = ∂ξ/∂p_j`,
//!
//! ```text
//! ∇ξF · ∂²ξ/∂p_j∂p_k = −D²F[(v_j, e_j), (v_k, e_k)]
//! ```
//!
//! where the right-hand side is one bilinear second directional derivative of
//! `F` over the joint `(ξ, p)` space. All columns share the factorization of
//! `∇ξF` computed for the first-order system.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::ad::{dir2, AdError, SmoothMap};
use crate::linalg::{BandLu, BandMatrix, LinalgError};
use crate::nlp::{block_derivs, check_len, constraints, KktMap, Layout, NlpError, ParamNlp, PrimalDualSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensError {
    #[error("KKT matrix is singular or the solution is degenerate: {0}")]
    SingularKkt(String),
    #[error("solution not accurate enough to differentiate (KKT residual {0:e})")]
    InaccurateSolution(f64),
    #[error("index range {start}..{end} exceeds vector of length {len}")]
    IndexOutOfRange { start: usize, end: usize, len: usize },
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensOptions {
    /// Largest admissible `‖F(ξ*, p)‖∞`.
    pub max_kkt_residual: f64,
    /// Lower bound on `min_i max(λ_i, −g_i)`.
    pub min_complementarity: f64,
}

impl Default for SensOptions {
    fn default() -> Self {
        Self {
            max_kkt_residual: 1e-10,
            min_complementarity: 1e-7,
        }
    }
}

/// LU factors of `∇ξF` in block-banded ordering.
#[derive(Debug, Clone)]
pub struct KktFactorization {
    lu: BandLu,
    /// Band position of each residual row `(∇zL, h, λ⊙g)`.
    row_pos: Vec<usize>,
    /// Band position of each unknown `(z, λ, ν)`.
    col_pos: Vec<usize>,
}

impl KktFactorization {
    pub fn dim(&self) -> usize {
        self.row_pos.len()
    }

    /// Solves `∇ξF · X = rhs` column by column.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        assert_eq!(rhs.nrows(), n, "rhs rows");
        let mut out = DMatrix::zeros(n, rhs.ncols());
        let mut b = vec![0.0; n];
        for c in 0..rhs.ncols() {
            self.solve_into(rhs.column(c).iter().copied(), &mut b);
            for i in 0..n {
                out[(i, c)] = b[self.col_pos[i]];
            }
        }
        out
    }

    fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.dim()];
        self.solve_into(rhs.iter().copied(), &mut b);
        self.col_pos.iter().map(|&p| b[p]).collect()
    }

    fn solve_into(&self, rhs: impl Iterator<Item = f64>, b: &mut [f64]) {
        for (r, v) in rhs.enumerate() {
            b[self.row_pos[r]] = v;
        }
        self.lu.solve_in_place(b);
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    /// The differentiated point `ξ* = (z*, λ*, ν*)`.
    pub xi: DVector<f64>,
    /// `∂ξ*/∂p`, `n_ξ × n_p`.
    pub first_order: DMatrix<f64>,
    /// `∂²ξ*/∂p_j∂p_k` stored at column `j·n_p + k`, `n_ξ × n_p²`.
    pub second_order: Option<DMatrix<f64>>,
    pub factorization: Arc<KktFactorization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDerivatives {
    pub action: DVector<f64>,
    /// `n_a × n_p`
    pub d_action: DMatrix<f64>,
    /// One symmetric `n_p × n_p` matrix per action component.
    pub d2_action: Vec<DMatrix<f64>>,
}

impl PolicyDerivatives {
    /// `∂²a_m/∂p_j∂p_k`
    pub fn d2(&self, j: usize, k: usize, m: usize) -> f64 {
        self.d2_action[m][(j, k)]
    }
}

/// Dense `∇ξF` (rows `(∇zL, h, λ⊙g)`, columns `(z, λ, ν)`) and `∇pF`.
pub fn kkt_jacobians<P: ParamNlp + ?Sized>(
    nlp: &P,
    xi: &PrimalDualSolution,
    p: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>), SensError> {
    let layout = Layout::new(nlp)?;
    let d = layout.dims;
    let mut jxi = DMatrix::zeros(d.n_xi(), d.n_xi());
    let fp = assemble(nlp, &layout, xi, p, |r, c, v| jxi[(r, c)] += v)?;
    Ok((jxi, fp))
}

/// Walks all nonzeros of `∇ξF` as `(residual row, unknown column, value)` and returns `∇pF`.
fn assemble<P: ParamNlp + ?Sized>(
    nlp: &P,
    layout: &Layout,
    xi: &PrimalDualSolution,
    p: &[f64],
    mut put: impl FnMut(usize, usize, f64),
) -> Result<DMatrix<f64>, SensError> {
    let d = layout.dims;
    let (nz, ng, nh, np) = (d.n_z, d.n_g, d.n_h, d.n_p);
    let z = xi.z_star.as_slice();
    let lam = xi.lambda_star.as_slice();
    let nu = xi.nu_star.as_slice();
    let mut fp = DMatrix::zeros(d.n_xi(), np);
    for (bi, b) in layout.blocks.iter().enumerate() {
        let bd = block_derivs(nlp, bi, b, z, p, lam, nu, true)?;
        let nzl = b.vars.len();
        for (k, &vk) in b.vars.iter().enumerate() {
            for (l, &vl) in b.vars.iter().enumerate() {
                put(vk, vl, bd.hess[(k, l)]);
            }
            for q in 0..np {
                fp[(vk, q)] += bd.hess[(k, nzl + q)];
            }
        }
        for (i, r) in b.ineq.clone().enumerate() {
            let row = nz + nh + r;
            for (l, &vl) in b.vars.iter().enumerate() {
                let a = bd.jg[(i, l)];
                put(vl, nz + r, a);
                put(row, vl, lam[r] * a);
            }
            put(row, nz + r, bd.g[i]);
            for q in 0..np {
                fp[(row, q)] = lam[r] * bd.jg[(i, nzl + q)];
            }
        }
        for (i, r) in b.eq.clone().enumerate() {
            let row = nz + r;
            for (l, &vl) in b.vars.iter().enumerate() {
                let a = bd.jh[(i, l)];
                put(vl, nz + ng + r, a);
                put(row, vl, a);
            }
            for q in 0..np {
                fp[(row, q)] = bd.jh[(i, nzl + q)];
            }
        }
    }
    Ok(fp)
}

fn check_point<P: ParamNlp + ?Sized>(
    nlp: &P,
    xi: &PrimalDualSolution,
    p: &[f64],
    opts: &SensOptions,
) -> Result<(), SensError> {
    let d = nlp.dims();
    check_len("z", d.n_z, xi.z_star.len())?;
    check_len("lambda", d.n_g, xi.lambda_star.len())?;
    check_len("nu", d.n_h, xi.nu_star.len())?;
    check_len("p", d.n_p, p.len())?;
    let map = KktMap::new(nlp);
    let res = map.eval(&map.input(xi, p)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(res <= opts.max_kkt_residual) {
        return Err(SensError::InaccurateSolution(res));
    }
    let (g, _) = constraints(nlp, xi.z_star.as_slice(), p);
    for (i, (&l, &gi)) in xi.lambda_star.iter().zip(g.iter()).enumerate() {
        let gap = l.max(-gi);
        if !(gap > opts.min_complementarity) {
            return Err(SensError::SingularKkt(format!(
                "constraint {i} weakly active (lambda {l:e}, g {gi:e})"
            )));
        }
    }
    Ok(())
}

/// Solves `∇ξF · ∂ξ/∂p = −∇pF` and keeps the factorization for reuse.
pub fn first_order<P: ParamNlp + ?Sized>(
    nlp: &P,
    xi: &PrimalDualSolution,
    p: &[f64],
    opts: &SensOptions,
) -> Result<(DMatrix<f64>, Arc<KktFactorization>), SensError> {
    check_point(nlp, xi, p, opts)?;
    let layout = Layout::new(nlp)?;
    let d = layout.dims;
    let (nz, ng, nh) = (d.n_z, d.n_g, d.n_h);
    let mut row_pos = vec![0; d.n_xi()];
    let mut col_pos = vec![0; d.n_xi()];
    row_pos[..nz].copy_from_slice(&layout.full_z[..nz]);
    col_pos[..nz].copy_from_slice(&layout.full_z[..nz]);
    for r in 0..nh {
        row_pos[nz + r] = layout.full_eq[r];
        col_pos[nz + ng + r] = layout.full_eq[r];
    }
    for r in 0..ng {
        row_pos[nz + nh + r] = layout.full_ineq[r];
        col_pos[nz + r] = layout.full_ineq[r];
    }
    let bw = layout.full_bw;
    let mut band = BandMatrix::zeros(d.n_xi(), bw, bw);
    let fp = assemble(nlp, &layout, xi, p, |r, c, v| {
        if v != 0.0 {
            band.add(row_pos[r], col_pos[c], v)
        }
    })?;
    let lu = band.factor().map_err(|e| match e {
        LinalgError::Singular { step, pivot } => {
            SensError::SingularKkt(format!("zero pivot {pivot:e} at elimination step {step}"))
        }
        LinalgError::NonFinite => SensError::Nlp(NlpError::NonFinite),
    })?;
    let fact = KktFactorization { lu, row_pos, col_pos };
    let sens = -fact.solve(&fp);
    Ok((sens, Arc::new(fact)))
}

/// Second-order sensitivities, reusing the first-order factorization.
pub fn second_order<P: ParamNlp + ?Sized>(
    nlp: &P,
    xi: &PrimalDualSolution,
    p: &[f64],
    first: &DMatrix<f64>,
    fact: &KktFactorization,
) -> Result<DMatrix<f64>, SensError> {
    let d = nlp.dims();
    let (nxi, np) = (d.n_xi(), d.n_p);
    check_len("first-order rows", nxi, first.nrows())?;
    check_len("first-order columns", np, first.ncols())?;
    let map = KktMap::new(nlp);
    let x = map.input(xi, p);
    let dirs: Vec<Vec<f64>> = (0..np)
        .map(|j| {
            let mut v = first.column(j).iter().copied().collect::<Vec<_>>();
            v.extend((0..np).map(|q| if q == j { 1.0 } else { 0.0 }));
            v
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..np).flat_map(|j| (j..np).map(move |k| (j, k))).collect();
    let cols = pairs
        .par_iter()
        .map(|&(j, k)| {
            let c = dir2(&map, &x, &dirs[j], &dirs[k])?;
            let rhs: Vec<f64> = c.iter().map(|v| -v).collect();
            Ok(fact.solve_vec(&rhs))
        })
        .collect::<Result<Vec<_>, SensError>>()?;
    let mut s = DMatrix::zeros(nxi, np * np);
    for (&(j, k), col) in pairs.iter().zip(&cols) {
        for i in 0..nxi {
            s[(i, j * np + k)] = col[i];
            s[(i, k * np + j)] = col[i];
        }
    }
    Ok(s)
}

/// First- and optionally second-order sensitivities in one call.
pub fn sensitivities<P: ParamNlp + ?Sized>(
    nlp: &P,
    xi: &PrimalDualSolution,
    p: &[f64],
    second: bool,
    opts: &SensOptions,
) -> Result<SensitivityBundle, SensError> {
    let (first, fact) = first_order(nlp, xi, p, opts)?;
    let second_order = if second {
        Some(second_order(nlp, xi, p, &first, &fact)?)
    } else {
        None
    };
    Ok(SensitivityBundle {
        xi: xi.xi(),
        first_order: first,
        second_order,
        factorization: fact,
    })
}

/// Picks the rows belonging to the applied action out of the sensitivity bundle.
pub fn extract_policy(sens: &SensitivityBundle, action_rows: Range<usize>) -> Result<PolicyDerivatives, SensError> {
    let n = sens.first_order.nrows();
    if action_rows.end > n || action_rows.start > action_rows.end || sens.xi.len() != n {
        return Err(SensError::IndexOutOfRange {
            start: action_rows.start,
            end: action_rows.end,
            len: n,
        });
    }
    let np = sens.first_order.ncols();
    let na = action_rows.len();
    let action = sens.xi.rows(action_rows.start, na).into_owned();
    let d_action = sens.first_order.rows(action_rows.start, na).into_owned();
    let d2_action = match &sens.second_order {
        Some(s) => action_rows
            .map(|m| DMatrix::from_fn(np, np, |j, k| s[(m, j * np + k)]))
            .collect(),
        None => Vec::new(),
    };
    Ok(PolicyDerivatives {
        action,
        d_action,
        d2_action,
    })
}
