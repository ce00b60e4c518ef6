//! Parameterized nonlinear programs
//!
//! ```text
//! min_z  f(z, p)   s.t.  g(z, p) <= 0,  h(z, p) = 0
//! ```
//!
//! described block by block: each [`Block`] sees a subset of the decision
//! variables and owns a contiguous range of inequality and equality rows. The
//! objective is the sum of block objectives. A single block covering everything
//! is the default and works for any small dense problem; stage-wise problems
//! declare one block per stage so that KKT systems become banded.

mod ipm;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ad::{Dual, HyperDual, Scalar, SmoothMap, Taylor};
use crate::linalg::{clique_bandwidth, LinalgError};

pub use ipm::{solve, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlpDims {
    pub n_z: usize,
    pub n_g: usize,
    pub n_h: usize,
    pub n_p: usize,
}

impl NlpDims {
    /// Length of the primal-dual vector `(z, λ, ν)`.
    pub fn n_xi(&self) -> usize {
        self.n_z + self.n_g + self.n_h
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    /// Global indices of the decision variables the block reads, in local order.
    pub vars: Vec<usize>,
    pub ineq: Range<usize>,
    pub eq: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockValue<T> {
    pub objective: T,
    pub ineq: Vec<T>,
    pub eq: Vec<T>,
}

/// Hint about how the problem depends on `z` for fixed `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Structure {
    #[default]
    General,
    /// Quadratic objective and affine constraints: derivatives are evaluated once per solve.
    Quadratic,
}

pub trait ParamNlp: Sync {
    fn dims(&self) -> NlpDims;

    fn blocks(&self) -> Vec<Block> {
        let d = self.dims();
        vec![Block {
            vars: (0..d.n_z).collect(),
            ineq: 0..d.n_g,
            eq: 0..d.n_h,
        }]
    }

    /// Evaluates block `block` at its local variables `z` (ordered as `Block::vars`).
    fn eval_block<T: Scalar>(&self, block: usize, z: &[T], p: &[T]) -> BlockValue<T>;

    fn structure(&self) -> Structure {
        Structure::General
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualSolution {
    pub z_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub nu_star: DVector<f64>,
    pub kkt_residual_norm: f64,
    pub barrier_final: f64,
    pub iterations: usize,
}

impl PrimalDualSolution {
    /// Stacks `(z, λ, ν)`.
    pub fn xi(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.z_star.len() + self.lambda_star.len() + self.nu_star.len());
        let (nz, ng) = (self.z_star.len(), self.lambda_star.len());
        v.rows_mut(0, nz).copy_from(&self.z_star);
        v.rows_mut(nz, ng).copy_from(&self.lambda_star);
        v.rows_mut(nz + ng, self.nu_star.len()).copy_from(&self.nu_star);
        v
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid block layout: {0}")]
    Layout(String),
    #[error("no convergence after {iterations} iterations (KKT residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("KKT step system is numerically singular")]
    Singular,
    #[error("objective or constraints evaluated to a non-finite value")]
    NonFinite,
}

impl From<LinalgError> for NlpError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Singular { .. } => NlpError::Singular,
            LinalgError::NonFinite => NlpError::NonFinite,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NlpError> {
    if expected != got {
        return Err(NlpError::Dimension { what, expected, got });
    }
    Ok(())
}

/// Row/column positions of unknowns after block-wise ordering.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub dims: NlpDims,
    pub blocks: Vec<Block>,
    /// Reduced Newton system over `(z, ν)`: position of `z_i` and of `ν_j`.
    pub red_z: Vec<usize>,
    pub red_eq: Vec<usize>,
    pub red_bw: usize,
    /// Full KKT system over `(z, λ, ν)`.
    pub full_z: Vec<usize>,
    pub full_ineq: Vec<usize>,
    pub full_eq: Vec<usize>,
    pub full_bw: usize,
}

impl Layout {
    pub fn new<P: ParamNlp + ?Sized>(nlp: &P) -> Result<Self, NlpError> {
        let dims = nlp.dims();
        if dims.n_z == 0 {
            return Err(NlpError::Layout("problem has no decision variables".into()));
        }
        let blocks = nlp.blocks();
        let mut ineq_seen = vec![false; dims.n_g];
        let mut eq_seen = vec![false; dims.n_h];
        let mut var_seen = vec![false; dims.n_z];
        for (bi, b) in blocks.iter().enumerate() {
            if b.ineq.end > dims.n_g || b.eq.end > dims.n_h {
                return Err(NlpError::Layout(format!("block {bi} rows out of range")));
            }
            for r in b.ineq.clone() {
                if std::mem::replace(&mut ineq_seen[r], true) {
                    return Err(NlpError::Layout(format!("inequality row {r} owned twice")));
                }
            }
            for r in b.eq.clone() {
                if std::mem::replace(&mut eq_seen[r], true) {
                    return Err(NlpError::Layout(format!("equality row {r} owned twice")));
                }
            }
            for &v in &b.vars {
                if v >= dims.n_z {
                    return Err(NlpError::Layout(format!("block {bi} variable {v} out of range")));
                }
                var_seen[v] = true;
            }
        }
        if !ineq_seen.iter().chain(&eq_seen).chain(&var_seen).all(|&s| s) {
            return Err(NlpError::Layout("blocks do not cover every variable and row".into()));
        }

        const UNSET: usize = usize::MAX;
        let mut red_z = vec![UNSET; dims.n_z];
        let mut red_eq = vec![UNSET; dims.n_h];
        let mut full_z = vec![UNSET; dims.n_z];
        let mut full_ineq = vec![UNSET; dims.n_g];
        let mut full_eq = vec![UNSET; dims.n_h];
        // Variables shared with a later block go after the block's rows so
        // that the next clique starts as late as possible.
        let mut last_use = vec![0; dims.n_z];
        for (bi, b) in blocks.iter().enumerate() {
            for &v in &b.vars {
                last_use[v] = bi;
            }
        }
        let (mut nr, mut nf) = (0, 0);
        for (bi, b) in blocks.iter().enumerate() {
            let fresh: Vec<usize> = b.vars.iter().copied().filter(|&v| red_z[v] == UNSET).collect();
            let (private, shared): (Vec<usize>, Vec<usize>) = fresh.iter().partition(|&&v| last_use[v] == bi);
            for &v in &private {
                red_z[v] = nr;
                nr += 1;
                full_z[v] = nf;
                nf += 1;
            }
            for r in b.ineq.clone() {
                full_ineq[r] = nf;
                nf += 1;
            }
            for r in b.eq.clone() {
                red_eq[r] = nr;
                nr += 1;
                full_eq[r] = nf;
                nf += 1;
            }
            for &v in &shared {
                red_z[v] = nr;
                nr += 1;
                full_z[v] = nf;
                nf += 1;
            }
        }
        let red_groups: Vec<Vec<usize>> = blocks
            .iter()
            .map(|b| b.vars.iter().map(|&v| red_z[v]).chain(b.eq.clone().map(|r| red_eq[r])).collect())
            .collect();
        let full_groups: Vec<Vec<usize>> = blocks
            .iter()
            .map(|b| {
                b.vars
                    .iter()
                    .map(|&v| full_z[v])
                    .chain(b.ineq.clone().map(|r| full_ineq[r]))
                    .chain(b.eq.clone().map(|r| full_eq[r]))
                    .collect()
            })
            .collect();
        Ok(Self {
            dims,
            blocks,
            red_z,
            red_eq,
            red_bw: clique_bandwidth(red_groups.iter().map(|g| g.as_slice())),
            full_z,
            full_ineq,
            full_eq,
            full_bw: clique_bandwidth(full_groups.iter().map(|g| g.as_slice())),
        })
    }
}

/// Values and derivatives of one block with respect to `w = (z_local, p)`.
///
/// `hess` holds `∂²ℓ/∂z_local∂w` for the block Lagrangian `ℓ = f + λᵀg + νᵀh`.
pub(crate) struct BlockDerivs {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub grad: Vec<f64>,
    pub jg: DMatrix<f64>,
    pub jh: DMatrix<f64>,
    pub hess: DMatrix<f64>,
}

fn finite(v: &BlockValue<f64>) -> bool {
    v.objective.is_finite() && v.ineq.iter().chain(&v.eq).all(|x| x.is_finite())
}

pub(crate) fn block_derivs<P: ParamNlp + ?Sized>(
    nlp: &P,
    bi: usize,
    block: &Block,
    z: &[f64],
    p: &[f64],
    lam: &[f64],
    nu: &[f64],
    with_p: bool,
) -> Result<BlockDerivs, NlpError> {
    let zl: Vec<f64> = block.vars.iter().map(|&v| z[v]).collect();
    let nzl = zl.len();
    let nw = nzl + if with_p { p.len() } else { 0 };
    let lam_b = &lam[block.ineq.clone()];
    let nu_b = &nu[block.eq.clone()];
    let ng = block.ineq.len();
    let nh = block.eq.len();

    let plain = nlp.eval_block(bi, &zl, p);
    if plain.ineq.len() != ng || plain.eq.len() != nh {
        return Err(NlpError::Layout(format!("block {bi} returned wrong row counts")));
    }
    if !finite(&plain) {
        return Err(NlpError::NonFinite);
    }

    let mut grad = vec![0.0; nw];
    let mut jg = DMatrix::zeros(ng, nw);
    let mut jh = DMatrix::zeros(nh, nw);
    let mut zd: Vec<Dual> = zl.iter().map(|&v| Dual::constant(v)).collect();
    let mut pd: Vec<Dual> = p.iter().map(|&v| Dual::constant(v)).collect();
    for k in 0..nw {
        seed_dual(&mut zd, &mut pd, k, 1.0);
        let y = nlp.eval_block(bi, &zd, &pd);
        seed_dual(&mut zd, &mut pd, k, 0.0);
        grad[k] = y.objective.c[1];
        for (i, gi) in y.ineq.iter().enumerate() {
            jg[(i, k)] = gi.c[1];
        }
        for (i, hi) in y.eq.iter().enumerate() {
            jh[(i, k)] = hi.c[1];
        }
    }

    let mut hess = DMatrix::zeros(nzl, nw);
    let mut zh: Vec<HyperDual> = zl.iter().map(|&v| HyperDual::constant(v)).collect();
    let mut ph: Vec<HyperDual> = p.iter().map(|&v| HyperDual::constant(v)).collect();
    for i in 0..nzl {
        for k in i..nw {
            zh[i].c[1] = 1.0;
            seed_hyper(&mut zh, &mut ph, k, 1.0);
            let y = nlp.eval_block(bi, &zh, &ph);
            zh[i].c[1] = 0.0;
            seed_hyper(&mut zh, &mut ph, k, 0.0);
            let mut v = y.objective.c[3];
            for (gi, l) in y.ineq.iter().zip(lam_b) {
                v += l * gi.c[3];
            }
            for (hi, n) in y.eq.iter().zip(nu_b) {
                v += n * hi.c[3];
            }
            hess[(i, k)] = v;
            if k < nzl && k != i {
                hess[(k, i)] = v;
            }
        }
    }
    Ok(BlockDerivs {
        g: plain.ineq,
        h: plain.eq,
        grad,
        jg,
        jh,
        hess,
    })
}

fn seed_dual(z: &mut [Dual], p: &mut [Dual], k: usize, v: f64) {
    if k < z.len() {
        z[k].c[1] = v;
    } else {
        p[k - z.len()].c[1] = v;
    }
}

fn seed_hyper(z: &mut [HyperDual], p: &mut [HyperDual], k: usize, v: f64) {
    if k < z.len() {
        z[k].c[2] = v;
    } else {
        p[k - z.len()].c[2] = v;
    }
}

/// The reduced KKT function `F(ξ, p) = (∇zL, h, λ⊙g)` as a smooth map of `(z, λ, ν, p)`.
///
/// The Lagrangian gradient is formed inside `eval` by a forward sweep per local
/// variable, so outer derivatives of `F` nest one level deeper.
pub struct KktMap<'a, P: ParamNlp + ?Sized> {
    nlp: &'a P,
    dims: NlpDims,
    blocks: Vec<Block>,
}

impl<'a, P: ParamNlp + ?Sized> KktMap<'a, P> {
    pub fn new(nlp: &'a P) -> Self {
        Self {
            nlp,
            dims: nlp.dims(),
            blocks: nlp.blocks(),
        }
    }

    pub(crate) fn with_blocks(nlp: &'a P, blocks: Vec<Block>) -> Self {
        Self {
            nlp,
            dims: nlp.dims(),
            blocks,
        }
    }

    pub fn dims(&self) -> NlpDims {
        self.dims
    }

    /// Packs `(ξ, p)` into the map's input vector.
    pub fn input(&self, sol: &PrimalDualSolution, p: &[f64]) -> Vec<f64> {
        let mut x = sol.xi().as_slice().to_vec();
        x.extend_from_slice(p);
        x
    }
}

impl<P: ParamNlp + ?Sized> SmoothMap for KktMap<'_, P> {
    fn n_in(&self) -> usize {
        self.dims.n_xi() + self.dims.n_p
    }

    fn n_out(&self) -> usize {
        self.dims.n_xi()
    }

    fn eval<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let NlpDims { n_z, n_g, n_h, .. } = self.dims;
        let z = &x[..n_z];
        let lam = &x[n_z..n_z + n_g];
        let nu = &x[n_z + n_g..n_z + n_g + n_h];
        let p = &x[n_z + n_g + n_h..];
        let mut out = vec![T::zero(); n_z + n_h + n_g];
        let pd: Vec<Taylor<T, 2>> = p.iter().map(|&v| Taylor::constant(v)).collect();
        for (bi, b) in self.blocks.iter().enumerate() {
            let mut zd: Vec<Taylor<T, 2>> = b.vars.iter().map(|&v| Taylor::constant(z[v])).collect();
            let lam_b = &lam[b.ineq.clone()];
            let nu_b = &nu[b.eq.clone()];
            if zd.is_empty() {
                let zl: Vec<T> = Vec::new();
                let y = self.nlp.eval_block(bi, &zl, p);
                write_rows(&mut out, n_z, n_h, b, lam_b, &y.ineq, &y.eq);
                continue;
            }
            for i in 0..zd.len() {
                zd[i].c[1] = T::one();
                let y = self.nlp.eval_block(bi, &zd, &pd);
                zd[i].c[1] = T::zero();
                let mut dl = y.objective.c[1];
                for (gi, &l) in y.ineq.iter().zip(lam_b) {
                    dl += l * gi.c[1];
                }
                for (hi, &n) in y.eq.iter().zip(nu_b) {
                    dl += n * hi.c[1];
                }
                out[b.vars[i]] += dl;
                if i == 0 {
                    let g: Vec<T> = y.ineq.iter().map(|t| t.c[0]).collect();
                    let h: Vec<T> = y.eq.iter().map(|t| t.c[0]).collect();
                    write_rows(&mut out, n_z, n_h, b, lam_b, &g, &h);
                }
            }
        }
        out
    }
}

fn write_rows<T: Scalar>(out: &mut [T], n_z: usize, n_h: usize, b: &Block, lam_b: &[T], g: &[T], h: &[T]) {
    for (k, r) in b.eq.clone().enumerate() {
        out[n_z + r] = h[k];
    }
    for (k, r) in b.ineq.clone().enumerate() {
        out[n_z + n_h + r] = lam_b[k] * g[k];
    }
}

/// Evaluates `F(ξ, p)` ordered as `(∇zL, h, λ⊙g)`.
pub fn kkt_residual<P: ParamNlp + ?Sized>(
    nlp: &P,
    xi: &PrimalDualSolution,
    p: &[f64],
) -> Result<DVector<f64>, NlpError> {
    let d = nlp.dims();
    check_len("z", d.n_z, xi.z_star.len())?;
    check_len("lambda", d.n_g, xi.lambda_star.len())?;
    check_len("nu", d.n_h, xi.nu_star.len())?;
    check_len("p", d.n_p, p.len())?;
    let map = KktMap::new(nlp);
    Ok(DVector::from_vec(map.eval(&map.input(xi, p))))
}

/// Evaluates `(g, h)` at `z` in plain arithmetic.
pub fn constraints<P: ParamNlp + ?Sized>(nlp: &P, z: &[f64], p: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let d = nlp.dims();
    let mut g = DVector::zeros(d.n_g);
    let mut h = DVector::zeros(d.n_h);
    for (bi, b) in nlp.blocks().iter().enumerate() {
        let zl: Vec<f64> = b.vars.iter().map(|&v| z[v]).collect();
        let y = nlp.eval_block(bi, &zl, p);
        for (k, r) in b.ineq.clone().enumerate() {
            g[r] = y.ineq[k];
        }
        for (k, r) in b.eq.clone().enumerate() {
            h[r] = y.eq[k];
        }
    }
    (g, h)
}

/// Total objective value at `z`.
pub fn objective<P: ParamNlp + ?Sized>(nlp: &P, z: &[f64], p: &[f64]) -> f64 {
    nlp.blocks()
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let zl: Vec<f64> = b.vars.iter().map(|&v| z[v]).collect();
            nlp.eval_block(bi, &zl, p).objective
        })
        .sum()
}
