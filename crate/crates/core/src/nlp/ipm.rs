//! Primal-dual interior-point method with slack variables and Mehrotra centering.

use log::trace;
use nalgebra::DVector;

use super::{block_derivs, check_len, KktMap, Layout, NlpError, ParamNlp, PrimalDualSolution, Structure};
use crate::ad::SmoothMap;
use crate::linalg::{BandLu, BandMatrix, LinalgError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bound on `‖F(ξ, p)‖∞` at the returned point.
    pub tol_kkt: f64,
    /// Bound on constraint violation at the returned point.
    pub tol_feas: f64,
    pub max_iter: usize,
    /// Fraction-to-the-boundary factor.
    pub tau: f64,
    /// Lower bound on slacks and multipliers taken from a warm start.
    pub warm_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-10,
            tol_feas: 1e-9,
            max_iter: 200,
            tau: 0.995,
            warm_margin: 1e-4,
        }
    }
}

type SparseRow = Vec<(usize, f64)>;

/// Local derivative model: exact at `z_ref`, and everywhere for quadratic problems.
struct Model {
    z_ref: Vec<f64>,
    grad: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
    jg: Vec<SparseRow>,
    jh: Vec<SparseRow>,
    hess: Vec<(usize, usize, f64)>,
}

impl Model {
    fn build<P: ParamNlp + ?Sized>(
        nlp: &P,
        layout: &Layout,
        z: &[f64],
        p: &[f64],
        lam: &[f64],
        nu: &[f64],
    ) -> Result<Self, NlpError> {
        let d = layout.dims;
        let mut m = Model {
            z_ref: z.to_vec(),
            grad: vec![0.0; d.n_z],
            g: vec![0.0; d.n_g],
            h: vec![0.0; d.n_h],
            jg: vec![Vec::new(); d.n_g],
            jh: vec![Vec::new(); d.n_h],
            hess: Vec::new(),
        };
        for (bi, b) in layout.blocks.iter().enumerate() {
            let bd = block_derivs(nlp, bi, b, z, p, lam, nu, false)?;
            for (k, &v) in b.vars.iter().enumerate() {
                m.grad[v] += bd.grad[k];
                for (l, &u) in b.vars.iter().enumerate() {
                    let x = bd.hess[(k, l)];
                    if x != 0.0 {
                        m.hess.push((v, u, x));
                    }
                }
            }
            for (i, r) in b.ineq.clone().enumerate() {
                m.g[r] = bd.g[i];
                m.jg[r] = sparse_row(&b.vars, bd.jg.row(i).iter());
            }
            for (i, r) in b.eq.clone().enumerate() {
                m.h[r] = bd.h[i];
                m.jh[r] = sparse_row(&b.vars, bd.jh.row(i).iter());
            }
        }
        Ok(m)
    }

    /// Gradient, inequalities and equalities at `z` by linear extrapolation from `z_ref`.
    fn at(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dz: Vec<f64> = z.iter().zip(&self.z_ref).map(|(a, b)| a - b).collect();
        if dz.iter().all(|&v| v == 0.0) {
            return (self.grad.clone(), self.g.clone(), self.h.clone());
        }
        let mut grad = self.grad.clone();
        for &(i, j, v) in &self.hess {
            grad[i] += v * dz[j];
        }
        let g = self.g.iter().zip(&self.jg).map(|(g0, row)| g0 + row_dot(row, &dz)).collect();
        let h = self.h.iter().zip(&self.jh).map(|(h0, row)| h0 + row_dot(row, &dz)).collect();
        (grad, g, h)
    }
}

fn sparse_row<'a>(vars: &[usize], vals: impl Iterator<Item = &'a f64>) -> SparseRow {
    vars.iter()
        .zip(vals)
        .filter(|(_, &v)| v != 0.0)
        .map(|(&j, &v)| (j, v))
        .collect()
}

#[inline]
fn row_dot(row: &SparseRow, x: &[f64]) -> f64 {
    row.iter().map(|&(j, v)| v * x[j]).sum()
}

fn tr_mul(rows: &[SparseRow], y: &[f64], out: &mut [f64]) {
    for (row, &yi) in rows.iter().zip(y) {
        if yi != 0.0 {
            for &(j, v) in row {
                out[j] += v * yi;
            }
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Largest `α ∈ (0, 1]` keeping `x + α·dx ≥ (1 − τ)·x`.
fn max_step(x: &[f64], dx: &[f64], tau: f64) -> f64 {
    let mut a = 1.0f64;
    for (&xi, &di) in x.iter().zip(dx) {
        if di < 0.0 {
            a = a.min(-tau * xi / di);
        }
    }
    a
}

struct Newton<'a> {
    layout: &'a Layout,
    lu: BandLu,
}

struct Direction {
    dz: Vec<f64>,
    ds: Vec<f64>,
    dlam: Vec<f64>,
    dnu: Vec<f64>,
}

impl<'a> Newton<'a> {
    fn factor(layout: &'a Layout, model: &Model, sigma: &[f64], reg_w: f64, reg_c: f64) -> Result<Self, LinalgError> {
        let d = layout.dims;
        let n = d.n_z + d.n_h;
        let bw = layout.red_bw;
        let mut k = BandMatrix::zeros(n, bw, bw);
        let pz = &layout.red_z;
        for &(i, j, v) in &model.hess {
            k.add(pz[i], pz[j], v);
        }
        for (row, &s) in model.jg.iter().zip(sigma) {
            for &(i, a) in row {
                for &(j, b) in row {
                    k.add(pz[i], pz[j], s * a * b);
                }
            }
        }
        for (r, row) in model.jh.iter().enumerate() {
            let pr = layout.red_eq[r];
            for &(j, v) in row {
                k.add(pr, pz[j], v);
                k.add(pz[j], pr, v);
            }
            if reg_c != 0.0 {
                k.add(pr, pr, -reg_c);
            }
        }
        if reg_w != 0.0 {
            for &pi in pz {
                k.add(pi, pi, reg_w);
            }
        }
        Ok(Self {
            layout,
            lu: k.factor_with_threshold(0.0)?,
        })
    }

    fn solve_reduced(&self, rhs_z: &[f64], rhs_nu: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.layout.dims;
        let mut b = vec![0.0; d.n_z + d.n_h];
        for i in 0..d.n_z {
            b[self.layout.red_z[i]] = rhs_z[i];
        }
        for j in 0..d.n_h {
            b[self.layout.red_eq[j]] = rhs_nu[j];
        }
        self.lu.solve_in_place(&mut b);
        let dz = (0..d.n_z).map(|i| b[self.layout.red_z[i]]).collect();
        let dnu = (0..d.n_h).map(|j| b[self.layout.red_eq[j]]).collect();
        (dz, dnu)
    }

    /// Solves the linearized system for complementarity residual `rc = λ⊙s − target`.
    ///
    /// Large `λ/s` ratios make the eliminated system ill-conditioned, so the
    /// stationarity and equality rows of the unreduced system are refined.
    #[allow(clippy::too_many_arguments)]
    fn direction(&self, model: &Model, r_d: &[f64], r_p: &[f64], h: &[f64], s: &[f64], lam: &[f64], rc: &[f64]) -> Direction {
        let d = self.layout.dims;
        let tmp: Vec<f64> = (0..d.n_g).map(|i| (lam[i] * r_p[i] - rc[i]) / s[i]).collect();
        let mut rhs_z: Vec<f64> = r_d.iter().map(|v| -v).collect();
        let mut jt = vec![0.0; d.n_z];
        tr_mul(&model.jg, &tmp, &mut jt);
        for (r, v) in rhs_z.iter_mut().zip(&jt) {
            *r -= v;
        }
        let rhs_nu: Vec<f64> = h.iter().map(|v| -v).collect();
        let (mut dz, mut dnu) = self.solve_reduced(&rhs_z, &rhs_nu);
        let mut ds: Vec<f64> = (0..d.n_g).map(|i| -r_p[i] - row_dot(&model.jg[i], &dz)).collect();
        let mut dlam: Vec<f64> = (0..d.n_g).map(|i| (-rc[i] - lam[i] * ds[i]) / s[i]).collect();

        let scale = 1.0 + inf_norm(r_d).max(inf_norm(h));
        let mut last = f64::INFINITY;
        for _ in 0..3 {
            let mut e1 = r_d.to_vec();
            for &(i, j, v) in &model.hess {
                e1[i] += v * dz[j];
            }
            tr_mul(&model.jg, &dlam, &mut e1);
            tr_mul(&model.jh, &dnu, &mut e1);
            let e2: Vec<f64> = (0..d.n_h).map(|j| h[j] + row_dot(&model.jh[j], &dz)).collect();
            let err = inf_norm(&e1).max(inf_norm(&e2));
            if err <= 1e-14 * scale || err > 0.1 * last {
                break;
            }
            last = err;
            let neg1: Vec<f64> = e1.iter().map(|v| -v).collect();
            let neg2: Vec<f64> = e2.iter().map(|v| -v).collect();
            let (cz, cnu) = self.solve_reduced(&neg1, &neg2);
            for i in 0..d.n_g {
                let cs = -row_dot(&model.jg[i], &cz);
                ds[i] += cs;
                dlam[i] += -lam[i] * cs / s[i];
            }
            dz.iter_mut().zip(&cz).for_each(|(a, b)| *a += b);
            dnu.iter_mut().zip(&cnu).for_each(|(a, b)| *a += b);
        }
        Direction { dz, ds, dlam, dnu }
    }
}

/// Newton steps on the KKT system with a frozen active set, starting from `λ > s`.
///
/// Weakly active constraints leave the interior point `O(√μ)` away from the
/// solution. Constraints whose multiplier turns negative are released and
/// violated ones added until the guess is consistent. The result is kept only
/// if it meets the residual bound under an exact evaluation.
#[allow(clippy::too_many_arguments)]
fn polish(
    layout: &Layout,
    model: &Model,
    sol: &PrimalDualSolution,
    s: &[f64],
    r_d: &[f64],
    h: &[f64],
    opts: &SolverOptions,
    exact: &dyn Fn(&PrimalDualSolution) -> f64,
) -> Option<PrimalDualSolution> {
    const PENALTY: f64 = 1e8;
    const ROUNDS: usize = 8;
    let d = layout.dims;
    if d.n_g == 0 {
        return None;
    }
    let lam = sol.lambda_star.as_slice();
    let rc: Vec<f64> = lam.iter().zip(s).map(|(l, s)| l * s).collect();
    let r_p: Vec<f64> = model.at(sol.z_star.as_slice()).1.iter().zip(s).map(|(g, s)| g + s).collect();
    let mut active: Vec<bool> = lam.iter().zip(s).map(|(l, s)| l > s).collect();

    for _ in 0..ROUNDS {
        let sigma: Vec<f64> = active.iter().map(|&a| if a { PENALTY } else { 0.0 }).collect();
        let lam_f: Vec<f64> = (0..d.n_g).map(|i| if active[i] { lam[i] } else { 0.0 }).collect();
        let s_f: Vec<f64> = (0..d.n_g).map(|i| if active[i] { lam[i] / PENALTY } else { s[i] }).collect();
        let newton = Newton::factor(layout, model, &sigma, 0.0, 0.0).ok()?;
        let dir = newton.direction(model, r_d, &r_p, h, &s_f, &lam_f, &rc);
        let z: Vec<f64> = sol.z_star.iter().zip(&dir.dz).map(|(a, b)| a + b).collect();
        let lam_new: Vec<f64> = (0..d.n_g).map(|i| if active[i] { lam[i] + dir.dlam[i] } else { 0.0 }).collect();
        let (_, g, h_new) = model.at(&z);

        let mut changed = false;
        for i in 0..d.n_g {
            if active[i] && lam_new[i] < -opts.tol_kkt {
                active[i] = false;
                changed = true;
            } else if !active[i] && g[i] > opts.tol_feas {
                active[i] = true;
                changed = true;
            }
        }
        if changed {
            continue;
        }
        if !(inf_norm(&h_new) <= opts.tol_feas) {
            return None;
        }
        let nu: Vec<f64> = sol.nu_star.iter().zip(&dir.dnu).map(|(a, b)| a + b).collect();
        let mut out = PrimalDualSolution {
            z_star: DVector::from_vec(z),
            lambda_star: DVector::from_vec(lam_new.iter().map(|l| l.max(0.0)).collect()),
            nu_star: DVector::from_vec(nu),
            kkt_residual_norm: 0.0,
            barrier_final: 0.0,
            iterations: sol.iterations,
        };
        out.kkt_residual_norm = exact(&out);
        return (out.kkt_residual_norm <= opts.tol_kkt).then_some(out);
    }
    None
}

/// Solves the program at parameter `p`, optionally warm-started from `init`.
pub fn solve<P: ParamNlp + ?Sized>(
    nlp: &P,
    p: &[f64],
    init: Option<&PrimalDualSolution>,
    opts: &SolverOptions,
) -> Result<PrimalDualSolution, NlpError> {
    let layout = Layout::new(nlp)?;
    let d = layout.dims;
    check_len("p", d.n_p, p.len())?;
    if let Some(g) = init {
        check_len("initial z", d.n_z, g.z_star.len())?;
        check_len("initial lambda", d.n_g, g.lambda_star.len())?;
        check_len("initial nu", d.n_h, g.nu_star.len())?;
    }
    let push = opts.warm_margin;
    let mut z: Vec<f64> = init.map_or_else(|| vec![0.0; d.n_z], |g| g.z_star.as_slice().to_vec());
    let mut lam: Vec<f64> = init.map_or_else(|| vec![1.0; d.n_g], |g| g.lambda_star.iter().map(|l| l.max(push)).collect());
    let mut nu: Vec<f64> = init.map_or_else(|| vec![0.0; d.n_h], |g| g.nu_star.as_slice().to_vec());
    let mut structure = nlp.structure();
    let mut model = Model::build(nlp, &layout, &z, p, &lam, &nu)?;
    let floor = if init.is_some() { push } else { 1.0 };
    let mut s: Vec<f64> = model.g.iter().map(|&g| (-g).max(floor)).collect();
    let mut reg_w = 0.0;
    let mut started = d.n_g == 0 || init.is_some();

    for iter in 0..=opts.max_iter {
        if iter > 0 && structure == Structure::General {
            model = Model::build(nlp, &layout, &z, p, &lam, &nu)?;
        }
        let (grad, g, h) = model.at(&z);
        let mut r_d = grad;
        tr_mul(&model.jg, &lam, &mut r_d);
        tr_mul(&model.jh, &nu, &mut r_d);
        let r_p: Vec<f64> = g.iter().zip(&s).map(|(g, s)| g + s).collect();
        let mu = if d.n_g > 0 {
            s.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>() / d.n_g as f64
        } else {
            0.0
        };
        let comp = g.iter().zip(&lam).fold(0.0f64, |m, (g, l)| m.max((g * l).abs()));
        let kkt = inf_norm(&r_d).max(inf_norm(&h)).max(comp);
        let feas = g.iter().fold(0.0f64, |m, &v| m.max(v)).max(inf_norm(&h));
        if !kkt.is_finite() || !mu.is_finite() {
            return Err(NlpError::NonFinite);
        }
        trace!("ipm iter {iter}: kkt {kkt:.3e} feas {feas:.3e} mu {mu:.3e}");
        if kkt <= opts.tol_kkt && feas <= opts.tol_feas {
            let map = KktMap::with_blocks(nlp, layout.blocks.clone());
            let exact = |sol: &PrimalDualSolution| inf_norm(map.eval(&map.input(sol, p)).as_slice());
            let mut sol = PrimalDualSolution {
                z_star: DVector::from_vec(z.clone()),
                lambda_star: DVector::from_vec(lam.clone()),
                nu_star: DVector::from_vec(nu.clone()),
                kkt_residual_norm: kkt,
                barrier_final: mu,
                iterations: iter,
            };
            if structure != Structure::General {
                // Confirm the structural hint against an exact evaluation.
                sol.kkt_residual_norm = exact(&sol);
                if sol.kkt_residual_norm > opts.tol_kkt {
                    structure = Structure::General;
                    model = Model::build(nlp, &layout, &z, p, &lam, &nu)?;
                    continue;
                }
            }
            if let Some(polished) = polish(&layout, &model, &sol, &s, &r_d, &h, opts, &exact) {
                return Ok(polished);
            }
            return Ok(sol);
        }
        if iter == opts.max_iter {
            return Err(NlpError::MaxIterations {
                iterations: iter,
                residual: kkt,
            });
        }

        let sigma: Vec<f64> = lam.iter().zip(&s).map(|(l, s)| l / s).collect();
        let newton = loop {
            match Newton::factor(&layout, &model, &sigma, reg_w, if reg_w > 0.0 { 1e-10 } else { 0.0 }) {
                Ok(n) => break n,
                Err(LinalgError::NonFinite) => return Err(NlpError::NonFinite),
                Err(LinalgError::Singular { .. }) => {
                    reg_w = if reg_w == 0.0 { 1e-4 } else { reg_w * 100.0 };
                    if reg_w > 1e6 {
                        return Err(NlpError::Singular);
                    }
                }
            }
        };

        if !started {
            // Shift a full affine step into the interior as the starting point.
            let rc0: Vec<f64> = lam.iter().zip(&s).map(|(l, s)| l * s).collect();
            let aff = newton.direction(&model, &r_d, &r_p, &h, &s, &lam, &rc0);
            for (x, dx) in z.iter_mut().zip(&aff.dz) {
                *x += dx;
            }
            for (x, dx) in nu.iter_mut().zip(&aff.dnu) {
                *x += dx;
            }
            for i in 0..d.n_g {
                s[i] = (s[i] + aff.ds[i]).abs().max(1.0);
                lam[i] = (lam[i] + aff.dlam[i]).abs().max(1.0);
            }
            started = true;
            continue;
        }

        // Predictor
        let rc_aff: Vec<f64> = lam.iter().zip(&s).map(|(l, s)| l * s).collect();
        let aff = newton.direction(&model, &r_d, &r_p, &h, &s, &lam, &rc_aff);
        let rc = if d.n_g > 0 {
            let ap = max_step(&s, &aff.ds, 1.0);
            let ad = max_step(&lam, &aff.dlam, 1.0);
            let mu_aff = (0..d.n_g)
                .map(|i| (s[i] + ap * aff.ds[i]) * (lam[i] + ad * aff.dlam[i]))
                .sum::<f64>()
                / d.n_g as f64;
            let centering = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            (0..d.n_g)
                .map(|i| lam[i] * s[i] + aff.ds[i] * aff.dlam[i] - centering * mu)
                .collect()
        } else {
            rc_aff
        };
        let dir = if d.n_g > 0 {
            newton.direction(&model, &r_d, &r_p, &h, &s, &lam, &rc)
        } else {
            aff
        };
        let alpha = max_step(&s, &dir.ds, opts.tau).min(max_step(&lam, &dir.dlam, opts.tau));
        for (x, dx) in z.iter_mut().zip(&dir.dz) {
            *x += alpha * dx;
        }
        for (x, dx) in s.iter_mut().zip(&dir.ds) {
            *x += alpha * dx;
        }
        for (x, dx) in lam.iter_mut().zip(&dir.dlam) {
            *x += alpha * dx;
        }
        for (x, dx) in nu.iter_mut().zip(&dir.dnu) {
            *x += alpha * dx;
        }
    }
    unreachable!("loop returns on the final iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Scalar;
    use crate::nlp::examples::*;
    use crate::nlp::{kkt_residual, Block, BlockValue, NlpDims};
    use proptest::prelude::*;

    /// min ½z² s.t. 1 − z ≤ 0
    struct UnitBound;
    impl ParamNlp for UnitBound {
        fn dims(&self) -> NlpDims {
            NlpDims { n_z: 1, n_g: 1, n_h: 0, n_p: 0 }
        }
        fn eval_block<T: Scalar>(&self, _: usize, z: &[T], _: &[T]) -> BlockValue<T> {
            BlockValue {
                objective: z[0] * z[0] * 0.5,
                ineq: vec![-z[0] + 1.0],
                eq: vec![],
            }
        }
    }

    #[test]
    fn bound_constrained_scalar() {
        let sol = solve(&UnitBound, &[], None, &SolverOptions::default()).unwrap();
        assert!((sol.z_star[0] - 1.0).abs() < 1e-9);
        assert!((sol.lambda_star[0] - 1.0).abs() < 1e-9);
        assert!(sol.kkt_residual_norm <= 1e-10);
    }

    /// min ½(z − c)² s.t. −z ≤ 0, weakly active at c = 0
    struct Halfline;
    impl ParamNlp for Halfline {
        fn dims(&self) -> NlpDims {
            NlpDims { n_z: 1, n_g: 1, n_h: 0, n_p: 1 }
        }
        fn eval_block<T: Scalar>(&self, _: usize, z: &[T], p: &[T]) -> BlockValue<T> {
            let e = z[0] - p[0];
            BlockValue {
                objective: e * e * 0.5,
                ineq: vec![-z[0]],
                eq: vec![],
            }
        }
        fn structure(&self) -> Structure {
            Structure::Quadratic
        }
    }

    #[test]
    fn weakly_active_bound_is_resolved_exactly() {
        for c in [0.0, 1e-9, -1e-9] {
            let sol = solve(&Halfline, &[c], None, &SolverOptions::default()).unwrap();
            assert!((sol.z_star[0] - c.max(0.0)).abs() < 1e-12, "c {c}: z {}", sol.z_star[0]);
            assert!((sol.lambda_star[0] - (-c).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let sol = solve(&Linear, &[3.0], None, &SolverOptions::default()).unwrap();
        assert!((sol.z_star[0] - 3.0).abs() < 1e-12);
        assert_eq!(sol.lambda_star.len(), 0);
    }

    #[test]
    fn quartic_needs_regularized_start() {
        let sol = solve(&Quartic, &[1.0], None, &SolverOptions::default()).unwrap();
        assert!((sol.z_star[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let opts = SolverOptions { max_iter: 3, ..Default::default() };
        assert!(matches!(
            solve(&Chain { n: 12, bound: 0.3 }, &[0.5], None, &opts),
            Err(NlpError::MaxIterations { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            solve(&Linear, &[1.0, 2.0], None, &SolverOptions::default()),
            Err(NlpError::Dimension { what: "p", .. })
        ));
    }

    struct Blowup;
    impl ParamNlp for Blowup {
        fn dims(&self) -> NlpDims {
            NlpDims { n_z: 1, n_g: 0, n_h: 0, n_p: 0 }
        }
        fn eval_block<T: Scalar>(&self, _: usize, z: &[T], _: &[T]) -> BlockValue<T> {
            BlockValue {
                objective: z[0] * z[0] * f64::INFINITY,
                ineq: vec![],
                eq: vec![],
            }
        }
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        assert_eq!(
            solve(&Blowup, &[], None, &SolverOptions::default()).unwrap_err(),
            NlpError::NonFinite
        );
    }

    /// Strictly convex chain QP in stage blocks:
    /// min Σ (x_k − c_k)² + ½ u_k², x_{k+1} = x_k + u_k, x_0 = 0, |u_k| ≤ b
    struct Chain {
        n: usize,
        bound: f64,
    }
    impl ParamNlp for Chain {
        fn dims(&self) -> NlpDims {
            NlpDims { n_z: 2 * self.n, n_g: 2 * self.n, n_h: self.n, n_p: 1 }
        }
        fn blocks(&self) -> Vec<Block> {
            // z = (x_1..x_n, u_0..u_{n-1})
            (0..self.n)
                .map(|k| Block {
                    vars: if k == 0 { vec![self.n, 0] } else { vec![k - 1, self.n + k, k] },
                    ineq: 2 * k..2 * k + 2,
                    eq: k..k + 1,
                })
                .collect()
        }
        fn eval_block<T: Scalar>(&self, k: usize, z: &[T], p: &[T]) -> BlockValue<T> {
            let (x, u, xn) = if k == 0 { (T::zero(), z[0], z[1]) } else { (z[0], z[1], z[2]) };
            let target = p[0] * ((k + 1) as f64);
            let e = xn - target;
            BlockValue {
                objective: e * e + u * u * 0.5 + x * x * 1e-3,
                ineq: vec![u - self.bound, -u - self.bound],
                eq: vec![xn - x - u],
            }
        }
        fn structure(&self) -> Structure {
            Structure::Quadratic
        }
    }

    #[test]
    fn chain_solution_satisfies_kkt() {
        let nlp = Chain { n: 12, bound: 0.3 };
        let sol = solve(&nlp, &[0.5], None, &SolverOptions::default()).unwrap();
        let f = kkt_residual(&nlp, &sol, &[0.5]).unwrap();
        assert!(f.amax() <= 1e-10);
        assert!(sol.lambda_star.iter().all(|&l| l >= 0.0));
        let layout = Layout::new(&nlp).unwrap();
        assert!(layout.red_bw < 6, "banded ordering expected, got {}", layout.red_bw);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn convex_solution_is_unique(target in -1.0f64..1.0, start in prop::collection::vec(-2.0f64..2.0, 16)) {
            let nlp = Chain { n: 8, bound: 0.4 };
            let a = solve(&nlp, &[target], None, &SolverOptions::default()).unwrap();
            let guess = PrimalDualSolution {
                z_star: DVector::from_vec(start),
                lambda_star: DVector::zeros(16),
                nu_star: DVector::zeros(8),
                kkt_residual_norm: 0.0,
                barrier_final: 0.0,
                iterations: 0,
            };
            let b = solve(&nlp, &[target], Some(&guess), &SolverOptions::default()).unwrap();
            prop_assert!((&a.z_star - &b.z_star).amax() <= 1e-8);
            for i in 0..16 {
                prop_assert!(a.lambda_star[i] >= -1e-12);
            }
        }
    }
}
