//! Finite-difference audit of the solution sensitivities of the case-study OCP.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mpc::{MpcConfig, MpcError, Ocp, ThetaVector};
use crate::nlp::{self, constraints, PrimalDualSolution};
use crate::sens::{self, SensError, SensOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensCheckOptions {
    pub n_points: usize,
    pub seed: u64,
    pub first_step: f64,
    pub second_step: f64,
    pub first_tol: f64,
    pub second_tol: f64,
    pub symmetry_tol: f64,
    /// Points whose closest constraint is within this distance of switching
    /// between active and inactive are redrawn.
    pub active_set_margin: f64,
    /// Half-width of the uniform perturbation applied to every θ entry.
    pub theta_spread: f64,
}

impl Default for SensCheckOptions {
    fn default() -> Self {
        Self {
            n_points: 10,
            seed: 0,
            first_step: 1e-5,
            second_step: 1e-4,
            first_tol: 1e-4,
            second_tol: 1e-3,
            symmetry_tol: 1e-7,
            active_set_margin: 1e-3,
            theta_spread: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointReport {
    pub state: [f64; 2],
    pub theta: Vec<f64>,
    pub first_err: f64,
    pub second_err: f64,
    pub symmetry_err: f64,
    /// Set when the solver or the sensitivity computation refused the point.
    pub failure: Option<String>,
}

impl PointReport {
    pub fn passes(&self, opts: &SensCheckOptions) -> bool {
        self.failure.is_none()
            && self.first_err <= opts.first_tol
            && self.second_err <= opts.second_tol
            && self.symmetry_err <= opts.symmetry_tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensCheckReport {
    pub n_params: usize,
    pub points: Vec<PointReport>,
    /// Candidates redrawn because the active set was ambiguous there.
    pub redrawn: usize,
}

impl SensCheckReport {
    pub fn passes(&self, opts: &SensCheckOptions) -> bool {
        self.points.iter().all(|p| p.passes(opts))
    }

    pub fn max_first_err(&self) -> f64 {
        self.points.iter().map(|p| p.first_err).fold(0.0, f64::max)
    }

    pub fn max_second_err(&self) -> f64 {
        self.points.iter().map(|p| p.second_err).fold(0.0, f64::max)
    }

    pub fn max_symmetry_err(&self) -> f64 {
        self.points.iter().map(|p| p.symmetry_err).fold(0.0, f64::max)
    }
}

/// Normwise relative error `max|a − b| / max(max|a|, max|b|)`; zero when both vanish.
pub fn normwise_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).amax() / scale
    }
}

fn solve_at(ocp: &Ocp<'_, crate::mpc::CaseStudyModel>, p: &[f64], warm: &PrimalDualSolution, cfg: &MpcConfig) -> Result<PrimalDualSolution, MpcError> {
    Ok(nlp::solve(ocp, p, Some(warm), &cfg.solver)?)
}

fn active_set_gap(ocp: &Ocp<'_, crate::mpc::CaseStudyModel>, sol: &PrimalDualSolution, p: &[f64]) -> f64 {
    let (g, _) = constraints(ocp, sol.z_star.as_slice(), p);
    g.iter()
        .zip(sol.lambda_star.iter())
        .map(|(&gi, &li)| li.max(-gi))
        .fold(f64::INFINITY, f64::min)
}

fn shifted(p: &[f64], j: usize, h: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    q[j] += h;
    q
}

/// Compares `∂ξ*/∂p` and `∂²ξ*/∂p²` against central differences at random
/// `(s, θ)` pairs drawn around `theta`.
pub fn sens_check(cfg: &MpcConfig, theta: &ThetaVector, learn: &[usize], opts: &SensCheckOptions) -> Result<SensCheckReport, MpcError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sopts = SensOptions::default();
    let mut points = Vec::with_capacity(opts.n_points);
    let mut redrawn = 0;
    while points.len() < opts.n_points {
        let state = [rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0)];
        let th: Vec<f64> = theta
            .values
            .iter()
            .map(|&v| v + opts.theta_spread * rng.gen_range(-1.0..1.0))
            .collect();
        let mut report = PointReport {
            state,
            theta: th.clone(),
            first_err: 0.0,
            second_err: 0.0,
            symmetry_err: 0.0,
            failure: None,
        };
        if learn.is_empty() {
            points.push(report);
            continue;
        }
        let ocp = Ocp::new(cfg, &th, learn, &state)?;
        let p = ocp.params();
        let sol = match nlp::solve(&ocp, &p, None, &cfg.solver) {
            Ok(s) => s,
            Err(e) => {
                report.failure = Some(e.to_string());
                points.push(report);
                continue;
            }
        };
        let bundle = match sens::sensitivities(&ocp, &sol, &p, true, &sopts) {
            Ok(b) => b,
            Err(SensError::SingularKkt(_)) => {
                redrawn += 1;
                continue;
            }
            Err(e) => {
                report.failure = Some(e.to_string());
                points.push(report);
                continue;
            }
        };
        if active_set_gap(&ocp, &sol, &p) < opts.active_set_margin {
            redrawn += 1;
            continue;
        }
        match audit_point(cfg, &ocp, &sol, &p, &bundle, opts, &sopts) {
            Ok((e1, e2, sym)) => {
                report.first_err = e1;
                report.second_err = e2;
                report.symmetry_err = sym;
            }
            Err(e) => report.failure = Some(e.to_string()),
        }
        points.push(report);
    }
    Ok(SensCheckReport {
        n_params: learn.len(),
        points,
        redrawn,
    })
}

fn audit_point(
    cfg: &MpcConfig,
    ocp: &Ocp<'_, crate::mpc::CaseStudyModel>,
    sol: &PrimalDualSolution,
    p: &[f64],
    bundle: &sens::SensitivityBundle,
    opts: &SensCheckOptions,
    sopts: &SensOptions,
) -> Result<(f64, f64, f64), MpcError> {
    let np = p.len();
    let n = bundle.xi.len();
    let h1 = opts.first_step;
    let mut fd1 = DMatrix::zeros(n, np);
    for j in 0..np {
        let xp = solve_at(ocp, &shifted(p, j, h1), sol, cfg)?.xi();
        let xm = solve_at(ocp, &shifted(p, j, -h1), sol, cfg)?.xi();
        fd1.set_column(j, &((xp - xm) / (2.0 * h1)));
    }
    let first_err = normwise_rel_err(&bundle.first_order, &fd1);

    let s = bundle.second_order.as_ref().expect("second order requested");
    let h2 = opts.second_step;
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 0..np {
        let pp = shifted(p, k, h2);
        let pm = shifted(p, k, -h2);
        let sp = solve_at(ocp, &pp, sol, cfg)?;
        let sm = solve_at(ocp, &pm, sol, cfg)?;
        let (fp, _) = sens::first_order(ocp, &sp, &pp, sopts)?;
        let (fm, _) = sens::first_order(ocp, &sm, &pm, sopts)?;
        let fd = (fp - fm) / (2.0 * h2);
        let an = DMatrix::from_fn(n, np, |r, j| s[(r, j * np + k)]);
        diff = diff.max((&an - &fd).amax());
        scale = scale.max(an.amax()).max(fd.amax());
    }
    let second_err = if scale == 0.0 { 0.0 } else { diff / scale };
    let mut symmetry: f64 = 0.0;
    for j in 0..np {
        for k in j + 1..np {
            let d: DVector<f64> = s.column(j * np + k) - s.column(k * np + j);
            symmetry = symmetry.max(d.amax());
        }
    }
    Ok((first_err, second_err, symmetry))
}
