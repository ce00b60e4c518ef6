//! Parameterized MPC as a policy.
//!
//! The optimal control problem over horizon `N`
//!
//! ```text
//! min  γᴺ(V_f(x_N) + w_f·Σσ_N) + Σ_k γᵏ(ℓ(x_k, u_k) + w·Σσ_k)
//! s.t. x_{k+1} = f(x_k, u_k),  x_0 = s
//!      h(x_k, u_k) ≤ σ_k,  σ_k ≥ 0,  h_hard(u_k) ≤ 0,  h_f(x_N) ≤ σ_N,  σ_N ≥ 0
//! ```
//!
//! is transcribed with states as decision variables, one block per stage. The
//! decision vector is `(x_1..x_N, u_0..u_{N-1}, σ_0..σ_{N-1}, σ_N)`.

use std::ops::Range;

use nalgebra::{DVector, Matrix2};
use thiserror::Error;

use crate::ad::Scalar;
use crate::nlp::{self, Block, BlockValue, NlpDims, NlpError, ParamNlp, PrimalDualSolution, SolverOptions, Structure};
use crate::sens::{self, PolicyDerivatives, SensError, SensOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error("MPC solve failed: {0}")]
    Solve(#[from] NlpError),
    #[error(transparent)]
    Sens(#[from] SensError),
}

/// Stage-wise model of an optimal control problem, generic in the scalar type.
pub trait OcpModel: Sync + Send {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn theta_names(&self) -> Vec<String>;
    /// Rows of the softened path constraints `h`.
    fn n_soft(&self) -> usize;
    /// Rows of the hard path constraints (input bounds).
    fn n_hard(&self) -> usize;
    /// Rows of the softened terminal constraints.
    fn n_terminal(&self) -> usize;

    fn stage_cost<T: Scalar>(&self, x: &[T], u: &[T], theta: &[T]) -> T;
    fn terminal_cost<T: Scalar>(&self, x: &[T], theta: &[T]) -> T;
    /// Row-producing functions append their rows to `out`.
    fn dynamics<T: Scalar>(&self, x: &[T], u: &[T], theta: &[T], out: &mut Vec<T>);
    fn soft_path<T: Scalar>(&self, x: &[T], u: &[T], theta: &[T], out: &mut Vec<T>);
    fn hard_path<T: Scalar>(&self, u: &[T], theta: &[T], out: &mut Vec<T>);
    fn terminal<T: Scalar>(&self, x: &[T], theta: &[T], out: &mut Vec<T>);

    /// True when, for fixed parameters, costs are quadratic and constraints affine.
    fn is_linear_quadratic(&self) -> bool {
        false
    }
}

pub const THETA_NAMES: [&str; 8] = ["a11", "a12", "a22", "b1", "b2", "d1", "d2", "dx1"];

/// Learned linear model with offsets and a backoff on the first state's lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudyModel {
    pub s_lb: [f64; 2],
    pub s_ub: [f64; 2],
    pub a_lb: f64,
    pub a_ub: f64,
    pub terminal_weight: Matrix2<f64>,
}

impl Default for CaseStudyModel {
    fn default() -> Self {
        Self {
            s_lb: [0.0, -1.0],
            s_ub: [1.0, 1.0],
            a_lb: -1.0,
            a_ub: 1.0,
            terminal_weight: Matrix2::new(5.7, 1.3, 1.3, 3.3),
        }
    }
}

impl CaseStudyModel {
    fn state_rows<T: Scalar>(&self, x: &[T], theta: &[T], out: &mut Vec<T>) {
        out.extend([
            theta[7] - x[0] + self.s_lb[0],
            -x[1] + self.s_lb[1],
            x[0] - self.s_ub[0],
            x[1] - self.s_ub[1],
        ]);
    }
}

impl OcpModel for CaseStudyModel {
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
    }
    fn theta_names(&self) -> Vec<String> {
        THETA_NAMES.iter().map(|s| s.to_string()).collect()
    }
    fn n_soft(&self) -> usize {
        4
    }
    fn n_hard(&self) -> usize {
        2
    }
    fn n_terminal(&self) -> usize {
        4
    }

    fn stage_cost<T: Scalar>(&self, x: &[T], u: &[T], _: &[T]) -> T {
        x[0] * x[0] + x[1] * x[1] + u[0] * u[0] * 0.5
    }

    fn terminal_cost<T: Scalar>(&self, x: &[T], _: &[T]) -> T {
        let p = &self.terminal_weight;
        x[0] * x[0] * p[(0, 0)] + x[0] * x[1] * (p[(0, 1)] + p[(1, 0)]) + x[1] * x[1] * p[(1, 1)]
    }

    fn dynamics<T: Scalar>(&self, x: &[T], u: &[T], t: &[T], out: &mut Vec<T>) {
        out.extend([
            t[0] * x[0] + t[1] * x[1] + t[3] * u[0] + t[5],
            t[2] * x[1] + t[4] * u[0] + t[6],
        ]);
    }

    fn soft_path<T: Scalar>(&self, x: &[T], _: &[T], theta: &[T], out: &mut Vec<T>) {
        self.state_rows(x, theta, out);
    }

    fn hard_path<T: Scalar>(&self, u: &[T], _: &[T], out: &mut Vec<T>) {
        out.extend([-u[0] + self.a_lb, u[0] - self.a_ub]);
    }

    fn terminal<T: Scalar>(&self, x: &[T], theta: &[T], out: &mut Vec<T>) {
        self.state_rows(x, theta, out);
    }

    fn is_linear_quadratic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig<M = CaseStudyModel> {
    pub model: M,
    pub horizon: usize,
    pub discount: f64,
    pub slack_weight: f64,
    pub terminal_slack_weight: f64,
    pub solver: SolverOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            model: CaseStudyModel::default(),
            horizon: 10,
            discount: 1.0,
            slack_weight: 100.0,
            terminal_slack_weight: 100.0,
            solver: SolverOptions::default(),
        }
    }
}

impl<M: OcpModel> MpcConfig<M> {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::Config("horizon must be at least 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(MpcError::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        if !(self.slack_weight > 0.0 && self.terminal_slack_weight > 0.0) {
            return Err(MpcError::Config("slack weights must be positive".into()));
        }
        Ok(())
    }

    pub fn n_theta(&self) -> usize {
        self.model.theta_names().len()
    }

    /// Index range of `u_0` inside the decision vector.
    pub fn first_action_range(&self) -> Range<usize> {
        let start = self.horizon * self.model.n_x();
        start..start + self.model.n_u()
    }
}

/// Parameter vector with named entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: DVector<f64>,
    pub names: Vec<String>,
}

impl ThetaVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self, MpcError> {
        if names.len() != values.len() {
            return Err(MpcError::Config(format!(
                "{} parameter names for {} values",
                names.len(),
                values.len()
            )));
        }
        Ok(Self {
            values: DVector::from_vec(values),
            names,
        })
    }

    /// Starting point of learning: a deliberately wrong model with no offsets or backoff.
    pub fn initial() -> Self {
        Self::case_study(&[1.0, 0.25, 1.0, 0.1, 0.3, 0.0, 0.0, 0.0])
    }

    /// The true plant model, used by the benchmark controller.
    pub fn exact() -> Self {
        Self::case_study(&[0.9, 0.35, 1.1, 0.0813, 0.2, 0.0, 0.0, 0.0])
    }

    pub fn case_study(values: &[f64]) -> Self {
        Self::new(THETA_NAMES.iter().map(|s| s.to_string()).collect(), values.to_vec())
            .expect("eight case-study parameters")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Stage-wise transcription of the OCP at one initial state.
///
/// `learn` selects which entries of θ are exposed as NLP parameters; the
/// rest are frozen at their current values.
pub struct Ocp<'a, M: OcpModel> {
    cfg: &'a MpcConfig<M>,
    theta: Vec<f64>,
    learn: Vec<usize>,
    s: Vec<f64>,
    blocks: Vec<Block>,
}

struct Offsets {
    nx: usize,
    nu: usize,
    ns: usize,
    x: usize,
    u: usize,
    sigma: usize,
    sigma_n: usize,
    n_z: usize,
}

impl<'a, M: OcpModel> Ocp<'a, M> {
    pub fn new(cfg: &'a MpcConfig<M>, theta: &[f64], learn: &[usize], s: &[f64]) -> Result<Self, MpcError> {
        cfg.validate()?;
        let m = &cfg.model;
        if theta.len() != cfg.n_theta() {
            return Err(MpcError::Config(format!(
                "expected {} parameters, got {}",
                cfg.n_theta(),
                theta.len()
            )));
        }
        if s.len() != m.n_x() || s.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::Config(format!("initial state must be {} finite values", m.n_x())));
        }
        if learn.iter().any(|&i| i >= theta.len()) {
            return Err(MpcError::Config("learnable index out of range".into()));
        }
        let mut ocp = Self {
            cfg,
            theta: theta.to_vec(),
            learn: learn.to_vec(),
            s: s.to_vec(),
            blocks: Vec::new(),
        };
        ocp.blocks = ocp.make_blocks();
        Ok(ocp)
    }

    fn offsets(&self) -> Offsets {
        let m = &self.cfg.model;
        let n = self.cfg.horizon;
        let (nx, nu, ns) = (m.n_x(), m.n_u(), m.n_soft());
        let x = 0;
        let u = n * nx;
        let sigma = u + n * nu;
        let sigma_n = sigma + n * ns;
        Offsets {
            nx,
            nu,
            ns,
            x,
            u,
            sigma,
            sigma_n,
            n_z: sigma_n + m.n_terminal(),
        }
    }

    fn make_blocks(&self) -> Vec<Block> {
        let m = &self.cfg.model;
        let o = self.offsets();
        let n = self.cfg.horizon;
        let stage_ineq = 2 * o.ns + m.n_hard();
        let mut blocks = Vec::with_capacity(n + 1);
        for k in 0..n {
            let mut vars = Vec::new();
            if k > 0 {
                vars.extend(o.x + (k - 1) * o.nx..o.x + k * o.nx);
            }
            vars.extend(o.u + k * o.nu..o.u + (k + 1) * o.nu);
            vars.extend(o.sigma + k * o.ns..o.sigma + (k + 1) * o.ns);
            vars.extend(o.x + k * o.nx..o.x + (k + 1) * o.nx);
            blocks.push(Block {
                vars,
                ineq: k * stage_ineq..(k + 1) * stage_ineq,
                eq: k * o.nx..(k + 1) * o.nx,
            });
        }
        let nt = m.n_terminal();
        let mut vars: Vec<usize> = (o.x + (n - 1) * o.nx..o.x + n * o.nx).collect();
        vars.extend(o.sigma_n..o.sigma_n + nt);
        blocks.push(Block {
            vars,
            ineq: n * stage_ineq..n * stage_ineq + 2 * nt,
            eq: n * o.nx..n * o.nx,
        });
        blocks
    }

    /// Parameter vector seen by the NLP.
    pub fn params(&self) -> Vec<f64> {
        self.learn.iter().map(|&i| self.theta[i]).collect()
    }

    pub fn first_action_range(&self) -> Range<usize> {
        self.cfg.first_action_range()
    }

    fn full_theta<T: Scalar>(&self, p: &[T]) -> Vec<T> {
        let mut th: Vec<T> = self.theta.iter().map(|&v| T::from_f64(v)).collect();
        for (&i, &v) in self.learn.iter().zip(p) {
            th[i] = v;
        }
        th
    }

    /// Objective recomputed directly from a decision vector.
    pub fn objective_value(&self, z: &[f64]) -> f64 {
        nlp::objective(self, z, &self.params())
    }
}

impl<M: OcpModel> ParamNlp for Ocp<'_, M> {
    fn dims(&self) -> NlpDims {
        let m = &self.cfg.model;
        let o = self.offsets();
        let n = self.cfg.horizon;
        NlpDims {
            n_z: o.n_z,
            n_g: n * (2 * o.ns + m.n_hard()) + 2 * m.n_terminal(),
            n_h: n * o.nx,
            n_p: self.learn.len(),
        }
    }

    fn blocks(&self) -> Vec<Block> {
        self.blocks.clone()
    }

    fn eval_block<T: Scalar>(&self, b: usize, z: &[T], p: &[T]) -> BlockValue<T> {
        let m = &self.cfg.model;
        let n = self.cfg.horizon;
        let th = self.full_theta(p);
        let (nx, nu, ns) = (m.n_x(), m.n_u(), m.n_soft());
        if b == n {
            let nt = m.n_terminal();
            let (x, sig) = z.split_at(nx);
            let w = n as i32;
            let weight = self.cfg.discount.powi(w);
            let mut obj = m.terminal_cost(x, &th);
            for &s in sig {
                obj += s * self.cfg.terminal_slack_weight;
            }
            let mut ineq = Vec::with_capacity(2 * nt);
            m.terminal(x, &th, &mut ineq);
            for (h, &s) in ineq.iter_mut().zip(sig) {
                *h -= s;
            }
            ineq.extend(sig.iter().map(|&s| -s));
            debug_assert_eq!(ineq.len(), 2 * nt);
            return BlockValue {
                objective: obj * weight,
                ineq,
                eq: vec![],
            };
        }
        let x0: Vec<T>;
        let (x, rest): (&[T], &[T]) = if b == 0 {
            x0 = self.s.iter().map(|&v| T::from_f64(v)).collect();
            (&x0, z)
        } else {
            z.split_at(nx)
        };
        let u = &rest[..nu];
        let sig = &rest[nu..nu + ns];
        let xn = &rest[nu + ns..nu + ns + nx];
        let mut obj = m.stage_cost(x, u, &th);
        for &s in sig {
            obj += s * self.cfg.slack_weight;
        }
        let mut ineq = Vec::with_capacity(2 * ns + m.n_hard());
        m.soft_path(x, u, &th, &mut ineq);
        for (h, &s) in ineq.iter_mut().zip(sig) {
            *h -= s;
        }
        ineq.extend(sig.iter().map(|&s| -s));
        m.hard_path(u, &th, &mut ineq);
        let mut eq = Vec::with_capacity(nx);
        m.dynamics(x, u, &th, &mut eq);
        for (f, &xk) in eq.iter_mut().zip(xn) {
            *f = xk - *f;
        }
        BlockValue {
            objective: obj * self.cfg.discount.powi(b as i32),
            ineq,
            eq,
        }
    }

    fn structure(&self) -> Structure {
        if self.cfg.model.is_linear_quadratic() {
            Structure::Quadratic
        } else {
            Structure::General
        }
    }
}

/// Transcribes the OCP at state `s` with every θ entry learnable.
pub fn build_ocp<'a, M: OcpModel>(
    cfg: &'a MpcConfig<M>,
    theta: &ThetaVector,
    s: &[f64],
) -> Result<(Ocp<'a, M>, Range<usize>), MpcError> {
    let all: Vec<usize> = (0..theta.len()).collect();
    let ocp = Ocp::new(cfg, theta.values.as_slice(), &all, s)?;
    let r = ocp.first_action_range();
    Ok((ocp, r))
}

/// Shifts a solution one stage forward to seed the next solve along a trajectory.
pub fn shift_solution<M: OcpModel>(cfg: &MpcConfig<M>, sol: &PrimalDualSolution) -> PrimalDualSolution {
    let m = &cfg.model;
    let n = cfg.horizon;
    let (nx, nu, ns) = (m.n_x(), m.n_u(), m.n_soft());
    let z = &sol.z_star;
    let mut out = z.clone();
    let shift = |out: &mut DVector<f64>, start: usize, width: usize| {
        for k in 0..n - 1 {
            for i in 0..width {
                out[start + k * width + i] = z[start + (k + 1) * width + i];
            }
        }
    };
    shift(&mut out, 0, nx);
    shift(&mut out, n * nx, nu);
    shift(&mut out, n * (nx + nu), ns);
    let shift_rows = |v: &DVector<f64>, width: usize| {
        let mut o = v.clone();
        for k in 0..n - 1 {
            for i in 0..width {
                o[k * width + i] = v[(k + 1) * width + i];
            }
        }
        o
    };
    let stage_ineq = 2 * ns + m.n_hard();
    PrimalDualSolution {
        z_star: out,
        lambda_star: shift_rows(&sol.lambda_star, stage_ineq),
        nu_star: shift_rows(&sol.nu_star, nx),
        ..sol.clone()
    }
}

/// The MPC policy `s ↦ u_0*(s; θ)`.
#[derive(Debug, Clone)]
pub struct MpcPolicy<M: OcpModel = CaseStudyModel> {
    pub cfg: MpcConfig<M>,
    pub theta: ThetaVector,
    /// Indices of θ that are differentiated and learned.
    pub learn: Vec<usize>,
}

impl<M: OcpModel> MpcPolicy<M> {
    pub fn new(cfg: MpcConfig<M>, theta: ThetaVector) -> Result<Self, MpcError> {
        cfg.validate()?;
        if theta.len() != cfg.n_theta() {
            return Err(MpcError::Config(format!(
                "expected {} parameters, got {}",
                cfg.n_theta(),
                theta.len()
            )));
        }
        let learn = (0..theta.len()).collect();
        Ok(Self { cfg, theta, learn })
    }

    pub fn with_learnable(mut self, learn: Vec<usize>) -> Result<Self, MpcError> {
        if learn.iter().any(|&i| i >= self.theta.len()) {
            return Err(MpcError::Config("learnable index out of range".into()));
        }
        self.learn = learn;
        Ok(self)
    }

    pub fn ocp(&self, s: &[f64]) -> Result<Ocp<'_, M>, MpcError> {
        Ocp::new(&self.cfg, self.theta.values.as_slice(), &self.learn, s)
    }

    /// Solves the OCP at `s` and returns the first control move and the full solution.
    pub fn act(&self, s: &[f64], warm: Option<&PrimalDualSolution>) -> Result<(DVector<f64>, PrimalDualSolution), MpcError> {
        let ocp = self.ocp(s)?;
        let p = ocp.params();
        let sol = match warm.map(|w| nlp::solve(&ocp, &p, Some(w), &self.cfg.solver)) {
            Some(Ok(sol)) => sol,
            _ => nlp::solve(&ocp, &p, None, &self.cfg.solver)?,
        };
        let r = ocp.first_action_range();
        Ok((sol.z_star.rows(r.start, r.len()).into_owned(), sol))
    }

    /// Action and its derivatives with respect to the learnable parameters.
    pub fn policy_derivatives(
        &self,
        s: &[f64],
        second: bool,
        opts: &SensOptions,
    ) -> Result<(PolicyDerivatives, PrimalDualSolution), MpcError> {
        let ocp = self.ocp(s)?;
        let p = ocp.params();
        let sol = nlp::solve(&ocp, &p, None, &self.cfg.solver)?;
        let bundle = sens::sensitivities(&ocp, &sol, &p, second, opts)?;
        let pd = sens::extract_policy(&bundle, ocp.first_action_range())?;
        Ok((pd, sol))
    }

    pub fn learnable_values(&self) -> Vec<f64> {
        self.learn.iter().map(|&i| self.theta.values[i]).collect()
    }

    pub fn set_learnable_values(&mut self, v: &[f64]) {
        for (&i, &x) in self.learn.iter().zip(v) {
            self.theta.values[i] = x;
        }
    }
}

/// Closed-loop wrapper that warm-starts each solve from the shifted previous solution.
#[derive(Debug)]
pub struct MpcController<'a, M: OcpModel = CaseStudyModel> {
    policy: &'a MpcPolicy<M>,
    warm: Option<PrimalDualSolution>,
}

impl<'a, M: OcpModel> MpcController<'a, M> {
    pub fn new(policy: &'a MpcPolicy<M>) -> Self {
        Self { policy, warm: None }
    }

    pub fn act(&mut self, s: &[f64]) -> Result<DVector<f64>, MpcError> {
        let (u, sol) = self.policy.act(s, self.warm.as_ref())?;
        self.warm = Some(shift_solution(&self.policy.cfg, &sol));
        Ok(u)
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }
}

/// Reference controller: exact model and a long horizon.
pub fn benchmark_policy(horizon: usize) -> MpcPolicy {
    let cfg = MpcConfig {
        horizon,
        ..MpcConfig::default()
    };
    MpcPolicy::new(cfg, ThetaVector::exact()).expect("valid benchmark configuration")
}
