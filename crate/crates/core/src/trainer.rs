//! Policy gradient and Hessian estimates, trust-region machinery and the outer training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::env::{fmt_f64, mpc_rollout, Exploration, LinearPlant, ReplayBuffer, State, Trajectory, Transition};
use crate::mpc::{MpcError, MpcPolicy, OcpModel};
use crate::qfun::{q_value_grad_hess, train_q, LabeledSet, MlpQ, QConfig, QError};
use crate::sens::{SensError, SensOptions};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no samples to average over")]
    EmptyBuffer,
    #[error("trust-region ratio undefined: predicted decrease is zero")]
    DegenerateDenominator,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Q(#[from] QError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Gd,
    GdTr,
    Qn,
    QnTr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Gd, Variant::GdTr, Variant::Qn, Variant::QnTr];

    pub fn trust_region(self) -> bool {
        matches!(self, Variant::GdTr | Variant::QnTr)
    }

    pub fn second_order(self) -> bool {
        matches!(self, Variant::Qn | Variant::QnTr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gd => "gd",
            Variant::GdTr => "gd-tr",
            Variant::Qn => "qn",
            Variant::QnTr => "qn-tr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown variant `{s}`; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Learning rate of the variants without trust region.
    pub alpha: f64,
    pub delta0: f64,
    pub delta_max: f64,
    /// Stop once `‖g‖₂ ≤ eps`.
    pub eps: f64,
    pub n_ic: usize,
    pub n_ep: usize,
    pub n_r: usize,
    pub exploration_std: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub q: QConfig,
    pub sens: SensOptions,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (alpha, delta0) = match variant {
            Variant::Gd => (1e-4, 1e-2),
            Variant::GdTr => (1e-2, 1e-3),
            Variant::Qn | Variant::QnTr => (1e-2, 1e-2),
        };
        Self {
            variant,
            alpha,
            delta0,
            delta_max: 1e-1,
            eps: 1e-6,
            n_ic: 50,
            n_ep: 50,
            n_r: 250,
            exploration_std: 0.1,
            max_iter: 30,
            seed: 1,
            q: QConfig::default(),
            sens: SensOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("alpha", self.alpha),
            ("delta0", self.delta0),
            ("delta_max", self.delta_max),
            ("eps", self.eps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if self.delta0 > self.delta_max {
            return Err(TrainError::Config("delta0 exceeds delta_max".into()));
        }
        if self.n_ic == 0 || self.n_ep == 0 || self.n_r == 0 {
            return Err(TrainError::Config("n_ic, n_ep and n_r must be at least 1".into()));
        }
        if !(self.exploration_std >= 0.0 && self.exploration_std.is_finite()) {
            return Err(TrainError::Config("exploration_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Policy and Q derivatives at one buffered state, evaluated at `a = π_θ(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    /// `∇θπ`, `n_a × n_θ`.
    pub d_action: DMatrix<f64>,
    /// `∇²θπ_m` per action component; empty for first-order variants.
    pub d2_action: Vec<DMatrix<f64>>,
    pub q_grad: DVector<f64>,
    pub q_hess: DMatrix<f64>,
}

/// Sample mean of `∇θπᵀ ∇aQ`.
pub fn dpg_gradient(samples: &[PolicySample]) -> Result<DVector<f64>, TrainError> {
    let first = samples.first().ok_or(TrainError::EmptyBuffer)?;
    let mut g = DVector::zeros(first.d_action.ncols());
    for s in samples {
        g += s.d_action.tr_mul(&s.q_grad);
    }
    Ok(g / samples.len() as f64)
}

/// Sample mean of `Σ_m ∇²θπ_m (∇aQ)_m + ∇θπᵀ ∇²aQ ∇θπ`, symmetrized.
pub fn policy_hessian(samples: &[PolicySample]) -> Result<DMatrix<f64>, TrainError> {
    let first = samples.first().ok_or(TrainError::EmptyBuffer)?;
    let n = first.d_action.ncols();
    let mut h = DMatrix::zeros(n, n);
    for s in samples {
        for (d2, &qa) in s.d2_action.iter().zip(s.q_grad.iter()) {
            h += d2 * qa;
        }
        h += s.d_action.tr_mul(&(&s.q_hess * &s.d_action));
    }
    h /= samples.len() as f64;
    Ok((&h + h.transpose()) * 0.5)
}

/// Agreement between observed and predicted decrease.
pub fn tr_ratio(j_prev: f64, j_curr: f64, q_pred: f64) -> Result<f64, TrainError> {
    let predicted = j_prev - q_pred;
    if predicted.abs() < 1e-14 {
        return Err(TrainError::DegenerateDenominator);
    }
    Ok((j_prev - j_curr) / predicted)
}

fn ratio_or_fallback(j_prev: f64, j_curr: f64, q_pred: f64) -> f64 {
    match tr_ratio(j_prev, j_curr, q_pred) {
        Ok(rho) => rho,
        Err(_) if (j_prev - j_curr).abs() < 1e-14 => 1.0,
        Err(_) => 0.0,
    }
}

pub fn tr_radius_update(delta: f64, delta_max: f64, rho: f64, step_norm: f64) -> f64 {
    if rho < 0.25 {
        step_norm / 4.0
    } else if rho > 0.75 && step_norm >= 0.99 * delta {
        (2.0 * delta).min(delta_max)
    } else {
        delta.min(delta_max)
    }
}

/// Global minimizer of `gᵀp + ½pᵀHp` over `‖p‖₂ ≤ δ`.
pub fn solve_tr_subproblem(g: &DVector<f64>, h: &DMatrix<f64>, delta: f64) -> DVector<f64> {
    let n = g.len();
    if n == 0 {
        return DVector::zeros(0);
    }
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let lam = &eig.eigenvalues;
    let q = &eig.eigenvectors;
    let gt = q.tr_mul(g);
    let lmin = lam.min();
    let scale = lam.amax().max(1.0);
    let step = |mu: f64| -> DVector<f64> {
        let coef = DVector::from_iterator(n, gt.iter().zip(lam.iter()).map(|(gi, li)| -gi / (li + mu)));
        q * coef
    };
    let norm_at = |mu: f64| -> f64 {
        gt.iter()
            .zip(lam.iter())
            .map(|(gi, li)| (gi / (li + mu)).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    if lmin > 0.0 {
        let p = step(0.0);
        if p.norm() <= delta {
            return p;
        }
    }

    let gnorm = g.norm();
    let floor = (-lmin).max(0.0);
    let tiny = 1e-12 * scale;
    let in_min_space = |i: usize| lam[i] - lmin <= tiny;
    let hard = lmin <= 0.0 && (0..n).filter(|&i| in_min_space(i)).all(|i| gt[i].abs() <= 1e-12 * gnorm.max(1e-300));
    if hard {
        let coef = DVector::from_iterator(
            n,
            (0..n).map(|i| if in_min_space(i) { 0.0 } else { -gt[i] / (lam[i] - lmin) }),
        );
        let p0 = q * &coef;
        let r = p0.norm();
        if r <= delta {
            let u = q.column(lam.imin()).into_owned();
            let tau = (delta * delta - r * r).max(0.0).sqrt();
            let cand = [&p0 + &u * tau, &p0 - &u * tau];
            let model = |p: &DVector<f64>| g.dot(p) + 0.5 * p.dot(&(h * p));
            return if model(&cand[0]) <= model(&cand[1]) {
                cand[0].clone()
            } else {
                cand[1].clone()
            };
        }
    }

    // ‖p(μ)‖ decreases monotonically on (floor, ∞); solve 1/‖p(μ)‖ = 1/δ.
    let mut lo = floor;
    let mut hi = floor + gnorm / delta + tiny;
    while norm_at(hi) > delta {
        hi = 2.0 * hi + tiny;
    }
    let mut mu = hi;
    for _ in 0..200 {
        let pn = norm_at(mu);
        let phi = 1.0 / pn - 1.0 / delta;
        if phi.abs() <= 1e-15 / delta {
            break;
        }
        if phi > 0.0 {
            hi = mu;
        } else {
            lo = mu;
        }
        let dpn: f64 = -gt
            .iter()
            .zip(lam.iter())
            .map(|(gi, li)| gi * gi / (li + mu).powi(3))
            .sum::<f64>()
            / pn;
        let newton = mu + phi * pn * pn / dpn;
        mu = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    let p = step(mu);
    let pn = p.norm();
    if pn > delta {
        return p * (delta / pn);
    }
    // Nearly hard case: μ sits within round-off of −λ_min and ‖p‖ falls short
    // of δ; complete the step along the leftmost eigenvector.
    let model = |p: &DVector<f64>| g.dot(p) + 0.5 * p.dot(&(h * p));
    let u = q.column(lam.imin()).into_owned();
    let pu = p.dot(&u);
    let disc = (pu * pu + delta * delta - pn * pn).max(0.0).sqrt();
    [&p + &u * (-pu + disc), &p + &u * (-pu - disc)]
        .into_iter()
        .fold(p.clone(), |best, c| if model(&c) < model(&best) { c } else { best })
}

pub fn first_order_step(g: &DVector<f64>, alpha: f64) -> DVector<f64> {
    g * -alpha
}

/// Solves `(H + τI) p = −αg` with `τ = max(0, 1e-8 − λ_min(H))`.
pub fn quasi_newton_step(g: &DVector<f64>, h: &DMatrix<f64>, alpha: f64) -> DVector<f64> {
    let n = g.len();
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let tau = (1e-8 - eig.eigenvalues.min()).max(0.0);
    let shifted = sym + DMatrix::identity(n, n) * tau;
    let rhs = g * -alpha;
    match shifted.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let qt = eig.eigenvectors.tr_mul(&rhs);
            let coef = DVector::from_iterator(n, qt.iter().zip(eig.eigenvalues.iter()).map(|(r, l)| r / (l + tau)));
            &eig.eigenvectors * coef
        }
    }
}

fn model_value(g: &DVector<f64>, h: &DMatrix<f64>, p: &DVector<f64>) -> f64 {
    g.dot(p) + 0.5 * p.dot(&(h * p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    pub j: f64,
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Learnable values of the last accepted iterate.
    pub theta: Vec<f64>,
    /// Learnable values sampled at each iteration.
    pub theta_history: Vec<Vec<f64>>,
    pub log: Vec<TrainLogRow>,
    pub q: Option<MlpQ>,
    pub converged: bool,
    pub skipped_samples: usize,
}

/// Fixed training initial conditions drawn uniformly from the state box.
pub fn training_initial_states(plant: &LinearPlant, seed: u64, n: usize) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| plant.sample_state(&mut rng)).collect()
}

fn is_skippable(e: &MpcError) -> bool {
    matches!(
        e,
        MpcError::Sens(SensError::SingularKkt(_)) | MpcError::Sens(SensError::InaccurateSolution(_))
    )
}

/// Policy and Q derivatives over the buffer; degenerate states are dropped.
pub fn buffer_samples<M: OcpModel>(
    policy: &MpcPolicy<M>,
    q: &MlpQ,
    states: &[State],
    second: bool,
    opts: &SensOptions,
) -> Result<(Vec<PolicySample>, usize), TrainError> {
    let results: Vec<Result<Option<PolicySample>, MpcError>> = states
        .par_iter()
        .map(|s| match policy.policy_derivatives(s, second, opts) {
            Ok((pd, _)) => {
                let (_, q_grad, q_hess) = q_value_grad_hess(q, s, pd.action.as_slice());
                Ok(Some(PolicySample {
                    d_action: pd.d_action,
                    d2_action: pd.d2_action,
                    q_grad,
                    q_hess,
                }))
            }
            Err(e) if is_skippable(&e) => {
                log::warn!("skipping sample at {s:?}: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect();
    let mut samples = Vec::with_capacity(states.len());
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    Ok((samples, skipped))
}

fn sample_iteration<M: OcpModel>(
    plant: &LinearPlant,
    policy: &MpcPolicy<M>,
    ics: &[State],
    cfg: &TrainConfig,
) -> Result<Vec<Trajectory>, MpcError> {
    ics.par_iter()
        .enumerate()
        .map(|(i, &s0)| {
            let mut noise = Exploration::new(cfg.seed, i as u64 + 1, cfg.exploration_std);
            mpc_rollout(plant, policy, s0, cfg.n_ep, Some(&mut noise))
        })
        .collect()
}

/// The trust-region quasi-Newton iteration and its first-order / untrusted variants.
pub fn train<M: OcpModel>(cfg: &TrainConfig, plant: &LinearPlant, policy: MpcPolicy<M>) -> Result<TrainOutcome, TrainError> {
    let ics = training_initial_states(plant, cfg.seed, cfg.n_ic);
    train_from(cfg, plant, policy, &ics)
}

/// As [`train`], with an explicit fixed set of initial conditions.
pub fn train_from<M: OcpModel>(
    cfg: &TrainConfig,
    plant: &LinearPlant,
    mut policy: MpcPolicy<M>,
    ics: &[State],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if ics.is_empty() {
        return Err(TrainError::Config("no initial conditions".into()));
    }
    let started = Instant::now();
    let variant = cfg.variant;
    let mut buffer = ReplayBuffer::new(cfg.n_r);
    let mut theta = policy.learnable_values();
    let mut accepted_theta = theta.clone();
    let mut j_accepted = f64::NAN;
    let mut delta = cfg.delta0;
    let mut cache: Option<(DVector<f64>, DMatrix<f64>)> = None;
    let mut q_net: Option<MlpQ> = None;
    let mut pending: Option<(f64, f64)> = None;
    let mut out = TrainOutcome {
        theta: theta.clone(),
        theta_history: Vec::new(),
        log: Vec::new(),
        q: None,
        converged: false,
        skipped_samples: 0,
    };

    for iter in 0..cfg.max_iter {
        policy.set_learnable_values(&theta);
        let trajs = sample_iteration(plant, &policy, ics, cfg)?;
        let mut fresh: Vec<Transition> = trajs.iter().flat_map(Trajectory::transitions).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(iter as u64 + 1);
        fresh.shuffle(&mut order_rng);
        buffer.extend(fresh);
        let j = trajs.iter().map(|t| t.total_cost).sum::<f64>() / trajs.len() as f64;
        out.theta_history.push(theta.clone());

        let mut rho = None;
        let accept = match pending {
            Some((q_pred, step_norm)) if variant.trust_region() => {
                let r = ratio_or_fallback(j_accepted, j, q_pred);
                delta = tr_radius_update(delta, cfg.delta_max, r, step_norm);
                rho = Some(r);
                r > 0.0
            }
            _ => true,
        };

        if accept {
            accepted_theta.clone_from(&theta);
            j_accepted = j;
            let states: Vec<State> = buffer.iter().map(|t| t.s_next).collect();
            let next_actions = states
                .par_iter()
                .map(|s| policy.act(s, None).map(|(u, _)| u[0]))
                .collect::<Result<Vec<_>, _>>()?;
            let set = LabeledSet {
                transitions: buffer.iter().copied().collect(),
                next_actions,
            };
            let q_cfg = QConfig {
                seed: cfg.q.seed ^ cfg.seed.rotate_left(17) ^ iter as u64,
                ..cfg.q.clone()
            };
            let q = train_q(&set, q_net.as_ref(), &q_cfg)?;
            let visited: Vec<State> = buffer.iter().map(|t| t.s).collect();
            let (samples, skipped) = buffer_samples(&policy, &q, &visited, variant.second_order(), &cfg.sens)?;
            out.skipped_samples += skipped;
            let g = dpg_gradient(&samples)?;
            let h = if variant.second_order() {
                policy_hessian(&samples)?
            } else {
                DMatrix::zeros(g.len(), g.len())
            };
            cache = Some((g, h));
            q_net = Some(q);
        } else {
            theta.clone_from(&accepted_theta);
        }

        let (g, h) = cache.as_ref().expect("gradient computed on the first iteration");
        let grad_norm = g.norm();
        let mut row = TrainLogRow {
            iter,
            j,
            rho,
            delta: variant.trust_region().then_some(delta),
            grad_norm,
            step_norm: 0.0,
            accepted: accept,
            wall_time_s: 0.0,
        };
        if grad_norm <= cfg.eps {
            row.wall_time_s = started.elapsed().as_secs_f64();
            out.log.push(row);
            out.converged = true;
            break;
        }
        let step = match variant {
            Variant::Gd => first_order_step(g, cfg.alpha),
            Variant::GdTr => solve_tr_subproblem(g, &DMatrix::zeros(g.len(), g.len()), delta),
            Variant::Qn => quasi_newton_step(g, h, cfg.alpha),
            Variant::QnTr => solve_tr_subproblem(g, h, delta),
        };
        let q_pred = j_accepted + model_value(g, h, &step);
        pending = Some((q_pred, step.norm()));
        row.step_norm = step.norm();
        row.wall_time_s = started.elapsed().as_secs_f64();
        log::info!(
            "iter {iter}: J={j:.6} rho={rho:?} delta={delta:.3e} |g|={grad_norm:.3e} |step|={:.3e}",
            row.step_norm
        );
        out.log.push(row);
        for (t, d) in theta.iter_mut().zip(step.iter()) {
            *t += d;
        }
    }
    out.theta = accepted_theta;
    out.q = q_net;
    Ok(out)
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Per-iteration log; `with_time` adds the non-reproducible wall-clock column.
pub fn write_log<W: Write>(rows: &[TrainLogRow], with_time: bool, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter", "J", "rho", "delta", "grad_norm", "step_norm", "accepted_flag"];
    if with_time {
        header.push("wall_time_s");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.iter.to_string(),
            fmt_f64(r.j),
            opt_f64(r.rho),
            opt_f64(r.delta),
            fmt_f64(r.grad_norm),
            fmt_f64(r.step_norm),
            u8::from(r.accepted).to_string(),
        ];
        if with_time {
            rec.push(fmt_f64(r.wall_time_s));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn linear_sample(s: f64, theta: f64) -> PolicySample {
        // π = θ s, Q = a²
        PolicySample {
            d_action: DMatrix::from_element(1, 1, s),
            d2_action: vec![DMatrix::zeros(1, 1)],
            q_grad: DVector::from_element(1, 2.0 * theta * s),
            q_hess: DMatrix::from_element(1, 1, 2.0),
        }
    }

    #[test]
    fn gradient_examples() {
        let g = dpg_gradient(&[linear_sample(1.0, 0.3)]).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15);
        let theta = 0.7;
        let g = dpg_gradient(&[linear_sample(1.0, theta), linear_sample(2.0, theta)]).unwrap();
        assert!((g[0] - 5.0 * theta).abs() < 1e-14);
        let mut flat = linear_sample(1.0, 0.3);
        flat.q_grad.fill(0.0);
        assert_eq!(dpg_gradient(&[flat]).unwrap()[0], 0.0);
        assert!(matches!(dpg_gradient(&[]), Err(TrainError::EmptyBuffer)));
    }

    #[test]
    fn hessian_examples() {
        let h = policy_hessian(&[linear_sample(1.0, 0.3)]).unwrap();
        assert_eq!(h[(0, 0)], 2.0);
        // π = θ² s at θ = 1, s = 1 with Q = a
        let quad = PolicySample {
            d_action: DMatrix::from_element(1, 1, 2.0),
            d2_action: vec![DMatrix::from_element(1, 1, 2.0)],
            q_grad: DVector::from_element(1, 1.0),
            q_hess: DMatrix::zeros(1, 1),
        };
        assert_eq!(policy_hessian(&[quad]).unwrap()[(0, 0)], 2.0);
        let mut zero = linear_sample(1.0, 0.3);
        zero.q_grad.fill(0.0);
        zero.q_hess.fill(0.0);
        assert_eq!(policy_hessian(&[zero]).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn hessian_is_symmetrized() {
        let s = PolicySample {
            d_action: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            d2_action: vec![DMatrix::from_row_slice(2, 2, &[1.0, 3.0, -1.0, 0.5])],
            q_grad: DVector::from_element(1, 1.5),
            q_hess: DMatrix::from_element(1, 1, 0.2),
        };
        let h = policy_hessian(&[s]).unwrap();
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(tr_ratio(10.0, 9.0, 8.0).unwrap(), 0.5);
        assert_eq!(tr_ratio(10.0, 8.0, 8.0).unwrap(), 1.0);
        assert_eq!(tr_ratio(10.0, 11.0, 8.0).unwrap(), -0.5);
        assert!(matches!(tr_ratio(1.0, 0.5, 1.0), Err(TrainError::DegenerateDenominator)));
        assert_eq!(ratio_or_fallback(1.0, 1.0, 1.0), 1.0);
        assert_eq!(ratio_or_fallback(1.0, 0.5, 1.0), 0.0);
    }

    #[test]
    fn radius_examples() {
        assert!((tr_radius_update(0.05, 0.1, 0.1, 0.04) - 0.01).abs() < 1e-16);
        assert_eq!(tr_radius_update(0.05, 0.1, 0.9, 0.05), 0.1);
        assert_eq!(tr_radius_update(0.05, 0.1, 0.5, 0.05), 0.05);
        assert_eq!(tr_radius_update(0.05, 0.1, 0.9, 0.01), 0.05);
    }

    #[test]
    fn subproblem_examples() {
        let mut g = DVector::zeros(8);
        g[0] = 1.0;
        let h = DMatrix::identity(8, 8);
        let p = solve_tr_subproblem(&g, &h, 10.0);
        assert!((p + &g).norm() < 1e-14);
        let p = solve_tr_subproblem(&g, &h, 0.5);
        assert!((p + &g * 0.5).norm() < 1e-12);
    }

    #[test]
    fn subproblem_hard_case() {
        let g = DVector::from_vec(vec![0.0, 1.0]);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, 1.0]));
        let p = solve_tr_subproblem(&g, &h, 1.0);
        assert!((p.norm() - 1.0).abs() < 1e-12);
        // Stationarity (H + 2I) p = −g with μ = 2.
        let r = (&h + DMatrix::identity(2, 2) * 2.0) * &p + &g;
        assert!(r.norm() < 1e-12, "{p}");
    }

    #[test]
    fn subproblem_nearly_hard_case_reaches_boundary() {
        let g = DVector::from_vec(vec![1e-9, 1.0]);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, 1.0]));
        let p = solve_tr_subproblem(&g, &h, 5.0);
        assert!((p.norm() - 5.0).abs() < 1e-10);
        // Optimal value of the exactly hard problem: p = (±√(25 − 1/9), −1/3).
        let exact = -1.0 / 3.0 + 0.5 * (-2.0 * (25.0 - 1.0 / 9.0) + 1.0 / 9.0);
        assert!(model_value(&g, &h, &p) <= exact + 1e-8);
    }

    #[test]
    fn subproblem_zero_gradient_negative_curvature() {
        let g = DVector::zeros(3);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 2.0]));
        let p = solve_tr_subproblem(&g, &h, 0.3);
        assert!((p.norm() - 0.3).abs() < 1e-12);
        assert!(model_value(&g, &h, &p) < 0.0);
    }

    #[test]
    fn step_examples() {
        let g = DVector::from_vec(vec![2.0, 0.0]);
        assert_eq!(first_order_step(&g, 0.5), DVector::from_vec(vec![-1.0, 0.0]));
        assert_eq!(first_order_step(&DVector::zeros(2), 0.5), DVector::zeros(2));
        let p = quasi_newton_step(&g, &(DMatrix::identity(2, 2) * 2.0), 1.0);
        assert!((p - DVector::from_vec(vec![-1.0, 0.0])).norm() < 1e-7);
        let p = quasi_newton_step(&g, &DMatrix::identity(2, 2), 0.3);
        assert!((p - first_order_step(&g, 0.3)).norm() < 1e-8);
        let ind = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let p = quasi_newton_step(&DVector::from_vec(vec![1.0, 1.0]), &ind, 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let err = "newton".parse::<Variant>().unwrap_err();
        assert!(err.contains("gd-tr") && err.contains("qn-tr"));
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = (&a + a.transpose()) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        (g, h, rng.gen_range(0.01..2.0))
    }

    #[test]
    fn subproblem_beats_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (g, h, _) = random_instance(&mut rng, 8);
            let delta = 0.1;
            let p = solve_tr_subproblem(&g, &h, delta);
            assert!(p.norm() <= delta + 1e-12);
            let best = model_value(&g, &h, &p);
            for _ in 0..20_000 {
                let v = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
                let r = delta * rng.gen_range(0.0f64..1.0).powf(1.0 / 8.0);
                let x = &v * (r / v.norm());
                assert!(best <= model_value(&g, &h, &x) + 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn subproblem_is_feasible_and_stationary(seed in 0u64..10_000, n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (g, h, delta) = random_instance(&mut rng, n);
            let p = solve_tr_subproblem(&g, &h, delta);
            prop_assert!(p.norm() <= delta + 1e-12);
            // Global optimality: H + μI ⪰ 0 with (H + μI)p = −g for some μ ≥ 0.
            let hp = &h * &p + &g;
            let mu = if p.norm() < delta * (1.0 - 1e-9) { 0.0 } else { -hp.dot(&p) / p.norm_squared() };
            prop_assert!(mu >= -1e-8);
            let lmin = SymmetricEigen::new(h.clone()).eigenvalues.min();
            prop_assert!(lmin + mu >= -1e-7 * (1.0 + mu));
            prop_assert!((hp + &p * mu).norm() <= 1e-7 * (1.0 + g.norm()));
        }
    }
}
