//! End-to-end acceptance suite. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing the harness capture) and then asserts its criterion.
//!
//! The training experiments are expensive; runs are computed once, one at a
//! time, and shared between the tests that need them.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use mpcqn::ad::Scalar;
use mpcqn::check::{sens_check, SensCheckOptions, SensCheckReport};
use mpcqn::env::{evaluate, make_test_set, EvalMetrics, LinearPlant, TestSet};
use mpcqn::mpc::{benchmark_policy, MpcConfig, MpcPolicy, ThetaVector};
use mpcqn::nlp::{self, BlockValue, NlpDims, ParamNlp, SolverOptions, Structure};
use mpcqn::qfun::{q_value_grad_hess, MlpQ};
use mpcqn::sens::{sensitivities, SensOptions};
use mpcqn::trainer::{dpg_gradient, policy_hessian, solve_tr_subproblem, train, write_log, PolicySample, TrainConfig, TrainOutcome, Variant};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const SEEDS: [u64; 3] = [1, 2, 3];
const TEST_SET_SEED: u64 = 0;

fn report(id: &str, title: &str, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance] {id:<3} {verdict}  {title}: {detail}");
    pass
}

// ---------------------------------------------------------------------------
// Shared experiments

/// Serializes the heavy computations so their timings are not inflated by each other.
static COMPUTE: Mutex<()> = Mutex::new(());

fn plant() -> LinearPlant {
    LinearPlant::default()
}

struct SharedTestSet {
    set: TestSet,
    elapsed: Duration,
}

fn test_set() -> &'static SharedTestSet {
    static SET: OnceLock<SharedTestSet> = OnceLock::new();
    SET.get_or_init(|| {
        let _g = COMPUTE.lock().unwrap_or_else(|e| e.into_inner());
        let t = Instant::now();
        let set = make_test_set(&plant(), &benchmark_policy(50), TEST_SET_SEED, 2500, 50).expect("benchmark rollouts");
        SharedTestSet { set, elapsed: t.elapsed() }
    })
}

fn initial_policy() -> MpcPolicy {
    MpcPolicy::new(MpcConfig::default(), ThetaVector::initial()).unwrap()
}

struct Run {
    outcome: Result<TrainOutcome, String>,
    metrics: Option<EvalMetrics>,
    train_time: Duration,
    eval_time: Duration,
}

impl Run {
    fn j(&self) -> f64 {
        self.metrics.as_ref().map_or(f64::INFINITY, |m| m.j)
    }
}

fn run(variant: Variant, seed: u64) -> Arc<Run> {
    type Slot = Arc<OnceLock<Arc<Run>>>;
    static RUNS: OnceLock<Mutex<HashMap<(Variant, u64), Slot>>> = OnceLock::new();
    let slot = RUNS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry((variant, seed))
        .or_default()
        .clone();
    slot.get_or_init(|| {
        let set = &test_set().set;
        let _g = COMPUTE.lock().unwrap_or_else(|e| e.into_inner());
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::for_variant(variant)
        };
        let t = Instant::now();
        let outcome = train(&cfg, &plant(), initial_policy()).map_err(|e| e.to_string());
        let train_time = t.elapsed();
        let t = Instant::now();
        let metrics = outcome.as_ref().ok().and_then(|o| {
            let mut p = initial_policy();
            p.set_learnable_values(&o.theta);
            evaluate(&plant(), &p, set).ok().map(|(m, _)| m)
        });
        Arc::new(Run {
            outcome,
            metrics,
            train_time,
            eval_time: t.elapsed(),
        })
    })
    .clone()
}

fn initial_metrics() -> &'static EvalMetrics {
    static M: OnceLock<EvalMetrics> = OnceLock::new();
    M.get_or_init(|| {
        let set = &test_set().set;
        let _g = COMPUTE.lock().unwrap_or_else(|e| e.into_inner());
        evaluate(&plant(), &initial_policy(), set).expect("untrained rollouts").0
    })
}

fn sens_report() -> &'static (SensCheckReport, Duration) {
    static R: OnceLock<(SensCheckReport, Duration)> = OnceLock::new();
    R.get_or_init(|| {
        let t = Instant::now();
        let r = sens_check(&MpcConfig::default(), &ThetaVector::initial(), &(0..8).collect::<Vec<_>>(), &SensCheckOptions::default())
            .expect("valid configuration");
        (r, t.elapsed())
    })
}

// ---------------------------------------------------------------------------
// 1, 2: sensitivities of the case-study OCP

#[test]
fn c01_first_order_sensitivities() {
    let (r, dt) = sens_report();
    let opts = SensCheckOptions::default();
    let failures: Vec<_> = r.points.iter().filter_map(|p| p.failure.clone()).collect();
    let pass = failures.is_empty() && r.points.len() == 10 && r.max_first_err() <= opts.first_tol && dt.as_secs_f64() <= 60.0;
    let detail = format!(
        "max rel err {:.2e} (tol 1e-4) over {} points, {} redrawn, {:.2}s; failures {failures:?}",
        r.max_first_err(),
        r.points.len(),
        r.redrawn,
        dt.as_secs_f64()
    );
    assert!(report("1", "first-order sensitivities vs FD", pass, &detail));
}

#[test]
fn c02_second_order_sensitivities() {
    let (r, dt) = sens_report();
    let opts = SensCheckOptions::default();
    let pass = r.points.iter().all(|p| p.failure.is_none())
        && r.max_second_err() <= opts.second_tol
        && r.max_symmetry_err() <= 1e-7
        && dt.as_secs_f64() <= 120.0;
    let detail = format!(
        "max rel err {:.2e} (tol 1e-3), slice asymmetry {:.2e} (tol 1e-7), {:.2}s",
        r.max_second_err(),
        r.max_symmetry_err(),
        dt.as_secs_f64()
    );
    assert!(report("2", "second-order sensitivities vs FD", pass, &detail));
}

// ---------------------------------------------------------------------------
// 3: closed-form programs

/// min ½z² − p·z
struct Linear;
impl ParamNlp for Linear {
    fn dims(&self) -> NlpDims {
        NlpDims { n_z: 1, n_g: 0, n_h: 0, n_p: 1 }
    }
    fn eval_block<T: Scalar>(&self, _: usize, z: &[T], p: &[T]) -> BlockValue<T> {
        BlockValue {
            objective: z[0] * z[0] * 0.5 - p[0] * z[0],
            ineq: vec![],
            eq: vec![],
        }
    }
}

/// min ¼z⁴ − p·z, so z* = p^(1/3)
struct Quartic;
impl ParamNlp for Quartic {
    fn dims(&self) -> NlpDims {
        NlpDims { n_z: 1, n_g: 0, n_h: 0, n_p: 1 }
    }
    fn eval_block<T: Scalar>(&self, _: usize, z: &[T], p: &[T]) -> BlockValue<T> {
        BlockValue {
            objective: z[0].powi(4) * 0.25 - p[0] * z[0],
            ineq: vec![],
            eq: vec![],
        }
    }
}

/// min ½z² s.t. p − z ≤ 0, active for p > 0 with z* = λ* = p
struct ActiveBound;
impl ParamNlp for ActiveBound {
    fn dims(&self) -> NlpDims {
        NlpDims { n_z: 1, n_g: 1, n_h: 0, n_p: 1 }
    }
    fn eval_block<T: Scalar>(&self, _: usize, z: &[T], p: &[T]) -> BlockValue<T> {
        BlockValue {
            objective: z[0] * z[0] * 0.5,
            ineq: vec![p[0] - z[0]],
            eq: vec![],
        }
    }
    fn structure(&self) -> Structure {
        Structure::Quadratic
    }
}

fn solve_and_differentiate<P: ParamNlp>(nlp: &P, p: f64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let opts = SolverOptions {
        tol_kkt: 1e-13,
        tol_feas: 1e-13,
        ..SolverOptions::default()
    };
    let sol = nlp::solve(nlp, &[p], None, &opts).expect("solves");
    let b = sensitivities(nlp, &sol, &[p], true, &SensOptions::default()).expect("differentiable");
    (b.xi, b.first_order, b.second_order.unwrap())
}

#[test]
fn c03_analytic_oracles() {
    let mut errs = Vec::new();
    let (xi, d1, d2) = solve_and_differentiate(&Linear, 0.7);
    errs.push(("linear z*", (xi[0] - 0.7).abs()));
    errs.push(("linear dz/dp", (d1[(0, 0)] - 1.0).abs()));
    errs.push(("linear S", d2.amax()));

    let (xi, d1, d2) = solve_and_differentiate(&Quartic, 1.0);
    errs.push(("quartic z*", (xi[0] - 1.0).abs()));
    errs.push(("quartic dz/dp", (d1[(0, 0)] - 1.0 / 3.0).abs()));
    errs.push(("quartic d2z/dp2", (d2[(0, 0)] + 2.0 / 9.0).abs()));

    let (xi, d1, _) = solve_and_differentiate(&ActiveBound, 1.0);
    errs.push(("bound (z*, lambda*)", (xi[0] - 1.0).abs().max((xi[1] - 1.0).abs())));
    errs.push(("bound dz/dp", (d1[(0, 0)] - 1.0).abs()));
    errs.push(("bound dlambda/dp", (d1[(1, 0)] - 1.0).abs()));

    let worst = errs.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = errs.iter().all(|(_, e)| *e <= 1e-8);
    let detail = format!("worst {} error {:.2e} (tol 1e-8)", worst.0, worst.1);
    assert!(report("3", "closed-form NLP sensitivities", pass, &detail));
}

// ---------------------------------------------------------------------------
// 4: gradient and Hessian estimators on an analytic policy and critic

#[test]
fn c04_policy_gradient_oracle() {
    // π_θ(s) = θ₁s₁ + θ₁θ₂s₂ and Q(s, a) = 3a²/2 + a(s₁ − s₂) at θ = (2, 0.5).
    let (t1, t2) = (2.0, 0.5);
    let samples: Vec<PolicySample> = [[1.0, 2.0], [-1.0, 0.5]]
        .iter()
        .map(|s: &[f64; 2]| {
            let a = t1 * s[0] + t1 * t2 * s[1];
            PolicySample {
                d_action: DMatrix::from_row_slice(1, 2, &[s[0] + t2 * s[1], t1 * s[1]]),
                d2_action: vec![DMatrix::from_row_slice(2, 2, &[0.0, s[1], s[1], 0.0])],
                q_grad: DVector::from_element(1, 3.0 * a + s[0] - s[1]),
                q_hess: DMatrix::from_element(1, 1, 3.0),
            }
        })
        .collect();
    // By hand: actions 4 and −1.5, ∇aQ = 11 and −6, ∇θπ = (2, 4) and (−0.75, 1).
    let g_expected = DVector::from_row_slice(&[13.25, 19.0]);
    let h_expected = DMatrix::from_row_slice(2, 2, &[6.84375, 20.375, 20.375, 25.5]);
    let g = dpg_gradient(&samples).unwrap();
    let h = policy_hessian(&samples).unwrap();
    let eg = (&g - &g_expected).amax();
    let eh = (&h - &h_expected).amax();
    let pass = eg <= 1e-10 && eh <= 1e-10;
    let detail = format!("gradient error {eg:.2e}, Hessian error {eh:.2e} (tol 1e-10)");
    assert!(report("4", "policy gradient and Hessian estimators", pass, &detail));
}

// ---------------------------------------------------------------------------
// 5: Q-network derivatives

fn richardson(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (4.0 * f(h / 2.0) - f(h)) / 3.0
}

#[test]
fn c05_q_derivatives() {
    let r = run(Variant::QnTr, SEEDS[0]);
    let Some(q): Option<&MlpQ> = r.outcome.as_ref().ok().and_then(|o| o.q.as_ref()) else {
        assert!(report("5", "Q-network derivatives vs FD", false, "training produced no network"));
        return;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut dg, mut sg, mut dh, mut sh) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let s = [rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0)];
        let a = rng.gen_range(-1.0..1.0);
        let (_, grad, hess) = q_value_grad_hess(q, &s, &[a]);
        let v = |x: f64| q.value(&s, &[x]);
        let fd_g = richardson(|h| (v(a + h) - v(a - h)) / (2.0 * h), 1e-3);
        let fd_h = richardson(|h| (v(a + h) - 2.0 * v(a) + v(a - h)) / (h * h), 1e-2);
        dg = dg.max((grad[0] - fd_g).abs());
        sg = sg.max(grad[0].abs()).max(fd_g.abs());
        dh = dh.max((hess[(0, 0)] - fd_h).abs());
        sh = sh.max(hess[(0, 0)].abs()).max(fd_h.abs());
    }
    let (eg, eh) = (dg / sg, dh / sh);
    let pass = eg <= 1e-6 && eh <= 1e-6;
    let detail = format!("relative error gradient {eg:.2e}, Hessian {eh:.2e} (tol 1e-6) over 50 points");
    assert!(report("5", "Q-network derivatives vs FD", pass, &detail));
}

// ---------------------------------------------------------------------------
// 6, 7, 8: training experiments

fn ratio(j: f64) -> f64 {
    j / test_set().set.reference.j
}

#[test]
fn c06_training_reaches_benchmark() {
    let set = test_set();
    let mut within = 0;
    let mut parts = Vec::new();
    let mut total = set.elapsed;
    for seed in SEEDS {
        let r = run(Variant::QnTr, seed);
        total += r.train_time + r.eval_time;
        let rr = ratio(r.j());
        within += usize::from(rr <= 1.05);
        let iters = r.outcome.as_ref().map_or(0, |o| o.log.len());
        match &r.outcome {
            Ok(_) => parts.push(format!("seed {seed}: J/J_bench {rr:.4} after {iters} it ({:.0}s)", r.train_time.as_secs_f64())),
            Err(e) => parts.push(format!("seed {seed}: error {e}")),
        }
    }
    let pass = within >= 2 && total.as_secs_f64() <= 1800.0;
    let detail = format!(
        "{within}/3 seeds within 5% (need 2); {}; benchmark J {:.4}; total {:.0}s",
        parts.join("; "),
        set.set.reference.j,
        total.as_secs_f64()
    );
    assert!(report("6", "qn-tr reaches benchmark cost", pass, &detail));
}

#[test]
fn c07_feasibility() {
    let r = run(Variant::QnTr, SEEDS[0]);
    let init = initial_metrics();
    let trained_ok = r.metrics.as_ref().is_some_and(|m| m.n_t_if == 0 && m.n_p_if == 0);
    let init_ratio = ratio(init.j);
    let init_ok = (2.0..=4.0).contains(&init_ratio) && init.n_t_if == init.n_t;
    let trained = r.metrics.as_ref().map_or_else(
        || "no metrics".to_string(),
        |m| format!("n_T_if {} n_P_if {} of n_T {} n_P {}", m.n_t_if, m.n_p_if, m.n_t, m.n_p),
    );
    let detail = format!(
        "trained: {trained}; untrained: J/J_bench {init_ratio:.3} (need 2..4), n_T_if {} of {}",
        init.n_t_if, init.n_t
    );
    assert!(report("7", "feasibility of trained and untrained agents", trained_ok && init_ok, &detail));
}

#[test]
fn c08_ablation_ordering() {
    let mut ordered = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let j: Vec<f64> = [Variant::QnTr, Variant::GdTr, Variant::Gd].iter().map(|&v| run(v, seed).j()).collect();
        let ok = j[0] <= j[1] && j[1] <= j[2];
        ordered += usize::from(ok);
        parts.push(format!(
            "seed {seed}: qn-tr {:.3} gd-tr {:.3} gd {:.3}{}",
            j[0],
            j[1],
            j[2],
            if ok { "" } else { " (out of order)" }
        ));
    }
    let detail = format!("{ordered}/3 seeds ordered (need 2); {}", parts.join("; "));
    assert!(report("8", "ablation ordering J(qn-tr) <= J(gd-tr) <= J(gd)", ordered >= 2, &detail));
}

// ---------------------------------------------------------------------------
// 9: trust-region subproblem

fn model(g: &DVector<f64>, h: &DMatrix<f64>, p: &DVector<f64>) -> f64 {
    g.dot(p) + 0.5 * p.dot(&(h * p))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>, f64) {
    let n = rng.gen_range(1..=8);
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let q = a.qr().q();
    let kind = rng.gen_range(0..4);
    let eig = DVector::<f64>::from_fn(n, |i, _| match kind {
        0 => rng.gen_range(0.1..10.0),
        1 if i == 0 => 0.0,
        _ => rng.sample::<f64, _>(StandardNormal) * 5.0,
    });
    let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let h = (&h + h.transpose()) * 0.5;
    let mut g = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
    if kind == 3 {
        // Hard case: no gradient component along the leftmost eigenvector.
        let imin = eig.imin();
        let v = q.column(imin).into_owned();
        g -= &v * v.dot(&g);
    }
    let delta = 10f64.powf(rng.gen_range(-2.0..1.0));
    (g, h, delta)
}

#[test]
fn c09_trust_region_subproblem() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let instances: Vec<_> = (0..1000).map(|_| random_instance(&mut rng)).collect();
    let results: Vec<(f64, f64)> = instances
        .par_iter()
        .enumerate()
        .map(|(k, (g, h, delta))| {
            let p = solve_tr_subproblem(g, h, *delta);
            let excess = p.norm() - delta;
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let n = g.len();
            let mut best = 0.0f64;
            for i in 0..100_000 {
                let d = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
                let r = if i % 2 == 0 { *delta } else { delta * rng.gen::<f64>().powf(1.0 / n as f64) };
                let x = &d * (r / d.norm());
                best = best.min(model(g, h, &x));
            }
            (excess, model(g, h, &p) - best)
        })
        .collect();
    let max_excess = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let max_gap = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let pass = max_excess <= 1e-12 && max_gap <= 1e-9;
    let detail = format!("max ‖p‖ − δ {max_excess:.2e}, max m(p) − m(MC best) {max_gap:.2e} (tol 1e-9) over 1000 instances");
    assert!(report("9", "trust-region subproblem optimality", pass, &detail));
}

// ---------------------------------------------------------------------------
// 10: determinism

fn curve_bytes(o: &TrainOutcome) -> Vec<u8> {
    let mut buf = Vec::new();
    write_log(&o.log, false, &mut buf).unwrap();
    buf
}

#[test]
fn c10_determinism() {
    let first = run(Variant::QnTr, SEEDS[0]);
    let Ok(a) = &first.outcome else {
        assert!(report("10", "bitwise-reproducible training curve", false, "reference run failed"));
        return;
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let second = {
        let _g = COMPUTE.lock().unwrap_or_else(|e| e.into_inner());
        let cfg = TrainConfig {
            seed: SEEDS[0],
            ..TrainConfig::for_variant(Variant::QnTr)
        };
        pool.install(|| train(&cfg, &plant(), initial_policy()))
    };
    let pass = second.as_ref().is_ok_and(|b| curve_bytes(a) == curve_bytes(b) && a.theta == b.theta);
    let detail = format!(
        "rerun on a 3-thread pool vs {} thread(s): {} curve rows, {}",
        rayon::current_num_threads(),
        a.log.len(),
        if pass { "identical" } else { "different" }
    );
    assert!(report("10", "bitwise-reproducible training curve", pass, &detail));
}

// ---------------------------------------------------------------------------
// Supplementary: size of the regenerated test set

#[test]
fn s01_test_set_retention() {
    let s = test_set();
    let n = s.set.len();
    let pass = (1350..=1750).contains(&n) && s.set.reference.n_t_if == 0;
    let detail = format!(
        "kept {n} of 2500 (expected 1350..1750), benchmark J {:.4}, built in {:.0}s",
        s.set.reference.j,
        s.elapsed.as_secs_f64()
    );
    assert!(report("S1", "test-set retention", pass, &detail));
}
