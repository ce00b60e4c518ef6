//! Plant, closed-loop rollouts, replay storage and test-set evaluation.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::mpc::{MpcController, MpcError, MpcPolicy, OcpModel};

pub type State = [f64; 2];

/// Tolerance below which a bound violation is treated as round-off.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub s_lb: State,
    pub s_ub: State,
    pub a_lb: f64,
    pub a_ub: f64,
    pub violation_weight: f64,
}

impl Default for LinearPlant {
    fn default() -> Self {
        Self {
            a: Matrix2::new(0.9, 0.35, 0.0, 1.1),
            b: Vector2::new(0.0813, 0.2),
            s_lb: [0.0, -1.0],
            s_ub: [1.0, 1.0],
            a_lb: -1.0,
            a_ub: 1.0,
            violation_weight: 100.0,
        }
    }
}

impl LinearPlant {
    pub fn next_state(&self, s: &State, a: f64) -> State {
        let x = self.a * Vector2::new(s[0], s[1]) + self.b * a;
        [x[0], x[1]]
    }

    /// Constraint rows `h(s, a) ≤ 0`: state lower, state upper, action lower, action upper.
    pub fn constraint_rows(&self, s: &State, a: f64) -> [f64; 6] {
        [
            self.s_lb[0] - s[0],
            self.s_lb[1] - s[1],
            s[0] - self.s_ub[0],
            s[1] - self.s_ub[1],
            self.a_lb - a,
            a - self.a_ub,
        ]
    }

    pub fn stage_cost(&self, s: &State, a: f64) -> f64 {
        let penalty: f64 = self.constraint_rows(s, a).iter().map(|h| h.max(0.0)).sum();
        s[0] * s[0] + s[1] * s[1] + 0.5 * a * a + self.violation_weight * penalty
    }

    pub fn step(&self, s: &State, a: f64) -> (State, f64) {
        (self.next_state(s, a), self.stage_cost(s, a))
    }

    /// Largest positive part of the state-bound violations.
    pub fn state_violation(&self, s: &State) -> f64 {
        self.constraint_rows(s, 0.0)[..4].iter().fold(0.0, |m, &h| m.max(h))
    }

    pub fn is_feasible(&self, s: &State) -> bool {
        self.state_violation(s) <= FEASIBILITY_TOL
    }

    pub fn clip_action(&self, a: f64) -> f64 {
        a.clamp(self.a_lb, self.a_ub)
    }

    /// Uniform draw from the state box.
    pub fn sample_state<R: Rng>(&self, rng: &mut R) -> State {
        [
            rng.gen_range(self.s_lb[0]..=self.s_ub[0]),
            rng.gen_range(self.s_lb[1]..=self.s_ub[1]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: State,
    pub a: f64,
    pub l: f64,
    pub s_next: State,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, it: I) {
        for t in it {
            self.push(t);
        }
    }

    /// Oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

/// Additive Gaussian exploration, clipped to the input bounds.
#[derive(Debug, Clone)]
pub struct Exploration {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl Exploration {
    /// Noise stream for one initial condition; the same `(seed, ic)` always replays the same draws.
    pub fn new(seed: u64, ic: u64, std_dev: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ic);
        Self {
            rng,
            noise: Normal::new(0.0, std_dev).expect("finite exploration std"),
        }
    }

    pub fn perturb(&mut self, a: f64) -> f64 {
        a + self.noise.sample(&mut self.rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `s_0..s_{N_ep+1}`; the last state is reached but not charged.
    pub states: Vec<State>,
    pub actions: Vec<f64>,
    pub costs: Vec<f64>,
    pub total_cost: f64,
}

impl Trajectory {
    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.actions.iter().enumerate().map(move |(i, &a)| Transition {
            s: self.states[i],
            a,
            l: self.costs[i],
            s_next: self.states[i + 1],
        })
    }

    /// States `s_1..s_{N_ep}` reached under control and charged a stage cost.
    pub fn points(&self) -> &[State] {
        &self.states[1..self.actions.len()]
    }
}

/// Runs `n_ep + 1` steps from `s0`; the cost sums stages `0..=n_ep`.
pub fn rollout<E, F>(
    plant: &LinearPlant,
    mut policy: F,
    s0: State,
    n_ep: usize,
    mut noise: Option<&mut Exploration>,
    buffer: Option<&mut ReplayBuffer>,
) -> Result<Trajectory, E>
where
    F: FnMut(&State) -> Result<f64, E>,
{
    let mut states = Vec::with_capacity(n_ep + 2);
    let mut actions = Vec::with_capacity(n_ep + 1);
    let mut costs = Vec::with_capacity(n_ep + 1);
    let mut s = s0;
    states.push(s);
    for _ in 0..=n_ep {
        let mut a = policy(&s)?;
        if let Some(n) = noise.as_deref_mut() {
            a = plant.clip_action(n.perturb(a));
        }
        let (next, l) = plant.step(&s, a);
        actions.push(a);
        costs.push(l);
        states.push(next);
        s = next;
    }
    let traj = Trajectory {
        total_cost: costs.iter().sum(),
        states,
        actions,
        costs,
    };
    if let Some(buf) = buffer {
        buf.extend(traj.transitions());
    }
    Ok(traj)
}

/// Closed-loop MPC rollout, warm-starting each solve from the previous one.
pub fn mpc_rollout<M: OcpModel>(
    plant: &LinearPlant,
    policy: &MpcPolicy<M>,
    s0: State,
    n_ep: usize,
    noise: Option<&mut Exploration>,
) -> Result<Trajectory, MpcError> {
    let mut ctrl = MpcController::new(policy);
    rollout(plant, |s: &State| ctrl.act(s).map(|u| u[0]), s0, n_ep, noise, None)
}

/// Noise-free MPC rollouts from each initial state, in input order.
pub fn closed_loop<M: OcpModel>(
    plant: &LinearPlant,
    policy: &MpcPolicy<M>,
    initial: &[State],
    n_ep: usize,
) -> Result<Vec<Trajectory>, MpcError> {
    initial
        .par_iter()
        .map(|&s0| mpc_rollout(plant, policy, s0, n_ep, None))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub j: f64,
    pub n_t: usize,
    pub n_t_if: usize,
    pub n_p: usize,
    pub n_p_if: usize,
    pub cv_max: f64,
    /// Mean of the per-point worst violation over infeasible points.
    pub cv_mean: Option<f64>,
}

impl EvalMetrics {
    pub fn from_trajectories(plant: &LinearPlant, trajs: &[Trajectory]) -> Self {
        let mut n_p = 0;
        let mut n_p_if = 0;
        let mut n_t_if = 0;
        let mut cv_max: f64 = 0.0;
        let mut cv_sum = 0.0;
        for t in trajs {
            let mut bad = false;
            for s in t.points() {
                n_p += 1;
                let v = plant.state_violation(s);
                if v > FEASIBILITY_TOL {
                    bad = true;
                    n_p_if += 1;
                    cv_max = cv_max.max(v);
                    cv_sum += v;
                }
            }
            n_t_if += usize::from(bad);
        }
        let n_t = trajs.len();
        Self {
            j: trajs.iter().map(|t| t.total_cost).sum::<f64>() / n_t.max(1) as f64,
            n_t,
            n_t_if,
            n_p,
            n_p_if,
            cv_max,
            cv_mean: (n_p_if > 0).then(|| cv_sum / n_p_if as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub seed: u64,
    pub n_candidates: usize,
    pub n_ep: usize,
    pub initial_states: Vec<State>,
    /// Metrics of the generating controller on the retained states.
    pub reference: EvalMetrics,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.initial_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial_states.is_empty()
    }
}

/// Draws candidates uniformly from the state box and keeps those whose reference rollout stays feasible.
pub fn make_test_set<M: OcpModel>(
    plant: &LinearPlant,
    reference: &MpcPolicy<M>,
    seed: u64,
    n_candidates: usize,
    n_ep: usize,
) -> Result<TestSet, MpcError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<State> = (0..n_candidates).map(|_| plant.sample_state(&mut rng)).collect();
    let trajs = closed_loop(plant, reference, &candidates, n_ep)?;
    let (initial_states, kept): (Vec<State>, Vec<Trajectory>) = candidates
        .into_iter()
        .zip(trajs)
        .filter(|(_, t)| t.points().iter().all(|s| plant.is_feasible(s)))
        .unzip();
    log::info!("test set: kept {} of {n_candidates} candidates", initial_states.len());
    Ok(TestSet {
        seed,
        n_candidates,
        n_ep,
        reference: EvalMetrics::from_trajectories(plant, &kept),
        initial_states,
    })
}

pub fn evaluate<M: OcpModel>(
    plant: &LinearPlant,
    policy: &MpcPolicy<M>,
    test_set: &TestSet,
) -> Result<(EvalMetrics, Vec<Trajectory>), MpcError> {
    let trajs = closed_loop(plant, policy, &test_set.initial_states, test_set.n_ep)?;
    Ok((EvalMetrics::from_trajectories(plant, &trajs), trajs))
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_trajectories<W: Write>(plant: &LinearPlant, trajs: &[Trajectory], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["traj_id", "step", "s1", "s2", "a", "l", "feasible_flag"])?;
    for (id, t) in trajs.iter().enumerate() {
        for (step, (s, (&a, &l))) in t.states.iter().zip(t.actions.iter().zip(&t.costs)).enumerate() {
            w.write_record([
                id.to_string(),
                step.to_string(),
                fmt_f64(s[0]),
                fmt_f64(s[1]),
                fmt_f64(a),
                fmt_f64(l),
                u8::from(plant.is_feasible(s)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_test_set<W: Write>(set: &TestSet, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["traj_id", "s1", "s2"])?;
    for (id, s) in set.initial_states.iter().enumerate() {
        w.write_record([id.to_string(), fmt_f64(s[0]), fmt_f64(s[1])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics<W: Write>(m: &EvalMetrics, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["J", "n_T", "n_T_if", "n_P", "n_P_if", "CV_max", "CV_mean"])?;
    w.write_record([
        fmt_f64(m.j),
        m.n_t.to_string(),
        m.n_t_if.to_string(),
        m.n_p.to_string(),
        m.n_p_if.to_string(),
        fmt_f64(m.cv_max),
        m.cv_mean.map(fmt_f64).unwrap_or_default(),
    ])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn plant() -> LinearPlant {
        LinearPlant::default()
    }

    #[test]
    fn step_examples() {
        let p = plant();
        let (s, l) = p.step(&[0.0, 0.0], 1.0);
        assert_eq!(s, [0.0813, 0.2]);
        assert_eq!(l, 0.5);
        assert_eq!(p.step(&[0.0, 0.0], 0.0), ([0.0, 0.0], 0.0));
        let (_, l) = p.step(&[-0.1, 0.0], 0.0);
        assert!((l - 10.01).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_sums_inclusive_horizon() {
        let p = LinearPlant {
            a: Matrix2::identity(),
            b: Vector2::zeros(),
            ..plant()
        };
        let t = rollout(&p, |_: &State| Ok::<_, Infallible>(0.0), [1.0, 0.0], 2, None, None).unwrap();
        assert_eq!(t.actions.len(), 3);
        assert_eq!(t.states.len(), 4);
        assert!((t.total_cost - 3.0).abs() < 1e-12);
    }

    #[test]
    fn origin_is_fixed_point() {
        let mut buf = ReplayBuffer::new(250);
        let t = rollout(&plant(), |_: &State| Ok::<_, Infallible>(0.0), [0.0, 0.0], 50, None, Some(&mut buf)).unwrap();
        assert_eq!(t.total_cost, 0.0);
        assert_eq!(buf.len(), 51);
    }

    #[test]
    fn buffer_is_fifo() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..7 {
            buf.push(Transition {
                s: [i as f64, 0.0],
                a: 0.0,
                l: 0.0,
                s_next: [0.0; 2],
            });
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.s[0]).collect();
        assert_eq!(kept, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn zero_action_leaves_box() {
        let p = plant();
        let t = rollout(&p, |_: &State| Ok::<_, Infallible>(0.0), [0.99, 0.99], 50, None, None).unwrap();
        let m = EvalMetrics::from_trajectories(&p, &[t]);
        assert_eq!(m.n_t_if, 1);
        assert!(m.cv_max > 0.0 && m.cv_mean.is_some());
    }

    #[test]
    fn single_trajectory_mean() {
        let t = Trajectory {
            states: vec![[0.5, 0.0]; 3],
            actions: vec![0.0; 2],
            costs: vec![4.0, 0.0],
            total_cost: 4.0,
        };
        let m = EvalMetrics::from_trajectories(&plant(), &[t]);
        assert_eq!(m.j, 4.0);
        assert_eq!((m.n_t, m.n_t_if, m.n_p, m.n_p_if), (1, 0, 1, 0));
        assert_eq!(m.cv_mean, None);
    }

    #[test]
    fn exploration_replays_per_stream() {
        let draws = |ic| {
            let mut e = Exploration::new(7, ic, 0.1);
            (0..5).map(|_| e.perturb(0.0)).collect::<Vec<_>>()
        };
        assert_eq!(draws(3), draws(3));
        assert_ne!(draws(3), draws(4));
    }

    #[test]
    fn noisy_actions_respect_bounds() {
        let p = plant();
        let mut e = Exploration::new(1, 0, 5.0);
        let t = rollout(&p, |_: &State| Ok::<_, Infallible>(0.9), [0.5, 0.0], 20, Some(&mut e), None).unwrap();
        assert!(t.actions.iter().all(|a| a.abs() <= 1.0));
        assert!(t.actions.iter().any(|&a| a != 0.9));
    }

    #[test]
    fn fmt_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
