//! Action-value approximation with a small tanh network and k-step look-ahead labels.
//!
//! Checkpoints are plain text, one record per line, whitespace separated:
//!
//! ```text
//! mlpq 1
//! sizes <n_in> <h_1> ... <n_out>
//! input_shift <n_in values>
//! input_scale <n_in values>
//! label_shift <1 value>
//! label_scale <1 value>
//! layer <l> <rows> <cols> <rows*cols weights, row-major> <rows biases>
//! ```
//!
//! Every float is written with 17 significant digits so a load reproduces the network bit-for-bit.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ad::{HyperDual, Scalar};
use crate::env::{fmt_f64, ReplayBuffer, State, Transition};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QError {
    #[error("non-finite training loss in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("invalid Q configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    Empty,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Elementwise standardizer `x ↦ (x − shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScaler {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation per column; degenerate columns get unit scale.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            n += 1;
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift: mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.shift).zip(&self.scale).map(|((y, m), s)| y * s + m).collect()
    }
}

pub fn huber(r: f64) -> f64 {
    if r.abs() <= 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

fn huber_grad(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub n_q: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            hidden: vec![20, 20],
            epochs: 300,
            batch: 64,
            lr: 1e-3,
            n_q: 10,
            gamma: 1.0,
            seed: 0,
        }
    }
}

/// Adam moments over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Fully connected network on scaled `(s, a)` with tanh hidden layers and a scalar linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpQ {
    sizes: Vec<usize>,
    /// Per layer: row-major `out × in` weights followed by `out` biases.
    params: Vec<f64>,
    pub input: AffineScaler,
    pub label: AffineScaler,
    pub n_state: usize,
}

impl MlpQ {
    /// Glorot-uniform weights, zero biases, identity scalers.
    pub fn new(n_state: usize, n_action: usize, hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![n_state + n_action];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.gen_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self {
            input: AffineScaler::identity(sizes[0]),
            label: AffineScaler::identity(1),
            sizes,
            params,
            n_state,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_action(&self) -> usize {
        self.sizes[0] - self.n_state
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let at = off;
            off += w[0] * w[1] + w[1];
            (at, w[0], w[1])
        })
    }

    /// Network output on scaled inputs.
    pub fn forward_scaled<T: Scalar>(&self, x: &[T]) -> T {
        let n_layers = self.sizes.len() - 1;
        let mut h: Vec<T> = x.to_vec();
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            h = (0..n_out)
                .map(|o| {
                    let acc = w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(&h)
                        .fold(T::from_f64(b[o]), |acc, (&wi, &hi)| acc + hi * wi);
                    if l + 1 < n_layers {
                        acc.tanh()
                    } else {
                        acc
                    }
                })
                .collect();
        }
        h[0]
    }

    /// `Q(s, a)` in original units.
    pub fn value(&self, s: &[f64], a: &[f64]) -> f64 {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        let y = self.forward_scaled(&self.input.transform(&x));
        y * self.label.scale[0] + self.label.shift[0]
    }

    fn scaled_inputs(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        self.input.transform(&x)
    }

    /// Accumulates the Huber-loss gradient of one scaled sample into `grad` and returns its loss.
    fn backprop(&self, x: &[f64], y: f64, grad: &mut [f64], acts: &mut Vec<Vec<f64>>) -> f64 {
        acts.clear();
        acts.push(x.to_vec());
        let n_layers = self.sizes.len() - 1;
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..];
            let h = &acts[l];
            let next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let z = w[o * n_in..(o + 1) * n_in].iter().zip(h).fold(b[o], |acc, (wi, hi)| acc + wi * hi);
                    if l + 1 < n_layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(next);
        }
        let r = acts[n_layers][0] - y;
        let mut delta = vec![huber_grad(r)];
        let layers: Vec<_> = self.layers().collect();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            let h = &acts[l];
            for o in 0..n_out {
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, hi) in row.iter_mut().zip(h) {
                    *g += delta[o] * hi;
                }
                grad[off + n_in * n_out + o] += delta[o];
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                        back * (1.0 - h[i] * h[i])
                    })
                    .collect();
            }
        }
        huber(r)
    }
}

/// Training loss per epoch, first and last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Minibatch Adam on the Huber loss of scaled residuals; `inputs` and `labels` are in original units.
pub fn fit(
    net: &mut MlpQ,
    inputs: &[Vec<f64>],
    labels: &[f64],
    epochs: usize,
    batch: usize,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<FitReport, QError> {
    if inputs.is_empty() {
        return Err(QError::Empty);
    }
    if inputs.len() != labels.len() || batch == 0 {
        return Err(QError::Config("inputs, labels and batch size disagree".into()));
    }
    let xs: Vec<Vec<f64>> = inputs.iter().map(|x| net.input.transform(x)).collect();
    let ys: Vec<f64> = labels.iter().map(|&y| net.label.transform(&[y])[0]).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut grad = vec![0.0; net.params.len()];
    let mut acts = Vec::new();
    let mut report = FitReport {
        first_loss: f64::NAN,
        last_loss: f64::NAN,
    };
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                total += net.backprop(&xs[i], ys[i], &mut grad, &mut acts);
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut net.params, &grad);
        }
        let loss = total / xs.len() as f64;
        if !loss.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
            return Err(QError::NonFinite { epoch });
        }
        if epoch == 0 {
            report.first_loss = loss;
        }
        report.last_loss = loss;
    }
    Ok(report)
}

/// Transitions paired with the policy's suggested next action `a′ = π(s′)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub transitions: Vec<Transition>,
    pub next_actions: Vec<f64>,
}

impl LabeledSet {
    pub fn build<E, F>(buffer: &ReplayBuffer, mut policy: F) -> Result<Self, E>
    where
        F: FnMut(&State) -> Result<f64, E>,
    {
        let transitions: Vec<Transition> = buffer.iter().copied().collect();
        let next_actions = transitions.iter().map(|t| policy(&t.s_next)).collect::<Result<_, _>>()?;
        Ok(Self {
            transitions,
            next_actions,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().map(|t| vec![t.s[0], t.s[1], t.a]).collect()
    }
}

/// Regression targets of round `k`: `l` for `k = 0`, else `l + γ·Q_prev(s′, a′)`.
pub fn generate_labels(set: &LabeledSet, prev: Option<&MlpQ>, k: usize, gamma: f64) -> Result<Vec<f64>, QError> {
    match (k, prev) {
        (0, None) => Ok(set.transitions.iter().map(|t| t.l).collect()),
        (k, Some(q)) if k > 0 => Ok(set
            .transitions
            .iter()
            .zip(&set.next_actions)
            .map(|(t, &a)| t.l + gamma * q.value(&t.s_next, &[a]))
            .collect()),
        _ => Err(QError::Config("a previous network is required exactly when k > 0".into())),
    }
}

/// Runs `N_Q + 1` label/regression rounds; `init` supplies warm-start weights.
pub fn train_q(set: &LabeledSet, init: Option<&MlpQ>, cfg: &QConfig) -> Result<MlpQ, QError> {
    if set.is_empty() {
        return Err(QError::Empty);
    }
    let inputs = set.inputs();
    let mut net = match init {
        Some(q) if q.sizes[0] == 3 && q.sizes[1..q.sizes.len() - 1] == cfg.hidden[..] => q.clone(),
        _ => MlpQ::new(2, 1, &cfg.hidden, cfg.seed),
    };
    net.input = AffineScaler::fit(inputs.iter().map(Vec::as_slice), 3);
    let costs: Vec<[f64; 1]> = set.transitions.iter().map(|t| [t.l]).collect();
    net.label = AffineScaler::fit(costs.iter().map(|c| &c[..]), 1);
    let mut adam = Adam::new(net.params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for k in 0..=cfg.n_q {
        let labels = if k == 0 {
            generate_labels(set, None, 0, cfg.gamma)?
        } else {
            generate_labels(set, Some(&net), k, cfg.gamma)?
        };
        fit(&mut net, &inputs, &labels, cfg.epochs, cfg.batch, &mut adam, &mut rng)?;
    }
    Ok(net)
}

/// Value, action gradient and action Hessian in original units, by forward-over-forward AD.
pub fn q_value_grad_hess(q: &MlpQ, s: &[f64], a: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n_s = q.n_state;
    let n_a = a.len();
    let x = q.scaled_inputs(s, a);
    let sigma_q = q.label.scale[0];
    let mut grad = DVector::zeros(n_a);
    let mut hess = DMatrix::zeros(n_a, n_a);
    let mut value = 0.0;
    for i in 0..n_a {
        for j in i..n_a {
            let seeded: Vec<HyperDual> = x
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let di = if k == n_s + i { 1.0 / q.input.scale[k] } else { 0.0 };
                    let dj = if k == n_s + j { 1.0 / q.input.scale[k] } else { 0.0 };
                    HyperDual::seeded(v, &[di, dj])
                })
                .collect();
            let y = q.forward_scaled(&seeded);
            value = y.c[0];
            if i == j {
                grad[i] = sigma_q * y.c[1];
            }
            hess[(i, j)] = sigma_q * y.c[3];
            hess[(j, i)] = hess[(i, j)];
        }
    }
    if n_a == 0 {
        value = q.forward_scaled(&x);
    }
    (sigma_q * value + q.label.shift[0], grad, hess)
}

fn write_floats<W: Write>(w: &mut W, tag: &str, xs: &[f64]) -> std::io::Result<()> {
    write!(w, "{tag}")?;
    for &x in xs {
        write!(w, " {}", fmt_f64(x))?;
    }
    writeln!(w)
}

impl MlpQ {
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), QError> {
        writeln!(w, "mlpq {FORMAT_VERSION}")?;
        writeln!(
            w,
            "sizes {}",
            self.sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
        )?;
        writeln!(w, "n_state {}", self.n_state)?;
        write_floats(&mut w, "input_shift", &self.input.shift)?;
        write_floats(&mut w, "input_scale", &self.input.scale)?;
        write_floats(&mut w, "label_shift", &self.label.shift)?;
        write_floats(&mut w, "label_scale", &self.label.scale)?;
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            write_floats(
                &mut w,
                &format!("layer {l} {n_out} {n_in}"),
                &self.params[off..off + n_in * n_out + n_out],
            )?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, QError> {
        let bad = |m: &str| QError::Checkpoint(m.to_string());
        let mut lines = r.lines();
        let mut next = |tag: &str| -> Result<Vec<String>, QError> {
            let line = lines.next().ok_or_else(|| bad("truncated file"))??;
            let mut toks = line.split_whitespace().map(str::to_string);
            match toks.next() {
                Some(t) if t == tag => Ok(toks.collect()),
                _ => Err(bad(&format!("expected `{tag}`"))),
            }
        };
        let parse_f = |v: &[String]| -> Result<Vec<f64>, QError> {
            v.iter().map(|t| t.parse().map_err(|_| bad("bad number"))).collect()
        };
        let parse_u = |v: &[String]| -> Result<Vec<usize>, QError> {
            v.iter().map(|t| t.parse().map_err(|_| bad("bad integer"))).collect()
        };
        if parse_u(&next("mlpq")?)? != [FORMAT_VERSION as usize] {
            return Err(bad("unsupported version"));
        }
        let sizes = parse_u(&next("sizes")?)?;
        if sizes.len() < 2 || sizes.contains(&0) || sizes[sizes.len() - 1] != 1 {
            return Err(bad("invalid layer sizes"));
        }
        let n_state = *parse_u(&next("n_state")?)?.first().ok_or_else(|| bad("missing n_state"))?;
        let input = AffineScaler {
            shift: parse_f(&next("input_shift")?)?,
            scale: parse_f(&next("input_scale")?)?,
        };
        let label = AffineScaler {
            shift: parse_f(&next("label_shift")?)?,
            scale: parse_f(&next("label_scale")?)?,
        };
        if input.dim() != sizes[0] || input.scale.len() != sizes[0] || label.dim() != 1 || label.scale.len() != 1 {
            return Err(bad("scaler dimension mismatch"));
        }
        if n_state > sizes[0] {
            return Err(bad("n_state exceeds input width"));
        }
        let mut params = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let toks = next("layer")?;
            let head = parse_u(&toks[..3.min(toks.len())])?;
            if head != [l, w[1], w[0]] {
                return Err(bad("layer header mismatch"));
            }
            let vals = parse_f(&toks[3..])?;
            if vals.len() != w[0] * w[1] + w[1] {
                return Err(bad("layer size mismatch"));
            }
            params.extend(vals);
        }
        Ok(Self {
            sizes,
            params,
            input,
            label,
            n_state,
        })
    }
}
