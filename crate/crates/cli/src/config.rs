//! Experiment configuration: TOML restricted to one level of `[section]` tables.
//!
//! Every key is optional; missing keys take the case-study defaults and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use mpcqn::check::SensCheckOptions;
use mpcqn::env::LinearPlant;
use mpcqn::mpc::{CaseStudyModel, MpcConfig, MpcPolicy, ThetaVector, THETA_NAMES};
use mpcqn::nlp::SolverOptions;
use mpcqn::qfun::QConfig;
use mpcqn::sens::SensOptions;
use mpcqn::trainer::{TrainConfig, Variant};
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainSection,
    pub mpc: MpcSection,
    pub env: EnvSection,
    pub q: QSection,
    pub sens: SensSection,
    pub eval: EvalSection,
    pub check: CheckSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: String,
    /// Defaults depend on the variant when absent.
    pub alpha: Option<f64>,
    pub delta0: Option<f64>,
    pub delta_max: f64,
    pub eps: f64,
    pub n_ic: usize,
    pub n_ep: usize,
    pub n_r: usize,
    pub exploration_std: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::for_variant(Variant::QnTr);
        Self {
            variant: Variant::QnTr.name().into(),
            alpha: None,
            delta0: None,
            delta_max: d.delta_max,
            eps: d.eps,
            n_ic: d.n_ic,
            n_ep: d.n_ep,
            n_r: d.n_r,
            exploration_std: d.exploration_std,
            max_iter: d.max_iter,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    pub discount: f64,
    pub slack_weight: f64,
    pub terminal_slack_weight: f64,
    pub terminal_weight: [f64; 4],
    pub solver_tol: f64,
    pub solver_tol_feas: f64,
    pub solver_max_iter: usize,
    pub theta0: Vec<f64>,
    /// Names of the learned entries of θ; the others stay at `theta0`.
    pub learnable: Vec<String>,
}

impl Default for MpcSection {
    fn default() -> Self {
        let cfg = MpcConfig::default();
        let w = cfg.model.terminal_weight;
        Self {
            horizon: cfg.horizon,
            discount: cfg.discount,
            slack_weight: cfg.slack_weight,
            terminal_slack_weight: cfg.terminal_slack_weight,
            terminal_weight: [w[(0, 0)], w[(0, 1)], w[(1, 0)], w[(1, 1)]],
            solver_tol: cfg.solver.tol_kkt,
            solver_tol_feas: cfg.solver.tol_feas,
            solver_max_iter: cfg.solver.max_iter,
            theta0: ThetaVector::initial().values.as_slice().to_vec(),
            learnable: THETA_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    /// Row-major system matrix.
    pub a: [f64; 4],
    pub b: [f64; 2],
    pub s_lb: [f64; 2],
    pub s_ub: [f64; 2],
    pub a_lb: f64,
    pub a_ub: f64,
    pub violation_weight: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let p = LinearPlant::default();
        Self {
            a: [p.a[(0, 0)], p.a[(0, 1)], p.a[(1, 0)], p.a[(1, 1)]],
            b: [p.b[0], p.b[1]],
            s_lb: p.s_lb,
            s_ub: p.s_ub,
            a_lb: p.a_lb,
            a_ub: p.a_ub,
            violation_weight: p.violation_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub n_q: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for QSection {
    fn default() -> Self {
        let q = QConfig::default();
        Self {
            hidden: q.hidden,
            epochs: q.epochs,
            batch: q.batch,
            lr: q.lr,
            n_q: q.n_q,
            gamma: q.gamma,
            seed: q.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensSection {
    pub max_kkt_residual: f64,
    pub min_complementarity: f64,
}

impl Default for SensSection {
    fn default() -> Self {
        let s = SensOptions::default();
        Self {
            max_kkt_residual: s.max_kkt_residual,
            min_complementarity: s.min_complementarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub n_candidates: usize,
    pub n_ep: usize,
    pub benchmark_horizon: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_candidates: 2500,
            n_ep: 50,
            benchmark_horizon: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    pub n_points: usize,
    pub seed: u64,
    pub first_step: f64,
    pub second_step: f64,
    pub first_tol: f64,
    pub second_tol: f64,
    pub symmetry_tol: f64,
    pub active_set_margin: f64,
    pub theta_spread: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        let c = SensCheckOptions::default();
        Self {
            n_points: c.n_points,
            seed: c.seed,
            first_step: c.first_step,
            second_step: c.second_step,
            first_tol: c.first_tol,
            second_tol: c.second_tol,
            symmetry_tol: c.symmetry_tol,
            active_set_margin: c.active_set_margin,
            theta_spread: c.theta_spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Renders the config with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    fn check(&self) -> Result<(), CliError> {
        self.variant()?;
        if self.env.a[2] != 0.0 {
            return Err(config_err("env.a: the case-study model has no (2,1) entry, it must be 0"));
        }
        if self.mpc.theta0.len() != THETA_NAMES.len() {
            return Err(config_err(format!(
                "mpc.theta0 needs {} values ({})",
                THETA_NAMES.len(),
                THETA_NAMES.join(", ")
            )));
        }
        self.learnable_indices()?;
        if self.q.hidden.is_empty() || self.q.hidden.contains(&0) {
            return Err(config_err("q.hidden must list positive layer widths"));
        }
        if self.q.epochs == 0 || self.q.batch == 0 {
            return Err(config_err("q.epochs and q.batch must be at least 1"));
        }
        if self.eval.n_ep == 0 || self.eval.benchmark_horizon == 0 {
            return Err(config_err("eval.n_ep and eval.benchmark_horizon must be at least 1"));
        }
        self.mpc_config().validate().map_err(|e| config_err(e.to_string()))?;
        self.train_config(None).validate().map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        self.train.variant.parse().map_err(CliError::Config)
    }

    pub fn learnable_indices(&self) -> Result<Vec<usize>, CliError> {
        let mut idx = Vec::with_capacity(self.mpc.learnable.len());
        for name in &self.mpc.learnable {
            let i = THETA_NAMES
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| config_err(format!("unknown parameter `{name}` in mpc.learnable")))?;
            if idx.contains(&i) {
                return Err(config_err(format!("parameter `{name}` listed twice in mpc.learnable")));
            }
            idx.push(i);
        }
        Ok(idx)
    }

    pub fn plant(&self) -> LinearPlant {
        let e = &self.env;
        LinearPlant {
            a: Matrix2::new(e.a[0], e.a[1], e.a[2], e.a[3]),
            b: Vector2::new(e.b[0], e.b[1]),
            s_lb: e.s_lb,
            s_ub: e.s_ub,
            a_lb: e.a_lb,
            a_ub: e.a_ub,
            violation_weight: e.violation_weight,
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        let m = &self.mpc;
        let w = m.terminal_weight;
        MpcConfig {
            model: CaseStudyModel {
                s_lb: self.env.s_lb,
                s_ub: self.env.s_ub,
                a_lb: self.env.a_lb,
                a_ub: self.env.a_ub,
                terminal_weight: Matrix2::new(w[0], w[1], w[2], w[3]),
            },
            horizon: m.horizon,
            discount: m.discount,
            slack_weight: m.slack_weight,
            terminal_slack_weight: m.terminal_slack_weight,
            solver: SolverOptions {
                tol_kkt: m.solver_tol,
                tol_feas: m.solver_tol_feas,
                max_iter: m.solver_max_iter,
                ..SolverOptions::default()
            },
        }
    }

    pub fn initial_theta(&self) -> ThetaVector {
        ThetaVector::case_study(&self.mpc.theta0)
    }

    pub fn policy(&self, theta: ThetaVector) -> Result<MpcPolicy, CliError> {
        MpcPolicy::new(self.mpc_config(), theta)
            .and_then(|p| p.with_learnable(self.learnable_indices().unwrap_or_default()))
            .map_err(|e| config_err(e.to_string()))
    }

    /// Controller with the true plant model and the long evaluation horizon.
    pub fn benchmark(&self) -> Result<MpcPolicy, CliError> {
        let e = &self.env;
        let cfg = MpcConfig {
            horizon: self.eval.benchmark_horizon,
            ..self.mpc_config()
        };
        let theta = ThetaVector::case_study(&[e.a[0], e.a[1], e.a[3], e.b[0], e.b[1], 0.0, 0.0, 0.0]);
        MpcPolicy::new(cfg, theta).map_err(|e| config_err(e.to_string()))
    }

    /// Training settings; `variant` overrides the configured one.
    pub fn train_config(&self, variant: Option<Variant>) -> TrainConfig {
        let v = variant.or_else(|| self.variant().ok()).unwrap_or(Variant::QnTr);
        let d = TrainConfig::for_variant(v);
        let t = &self.train;
        TrainConfig {
            variant: v,
            alpha: t.alpha.unwrap_or(d.alpha),
            delta0: t.delta0.unwrap_or(d.delta0),
            delta_max: t.delta_max,
            eps: t.eps,
            n_ic: t.n_ic,
            n_ep: t.n_ep,
            n_r: t.n_r,
            exploration_std: t.exploration_std,
            max_iter: t.max_iter,
            seed: t.seed,
            q: QConfig {
                hidden: self.q.hidden.clone(),
                epochs: self.q.epochs,
                batch: self.q.batch,
                lr: self.q.lr,
                n_q: self.q.n_q,
                gamma: self.q.gamma,
                seed: self.q.seed,
            },
            sens: SensOptions {
                max_kkt_residual: self.sens.max_kkt_residual,
                min_complementarity: self.sens.min_complementarity,
            },
        }
    }

    pub fn check_options(&self) -> SensCheckOptions {
        let c = &self.check;
        SensCheckOptions {
            n_points: c.n_points,
            seed: c.seed,
            first_step: c.first_step,
            second_step: c.second_step,
            first_tol: c.first_tol,
            second_tol: c.second_tol,
            symmetry_tol: c.symmetry_tol,
            active_set_margin: c.active_set_margin,
            theta_spread: c.theta_spread,
        }
    }

    /// Copy with the variant-dependent defaults written out, for the manifest.
    pub fn resolved(&self, variant: Variant) -> Self {
        let tc = self.train_config(Some(variant));
        let mut out = self.clone();
        out.train.variant = variant.name().into();
        out.train.alpha = Some(tc.alpha);
        out.train.delta0 = Some(tc.delta0);
        out
    }
}
