//! Command-line front end: training runs, evaluation on regenerated test sets,
//! sensitivity audits and test-set export.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mpcqn::check::sens_check;
use mpcqn::env::{evaluate, fmt_f64, make_test_set, write_metrics, write_test_set, write_trajectories, EvalMetrics, TestSet};
use mpcqn::mpc::{ThetaVector, THETA_NAMES};
use mpcqn::trainer::{train, write_log, TrainError, Variant};
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("sensitivity check failed")]
    CheckFailed,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::CheckFailed => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mpcqn", version, about = "Learn MPC parameters with trust-region quasi-Newton policy updates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the MPC parameters and write the curve, θ, Q checkpoint and manifest.
    Train {
        config: PathBuf,
        /// One of gd, gd-tr, qn, qn-tr; overrides `train.variant`.
        #[arg(long)]
        variant: Option<String>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a θ file on a test set regenerated from the benchmark controller.
    Eval {
        theta: PathBuf,
        config: PathBuf,
        /// Overrides `eval.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare solution sensitivities against finite differences.
    SensCheck { config: PathBuf },
    /// Build the test set and export it with the benchmark trajectories.
    MakeTestset {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            config,
            variant,
            seed,
            out,
        } => cmd_train(config, variant.as_deref(), *seed, out.as_deref()),
        Command::Eval { theta, config, seed, out } => cmd_eval(theta, config, *seed, out.as_deref()),
        Command::SensCheck { config } => cmd_sens_check(config),
        Command::MakeTestset { config, seed, out } => cmd_make_testset(config, *seed, out.as_deref()),
    }
}

fn out_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = out.map_or_else(|| cfg.output.dir.clone(), Path::to_path_buf);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_with<F, E>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), E>,
    E: std::fmt::Display,
{
    let mut w = create(path)?;
    f(&mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn write_manifest(path: &Path, command: &str, cfg: &ExperimentConfig, seeds: &[(&str, u64)]) -> Result<(), CliError> {
    write_with(path, |w| -> std::io::Result<()> {
        writeln!(w, "[run]")?;
        writeln!(w, "command = \"{command}\"")?;
        writeln!(w, "mpcqn_version = \"{}\"", env!("CARGO_PKG_VERSION"))?;
        for (name, v) in seeds {
            writeln!(w, "{name} = {v}")?;
        }
        writeln!(w)?;
        w.write_all(cfg.to_toml().as_bytes())
    })
}

/// Writes θ as `name,value` rows.
pub fn write_theta<W: Write>(theta: &ThetaVector, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "value"])?;
    for (n, v) in theta.names.iter().zip(theta.values.iter()) {
        w.write_record([n.as_str(), &fmt_f64(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `name,value` file that lists every case-study parameter exactly once.
pub fn read_theta(path: &Path) -> Result<ThetaVector, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let mut values = [None; THETA_NAMES.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let (Some(name), Some(value)) = (rec.get(0), rec.get(1)) else {
            return Err(io_err(path, "expected `name,value` rows"));
        };
        let i = THETA_NAMES
            .iter()
            .position(|n| *n == name.trim())
            .ok_or_else(|| io_err(path, format!("unknown parameter `{name}`")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|e| io_err(path, format!("parameter `{name}`: {e}")))?;
        if values[i].replace(v).is_some() {
            return Err(io_err(path, format!("parameter `{name}` given twice")));
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (v, n) in values.iter().zip(THETA_NAMES) {
        out.push(v.ok_or_else(|| io_err(path, format!("missing parameter `{n}`")))?);
    }
    Ok(ThetaVector::case_study(&out))
}

pub fn cmd_train(config: &Path, variant: Option<&str>, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(v) = variant {
        cfg.train.variant = v.to_string();
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let variant: Variant = cfg.variant()?;
    let tc = cfg.train_config(Some(variant));
    tc.validate()?;
    let plant = cfg.plant();
    let policy = cfg.policy(cfg.initial_theta())?;
    let dir = out_dir(&cfg, out)?;
    let outcome = train(&tc, &plant, policy.clone())?;

    let mut final_policy = policy;
    final_policy.set_learnable_values(&outcome.theta);
    write_with(&dir.join("training_curve.csv"), |w| write_log(&outcome.log, false, w))?;
    write_with(&dir.join("training_log.csv"), |w| write_log(&outcome.log, true, w))?;
    write_with(&dir.join("theta.csv"), |w| write_theta(&final_policy.theta, w))?;
    write_with(&dir.join("theta_history.csv"), |w| {
        write_theta_history(&final_policy.theta.names, &final_policy.learn, &outcome.theta_history, w)
    })?;
    if let Some(q) = &outcome.q {
        write_with(&dir.join("q_checkpoint.txt"), |w| q.save(w))?;
    }
    write_manifest(
        &dir.join("manifest.toml"),
        "train",
        &cfg.resolved(variant),
        &[("train_seed", tc.seed), ("q_seed", tc.q.seed)],
    )?;
    let last = outcome.log.last();
    println!(
        "{variant}: {} iterations, last J {}, skipped samples {}, output {}",
        outcome.log.len(),
        last.map_or_else(|| "n/a".into(), |r| format!("{:.6}", r.j)),
        outcome.skipped_samples,
        dir.display()
    );
    Ok(())
}

fn write_theta_history<W: Write>(names: &[String], learn: &[usize], rows: &[Vec<f64>], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter".to_string()];
    header.extend(learn.iter().map(|&i| names[i].clone()));
    w.write_record(&header)?;
    for (k, row) in rows.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn build_test_set(cfg: &ExperimentConfig) -> Result<TestSet, CliError> {
    let bench = cfg.benchmark()?;
    make_test_set(&cfg.plant(), &bench, cfg.eval.seed, cfg.eval.n_candidates, cfg.eval.n_ep)
        .map_err(|e| CliError::Numerical(e.to_string()))
}

fn print_metrics(label: &str, m: &EvalMetrics) {
    println!(
        "{label:>9}: J={:.6} n_T={} n_T_if={} n_P={} n_P_if={} CV_max={:.3e}",
        m.j, m.n_t, m.n_t_if, m.n_p, m.n_p_if, m.cv_max
    );
}

pub fn cmd_eval(theta: &Path, config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    let theta = read_theta(theta)?;
    let policy = cfg.policy(theta)?;
    let dir = out_dir(&cfg, out)?;
    let set = build_test_set(&cfg)?;
    let (metrics, trajs) = evaluate(&cfg.plant(), &policy, &set).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_with(&dir.join("eval_metrics.csv"), |w| write_metrics(&metrics, w))?;
    write_with(&dir.join("benchmark_metrics.csv"), |w| write_metrics(&set.reference, w))?;
    write_with(&dir.join("eval_trajectories.csv"), |w| write_trajectories(&cfg.plant(), &trajs, w))?;
    print_metrics("agent", &metrics);
    print_metrics("benchmark", &set.reference);
    println!("J / J_benchmark = {:.4}", metrics.j / set.reference.j);
    Ok(())
}

pub fn cmd_sens_check(config: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let opts = cfg.check_options();
    let learn = cfg.learnable_indices()?;
    let report = sens_check(&cfg.mpc_config(), &cfg.initial_theta(), &learn, &opts).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{:>5} {:>10} {:>10} {:>12} {:>12} {:>12}  status", "point", "s1", "s2", "first", "second", "symmetry");
    for (i, p) in report.points.iter().enumerate() {
        let status = match &p.failure {
            Some(f) => format!("FAIL ({f})"),
            None if p.passes(&opts) => "ok".into(),
            None => "FAIL".into(),
        };
        println!(
            "{i:>5} {:>10.6} {:>10.6} {:>12.3e} {:>12.3e} {:>12.3e}  {status}",
            p.state[0], p.state[1], p.first_err, p.second_err, p.symmetry_err
        );
    }
    println!(
        "max: first {:.3e} (tol {:.0e}), second {:.3e} (tol {:.0e}), symmetry {:.3e} (tol {:.0e}); {} parameters, {} points redrawn",
        report.max_first_err(),
        opts.first_tol,
        report.max_second_err(),
        opts.second_tol,
        report.max_symmetry_err(),
        opts.symmetry_tol,
        report.n_params,
        report.redrawn
    );
    if report.passes(&opts) {
        Ok(())
    } else {
        Err(CliError::CheckFailed)
    }
}

pub fn cmd_make_testset(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    let dir = out_dir(&cfg, out)?;
    let set = build_test_set(&cfg)?;
    let bench = cfg.benchmark()?;
    let (_, trajs) = evaluate(&cfg.plant(), &bench, &set).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_with(&dir.join("test_set.csv"), |w| write_test_set(&set, w))?;
    write_with(&dir.join("benchmark_trajectories.csv"), |w| write_trajectories(&cfg.plant(), &trajs, w))?;
    write_with(&dir.join("benchmark_metrics.csv"), |w| write_metrics(&set.reference, w))?;
    write_manifest(&dir.join("manifest.toml"), "make-testset", &cfg, &[("eval_seed", cfg.eval.seed)])?;
    println!("kept {} of {} candidates", set.len(), set.n_candidates);
    print_metrics("benchmark", &set.reference);
    Ok(())
}
