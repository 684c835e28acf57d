//! Command-line front end: `gradcheck`, `price`, `bench` and `calibrate`.
//!
//! Every command reads a JSON run configuration (a model specification plus
//! optional sections), applies command-line overrides and writes its
//! artifacts to `--out-dir`. Each artifact embeds the effective
//! configuration. Exit codes: 0 success, 1 invalid input, 2 numerical
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{measure_coefficients, report_table, BenchConfig, MIN_REPS, MIN_WARMUP};
use crate::calibrate::{gradient_descent, heston_bounds, synthetic_targets, OptimizerConfig, SubsetObjective, Termination};
use crate::error::{Error, Result};
use crate::expectation::{estimate_means, finite_diff_objective_gradient, gradient_of_g, GradientOptions, GradientReport, Targets};
use crate::heston::{pack_params, param_names, ModelSpec};
use crate::kernel::{Kernel, MemoryMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub lane_width: usize,
    pub threads: usize,
    pub memory_mode: MemoryMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            lane_width: 8,
            threads: 1,
            memory_mode: MemoryMode::Recompute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    /// Relative finite-difference step.
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { h: 1e-6, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Names of the calibrated parameters, e.g. `kappa` or `L[0,1]`.
    pub free: Vec<String>,
    /// Starting values; parameters not listed start at the model values.
    pub initial: BTreeMap<String, f64>,
    pub optimizer: OptimizerConfig,
    /// Scale each free parameter by its starting magnitude unless the
    /// optimizer sets an explicit scale.
    pub scale_by_initial: bool,
}

const SCALE_FLOOR: f64 = 1e-3;

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            free: vec!["kappa".into(), "theta".into()],
            initial: BTreeMap::new(),
            optimizer: OptimizerConfig {
                g_rel_tol: 1e-12,
                ..Default::default()
            },
            scale_by_initial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub reps: usize,
    pub warmup: usize,
    /// One report row per lane width; empty means the engine lane width.
    pub lane_widths: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            reps: MIN_REPS,
            warmup: MIN_WARMUP,
            lane_widths: Vec::new(),
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelSpec,
    /// Targets `C_i`. Without them `gradcheck` uses zeros and `calibrate`
    /// generates synthetic targets from the model parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<f64>>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn from_model(model: ModelSpec) -> Self {
        RunConfig {
            model,
            targets: None,
            engine: EngineConfig::default(),
            gradcheck: GradcheckConfig::default(),
            calibration: CalibrationConfig::default(),
            bench: BenchSection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.engine.lane_width == 0 {
            return Err(Error::Config("lane_width must be at least 1".into()));
        }
        if self.engine.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some(t) = &self.targets {
            if t.len() != self.model.instruments.len() {
                return Err(Error::Length {
                    what: "targets",
                    expected: self.model.instruments.len(),
                    got: t.len(),
                });
            }
        }
        Ok(())
    }

    fn gradient_options(&self) -> GradientOptions {
        GradientOptions {
            memory_mode: self.engine.memory_mode,
            threads: self.engine.threads,
            ..Default::default()
        }
    }
}

/// Synthetic calibration problem used by `calibrate` without `--config`:
/// recover `kappa` and `theta` of a Heston model with unit leverage.
///
/// A leverage surface that is piecewise constant in spot makes `G`
/// discontinuous on a fixed path set, and a variance process that touches
/// zero puts square-root cusps into it; descent stalls on either. The demo
/// keeps `L = 1` and a small `xi` so that neither occurs.
pub fn demo_calibration(seed: u64) -> RunConfig {
    let mut model = ModelSpec::demo(16, 4, 4096, seed);
    model.heston.xi = 0.1;
    model.grid = crate::heston::LeverageGrid::flat(1.0);
    let mut cfg = RunConfig::from_model(model);
    cfg.calibration.initial = BTreeMap::from([("kappa".into(), 1.0), ("theta".into(), 0.05)]);
    cfg
}

#[derive(Debug, Parser)]
#[command(name = "mc-adjoint", version, about = "Adjoint Monte Carlo gradients and Heston SLV calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare the adjoint gradient of G with central finite differences.
    Gradcheck(CommonArgs),
    /// Estimate E y_i with standard errors.
    Price(CommonArgs),
    /// Measure the cost coefficients K_F/c and K_R/c.
    Bench(CommonArgs),
    /// Calibrate by gradient descent on G.
    Calibrate(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<u64>,
    #[arg(long)]
    lane_width: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// `recompute` or `store`.
    #[arg(long)]
    memory_mode: Option<MemoryMode>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.model.mc.seed = s;
        }
        if let Some(p) = self.paths {
            cfg.model.mc.paths = p;
        }
        if let Some(c) = self.lane_width {
            cfg.engine.lane_width = c;
        }
        if let Some(t) = self.threads {
            cfg.engine.threads = t;
        }
        if let Some(m) = self.memory_mode {
            cfg.engine.memory_mode = m;
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs the command line `argv` (without the program name) and returns the
/// process exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<S: AsRef<str>>(argv: &[S], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = std::iter::once("mc-adjoint").chain(argv.iter().map(AsRef::as_ref));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let (name, args) = match &cli.command {
        Command::Gradcheck(a) => ("gradcheck", a),
        Command::Price(a) => ("price", a),
        Command::Bench(a) => ("bench", a),
        Command::Calibrate(a) => ("calibrate", a),
    };
    let result = load_config(name, args).and_then(|cfg| {
        fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
        match &cli.command {
            Command::Gradcheck(_) => gradcheck(&cfg, &args.out_dir, out),
            Command::Price(_) => price(&cfg, &args.out_dir, out),
            Command::Bench(_) => bench(&cfg, &args.out_dir, out),
            Command::Calibrate(_) => calibrate(&cfg, &args.out_dir, out),
        }
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            let _ = writeln!(err, "error: {msg}\n\n{usage}");
            1
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn load_config(name: &str, args: &CommonArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?,
        None if name == "calibrate" => demo_calibration(args.seed.unwrap_or(42)),
        None => return Err(Failure::Usage(format!("{name} requires --config <FILE>"))),
    };
    args.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn config_line(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string(cfg)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn check_finite(what: &str, values: &[f64]) -> Outcome {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Failure::Check(format!("non-finite {what}")))
    }
}

fn setup(cfg: &RunConfig) -> Result<(Kernel, Vec<f64>, Vec<String>)> {
    let program = cfg.model.record()?;
    let kernel = Kernel::freeze(&program.tape, cfg.engine.lane_width)?;
    Ok((kernel, pack_params(&cfg.model.heston, &cfg.model.grid), program.param_names()))
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    config: &'a RunConfig,
    parameters: &'a [String],
    report: &'a GradientReport,
    finite_difference: &'a [f64],
    relative_error: &'a [f64],
    max_relative_error: f64,
    passed: bool,
}

fn gradcheck(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Outcome {
    let (kernel, params, names) = setup(cfg)?;
    let targets = Targets(cfg.targets.clone().unwrap_or_else(|| vec![0.0; kernel.num_outputs()]));
    let source = cfg.model.mc_config();
    let report = gradient_of_g(&kernel, &params, &targets, &source, &cfg.gradient_options())?;
    check_finite("gradient", &report.grad)?;
    let fd = finite_diff_objective_gradient(&kernel, &params, &targets, &source, cfg.gradcheck.h, cfg.engine.threads)?;
    check_finite("finite-difference gradient", &fd)?;
    let rel: Vec<f64> = report
        .grad
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(1e-8))
        .collect();
    let max_rel = rel.iter().copied().fold(0.0, f64::max);
    let passed = max_rel <= cfg.gradcheck.tolerance;

    writeln!(out, "{:<10} {:>24} {:>24} {:>10}", "param", "adjoint", "finite diff", "rel err").map_err(Error::from)?;
    for (j, name) in names.iter().enumerate() {
        writeln!(out, "{:<10} {:>24.15e} {:>24.15e} {:>10.2e}", name, report.grad[j], fd[j], rel[j])
            .map_err(Error::from)?;
    }
    writeln!(out, "max relative error {max_rel:.3e} (tolerance {:.1e})", cfg.gradcheck.tolerance).map_err(Error::from)?;
    write_json(
        &out_dir.join("gradcheck.json"),
        &GradcheckOutput {
            config: cfg,
            parameters: &names,
            report: &report,
            finite_difference: &fd,
            relative_error: &rel,
            max_relative_error: max_rel,
            passed,
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed: max relative error {max_rel:.3e} exceeds {:.1e}",
            cfg.gradcheck.tolerance
        )))
    }
}

#[derive(Serialize)]
struct PriceOutput<'a> {
    config: &'a RunConfig,
    paths: u64,
    means: &'a [f64],
    std_errors: &'a [f64],
}

fn price(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Outcome {
    let (kernel, params, _) = setup(cfg)?;
    let est = estimate_means(&kernel, &params, &cfg.model.mc_config(), false, cfg.engine.threads)?;
    check_finite("price", &est.means)?;
    writeln!(out, "{:<4} {:<5} {:>10} {:>9} {:>22} {:>12}", "i", "kind", "strike", "maturity", "mean", "std err")
        .map_err(Error::from)?;
    for (i, inst) in cfg.model.instruments.iter().enumerate() {
        let kind = if inst.kind == crate::heston::OptionKind::Call { "call" } else { "put" };
        writeln!(
            out,
            "{:<4} {:<5} {:>10.4} {:>9} {:>22.15e} {:>12.4e}",
            i, kind, inst.strike, inst.maturity_step, est.means[i], est.std_errors[i]
        )
        .map_err(Error::from)?;
    }
    write_json(
        &out_dir.join("price.json"),
        &PriceOutput {
            config: cfg,
            paths: est.paths,
            means: &est.means,
            std_errors: &est.std_errors,
        },
    )?;
    Ok(())
}

fn bench(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Outcome {
    if cfg.engine.threads != 1 {
        return Err(Failure::Run(Error::Config("bench timing runs on one worker; use --threads 1".into())));
    }
    let program = cfg.model.record()?;
    let widths = if cfg.bench.lane_widths.is_empty() {
        vec![cfg.engine.lane_width]
    } else {
        cfg.bench.lane_widths.clone()
    };
    let mut reports = Vec::new();
    for c in widths {
        let kernel = Kernel::freeze(&program.tape, c)?;
        let bc = BenchConfig {
            label: format!("c={c} {}", cfg.engine.memory_mode),
            paths: cfg.model.mc.paths,
            seed: cfg.model.mc.seed,
            reps: cfg.bench.reps,
            warmup: cfg.bench.warmup,
            memory_mode: cfg.engine.memory_mode,
        };
        reports.push(measure_coefficients(&program, &kernel, &cfg.model, &bc)?);
    }
    let (text, csv) = report_table(&reports)?;
    write!(out, "{text}").map_err(Error::from)?;
    for r in &reports {
        writeln!(
            out,
            "{}: total {:.3} vs predicted {:.3}; step 2 per path {:.3e} s recompute, {:.3e} s store",
            r.label,
            r.total_ratio,
            r.predicted_ratio(),
            r.step2_recompute,
            r.step2_store
        )
        .map_err(Error::from)?;
    }
    fs::write(out_dir.join("bench.txt"), &text).map_err(Error::from)?;
    let mut file = fs::File::create(out_dir.join("bench.csv")).map_err(Error::from)?;
    writeln!(file, "# config: {}", config_line(cfg)?).map_err(Error::from)?;
    file.write_all(csv.as_bytes()).map_err(Error::from)?;
    write_json(
        &out_dir.join("bench.json"),
        &serde_json::json!({ "config": cfg, "reports": reports }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct CalibrationOutput<'a> {
    config: &'a RunConfig,
    targets: &'a [f64],
    free: &'a [String],
    iterations: usize,
    termination: Termination,
    initial_g: f64,
    parameters: BTreeMap<String, f64>,
    report: &'a GradientReport,
}

fn calibrate(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Outcome {
    let (kernel, model_params, names) = setup(cfg)?;
    let source = cfg.model.mc_config();
    let targets = match &cfg.targets {
        Some(t) => Targets(t.clone()),
        None => synthetic_targets(&kernel, &model_params, &source, cfg.engine.threads)?,
    };
    let cal = &cfg.calibration;
    let index = |name: &String| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}; expected one of {names:?}")))
    };
    let free = cal.free.iter().map(index).collect::<Result<Vec<_>>>()?;
    if free.is_empty() {
        return Err(Failure::Run(Error::Config("calibration needs at least one free parameter".into())));
    }
    let mut start = model_params.clone();
    for (name, &v) in &cal.initial {
        start[index(name)?] = v;
    }
    let objective = SubsetObjective {
        kernel: &kernel,
        targets: &targets,
        source: &source,
        options: cfg.gradient_options(),
        base: start.clone(),
        free: free.clone(),
    };
    let mut opt = cal.optimizer.clone();
    if opt.scale.is_empty() && cal.scale_by_initial {
        opt.scale = objective.restrict(&start).iter().map(|v| v.abs().max(SCALE_FLOOR)).collect();
    }
    if opt.lower.is_empty() && opt.upper.is_empty() {
        let (lo, hi) = heston_bounds(names.len());
        opt.lower = objective.restrict(&lo);
        opt.upper = objective.restrict(&hi);
    }
    let traj = gradient_descent(|x| objective.evaluate(x), &objective.restrict(&start), &opt)?;
    let last = traj.last();
    let report = objective.report(&last.params)?;

    let free_names: Vec<String> = free.iter().map(|&j| names[j].clone()).collect();
    let mut file = fs::File::create(out_dir.join("trajectory.csv")).map_err(Error::from)?;
    traj.write_csv(&mut file, &free_names, &[format!("config: {}", config_line(cfg)?)])?;
    let full = objective.full(&last.params);
    write_json(
        &out_dir.join("calibration.json"),
        &CalibrationOutput {
            config: cfg,
            targets: &targets.0,
            free: &free_names,
            iterations: last.iter,
            termination: traj.termination,
            initial_g: traj.iterates[0].g,
            parameters: param_names((cfg.model.grid.t_nodes.len(), cfg.model.grid.s_nodes.len()))
                .into_iter()
                .zip(full)
                .collect(),
            report: &report,
        },
    )?;
    writeln!(
        out,
        "{} iterations, termination {:?}, G {:.6e} -> {:.6e}",
        last.iter, traj.termination, traj.iterates[0].g, last.g
    )
    .map_err(Error::from)?;
    for (name, v) in free_names.iter().zip(&last.params) {
        writeln!(out, "{name} = {v:.12}").map_err(Error::from)?;
    }
    if traj.termination == Termination::NonFinite {
        return Err(Failure::Check("calibration produced a non-finite objective".into()));
    }
    Ok(())
}
