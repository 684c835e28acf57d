//! Acceptance criteria as reusable checks. Each returns a verdict with a
//! one-line summary of what was measured.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mc_adjoint::bench::{measure_coefficients, BenchConfig, BenchReport};
use mc_adjoint::calibrate::{gradient_descent, heston_bounds, synthetic_targets, OptimizerConfig, SubsetObjective};
use mc_adjoint::cli::{self, RunConfig};
use mc_adjoint::expectation::{
    estimate_means, expected_backward_ad, finite_diff_objective_gradient, gradient_of_g, ExpectationProgram,
    GradientOptions, McConfig, SampleSpace, Targets,
};
use mc_adjoint::heston::{
    pack_params, HestonParams, InstrumentSpec, LeverageGrid, ModelSpec, OptionKind, SimulationSpec,
};
use mc_adjoint::kernel::{Kernel, LaneBatch, MemoryMode, ReverseSource};
use mc_adjoint::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{random_tape, recovery_spec, Shape};

pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: String) -> Self {
        Verdict { passed, detail }
    }
}

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Gradient of `G` against central differences on the small Heston config
/// (3x3 grid, M = 14, m = 4, 64 paths, 16 steps).
pub fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let cfg = RunConfig::load(&config_path("heston_small.json")).unwrap();
    let program = cfg.model.record().unwrap();
    let kernel = Kernel::freeze(&program.tape, cfg.engine.lane_width).unwrap();
    let params = pack_params(&cfg.model.heston, &cfg.model.grid);
    let targets = Targets(cfg.targets.clone().unwrap());
    let source = cfg.model.mc_config();
    let rep = gradient_of_g(&kernel, &params, &targets, &source, &GradientOptions::default()).unwrap();
    let fd = finite_diff_objective_gradient(&kernel, &params, &targets, &source, 1e-6, 1).unwrap();
    let worst = rep
        .grad
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        kernel.num_params() == 14 && kernel.num_outputs() == 4 && worst <= 1e-6 && secs < 10.0,
        format!(
            "M = {}, m = {}: max relative error {worst:.2e} (limit 1e-6) in {secs:.2} s",
            kernel.num_params(),
            kernel.num_outputs()
        ),
    )
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Two-pass gradient of `G` against the expectation-aware backward oracle.
/// Returns `(worst relative error, cases)`.
pub fn oracle_equivalence_error(cases: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    let mut run = |tape: &Tape, params: &[f64], targets: Targets, scenarios: Vec<Vec<f64>>, lanes: usize| {
        let space = SampleSpace::new(scenarios).unwrap();
        let program = ExpectationProgram::for_objective(tape, &targets).unwrap();
        let oracle = expected_backward_ad(&program, params, &space).unwrap();
        let kernel = Kernel::freeze(tape, lanes).unwrap();
        let rep = gradient_of_g(&kernel, params, &targets, &space, &GradientOptions::default()).unwrap();
        worst = worst.max(max_rel(&rep.grad, &oracle.params));
        worst = worst.max(max_rel(&[rep.g], &[oracle.value]));
    };
    for _ in 0..cases {
        let shape = Shape {
            max_depth: rng.gen_range(1..=10),
            params: rng.gen_range(1..=4),
            randoms: rng.gen_range(1..=3),
            outputs: rng.gen_range(1..=3),
        };
        let g = random_tape(&mut rng, shape);
        let n = rng.gen_range(1..=64);
        let scenarios = (0..n)
            .map(|_| (0..shape.randoms).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let targets = Targets((0..shape.outputs).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let lanes = [1, 4, 8][rng.gen_range(0..3)];
        run(&g.tape, &g.params, targets, scenarios, lanes);
    }
    let spec = ModelSpec::demo(4, 2, 8, 1);
    let program = spec.record().unwrap();
    let scenarios = (0..8)
        .map(|_| (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    run(
        &program.tape,
        &pack_params(&spec.heston, &spec.grid),
        Targets(vec![4.0, 2.0]),
        scenarios,
        4,
    );
    (worst, cases + 1)
}

pub fn oracle_equivalence() -> Verdict {
    let (worst, cases) = oracle_equivalence_error(120);
    Verdict::new(
        worst <= 1e-12,
        format!("{cases} programs (120 random, 1 Heston with 8 scenarios): max relative error {worst:.2e} (limit 1e-12)"),
    )
}

/// Worst relative difference between each lane of the batched kernel and
/// the scalar tape, over forward outputs and reverse adjoints.
pub fn lane_error(tape: &Tape, lanes: usize, rng: &mut ChaCha8Rng, param_jitter: f64) -> f64 {
    let kernel = Kernel::freeze(tape, lanes).unwrap();
    let base_p = tape.param_defaults();
    let ps: Vec<Vec<f64>> = (0..lanes)
        .map(|_| base_p.iter().map(|p| p * (1.0 + param_jitter * rng.gen_range(-1.0..1.0))).collect())
        .collect();
    let rs: Vec<Vec<f64>> = (0..lanes)
        .map(|_| (0..tape.random_inputs().len()).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let ls: Vec<Vec<f64>> = (0..lanes)
        .map(|_| (0..tape.outputs().len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let pb = LaneBatch::from_lanes(&ps).unwrap();
    let rb = LaneBatch::from_lanes(&rs).unwrap();
    let lb = LaneBatch::from_lanes(&ls).unwrap();
    let (out, state) = kernel.forward_batch(&pb, &rb, true).unwrap();
    let adj = kernel.reverse_batch(ReverseSource::State(&state.unwrap()), &lb).unwrap();
    let adj2 = kernel
        .reverse_batch(ReverseSource::Inputs { params: &pb, randoms: &rb }, &lb)
        .unwrap();
    assert_eq!(adj, adj2);
    let mut worst = 0.0f64;
    for lane in 0..lanes {
        let eval = tape.forward_eval(&ps[lane], &rs[lane]).unwrap();
        worst = worst.max(max_rel(&out.lane(lane), &eval.outputs));
        let sc = tape.reverse_seeded(&eval.state, &ls[lane]).unwrap().concat();
        worst = worst.max(max_rel(&adj.lane(lane), &sc));
    }
    worst
}

pub fn lane_equivalence_error(random_cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let shape = Shape {
        max_depth: 12,
        params: 3,
        randoms: 2,
        outputs: 2,
    };
    let tapes: Vec<Tape> = (0..random_cases).map(|_| random_tape(&mut rng, shape).tape).collect();
    let heston = ModelSpec::demo(16, 4, 64, 1).record().unwrap().tape;
    let mut worst = 0.0f64;
    for lanes in [1, 4, 8] {
        for t in &tapes {
            worst = worst.max(lane_error(t, lanes, &mut rng, 0.5));
        }
        worst = worst.max(lane_error(&heston, lanes, &mut rng, 0.1));
    }
    worst
}

pub fn lane_equivalence() -> Verdict {
    let worst = lane_equivalence_error(200);
    Verdict::new(
        worst <= 1e-13,
        format!("200 random tapes and the Heston tape at widths 1, 4, 8: max relative error {worst:.2e} (limit 1e-13)"),
    )
}

pub fn bench_report(steps: usize, m: usize, paths: u64, lanes: usize, label: &str) -> BenchReport {
    let spec = ModelSpec::demo(steps, m, paths, 11);
    let program = spec.record().unwrap();
    let kernel = Kernel::freeze(&program.tape, lanes).unwrap();
    let cfg = BenchConfig {
        label: label.into(),
        paths,
        seed: 11,
        memory_mode: MemoryMode::Recompute,
        ..Default::default()
    };
    measure_coefficients(&program, &kernel, &spec, &cfg).unwrap()
}

pub fn cost_identity() -> Verdict {
    let r = bench_report(128, 16, 65_536, 8, "c=8");
    let err = r.identity_error();
    let store_cheaper = r.step2_store < r.step2_recompute;
    Verdict::new(
        err <= 0.2 && store_cheaper,
        format!(
            "K_F/c {:.3}, K_R/c {:.3}: total {:.3} vs 2K_F/c + K_R/c = {:.3} ({:.1}% off, limit 20%); step 2 per path store {:.3e} s < recompute {:.3e} s: {}",
            r.kf_over_c,
            r.kr_over_c,
            r.total_ratio,
            r.predicted_ratio(),
            100.0 * err,
            r.step2_store,
            r.step2_recompute,
            store_cheaper
        ),
    )
}

fn spread(xs: &[f64]) -> f64 {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(0.0, f64::max);
    (hi - lo) / lo
}

pub fn coefficient_stability() -> Verdict {
    let mut kf = Vec::new();
    let mut kr = Vec::new();
    for steps in [32, 64, 128, 256] {
        for m in [4, 16, 32] {
            let r = bench_report(steps, m, 32_768, 8, "stability");
            kf.push(r.kf_over_c);
            kr.push(r.kr_over_c);
        }
    }
    let (sf, sr) = (spread(&kf), spread(&kr));
    let wide = bench_report(128, 16, 8192, 8, "c=8").kf_over_c;
    let narrow = bench_report(128, 16, 8192, 1, "c=1").kf_over_c;
    Verdict::new(
        sf < 0.25 && sr < 0.25 && wide <= narrow,
        format!(
            "12 sizes, spread as max/min - 1: K_F/c {:.1}%, K_R/c {:.1}% (limit 25%); K_F/c at c=8 {wide:.3} vs c=1 {narrow:.3}",
            100.0 * sf,
            100.0 * sr
        ),
    )
}

pub fn black_scholes_price(s0: f64, strike: f64, sigma: f64, t: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let sd = sigma * t.sqrt();
    let d1 = ((s0 / strike).ln() + 0.5 * sd * sd) / sd;
    s0 * n.cdf(d1) - strike * n.cdf(d1 - sd)
}

pub fn black_scholes_limit() -> Verdict {
    let started = Instant::now();
    let steps = 256;
    let spec = ModelSpec {
        heston: HestonParams {
            kappa: 1.0,
            theta: 0.04,
            xi: 0.0,
            rho: 0.0,
            v0: 0.04,
            s0: 100.0,
            mu: 0.0,
        },
        grid: LeverageGrid::flat(1.0),
        instruments: vec![InstrumentSpec {
            kind: OptionKind::Call,
            strike: 100.0,
            maturity_step: steps,
        }],
        mc: SimulationSpec {
            paths: 1 << 20,
            steps,
            dt: 1.0 / steps as f64,
            seed: 2024,
            antithetic: false,
        },
    };
    let program = spec.record().unwrap();
    let kernel = Kernel::freeze(&program.tape, 8).unwrap();
    let params = pack_params(&spec.heston, &spec.grid);
    let est = estimate_means(&kernel, &params, &spec.mc_config(), false, 1).unwrap();
    let exact = black_scholes_price(100.0, 100.0, 0.2, 1.0);
    let z = (est.means[0] - exact) / est.std_errors[0];
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        z.abs() <= 3.0 && secs < 60.0,
        format!(
            "MC {:.5} +/- {:.5} vs closed form {exact:.5}: {z:+.2} standard errors (limit 3) in {secs:.1} s",
            est.means[0], est.std_errors[0]
        ),
    )
}

pub struct Recovery {
    pub kappa: f64,
    pub theta: f64,
    pub g0: f64,
    pub g: f64,
    pub iterations: usize,
}

pub fn recover(seed: u64) -> Recovery {
    let spec = recovery_spec(4096, seed);
    let program = spec.record().unwrap();
    let kernel = Kernel::freeze(&program.tape, 8).unwrap();
    let truth = pack_params(&spec.heston, &spec.grid);
    let source = McConfig::new(spec.mc.paths, seed);
    let targets = synthetic_targets(&kernel, &truth, &source, 1).unwrap();
    let mut start = truth.clone();
    start[0] = 1.0;
    start[1] = 0.05;
    let objective = SubsetObjective {
        kernel: &kernel,
        targets: &targets,
        source: &source,
        options: GradientOptions::default(),
        base: start.clone(),
        free: vec![0, 1],
    };
    let (lo, hi) = heston_bounds(truth.len());
    let x0 = objective.restrict(&start);
    let cfg = OptimizerConfig {
        max_iters: 500,
        g_rel_tol: 1e-12,
        scale: x0.clone(),
        lower: objective.restrict(&lo),
        upper: objective.restrict(&hi),
        ..Default::default()
    };
    let traj = gradient_descent(|x| objective.evaluate(x), &x0, &cfg).unwrap();
    let last = traj.last();
    Recovery {
        kappa: last.params[0],
        theta: last.params[1],
        g0: traj.iterates[0].g,
        g: last.g,
        iterations: last.iter,
    }
}

pub fn calibration_recovery() -> Verdict {
    let started = Instant::now();
    let r = recover(42);
    let ek = (r.kappa - 1.5).abs() / 1.5;
    let et = (r.theta - 0.04).abs() / 0.04;
    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        r.g <= 1e-10 * r.g0 && r.iterations <= 500 && ek <= 0.01 && et <= 0.01 && secs < 300.0,
        format!(
            "{} iterations, G {:.2e} -> {:.2e} (ratio {:.1e}, limit 1e-10); kappa {:.6} ({:.1e} rel), theta {:.6} ({:.1e} rel) in {secs:.1} s",
            r.iterations,
            r.g0,
            r.g,
            r.g / r.g0,
            r.kappa,
            ek,
            r.theta,
            et
        ),
    )
}

fn run_cli(args: &[String]) -> i32 {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    cli::run_with(args, &mut out, &mut err)
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Runs each deterministic CLI command twice and compares every output file.
pub fn cli_determinism() -> Verdict {
    let config = config_path("heston_small.json").display().to_string();
    let commands: Vec<Vec<&str>> = vec![
        vec!["gradcheck", "--config", &config],
        vec!["price", "--config", &config, "--paths", "5000", "--lane-width", "4"],
        vec!["price", "--config", &config, "--memory-mode", "store", "--threads", "2"],
        vec!["calibrate", "--seed", "42"],
    ];
    let mut notes = Vec::new();
    let mut passed = true;
    for cmd in &commands {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut codes = Vec::new();
        for d in &dirs {
            let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
            args.extend(["--out-dir".to_string(), d.path().display().to_string()]);
            codes.push(run_cli(&args));
        }
        let (a, b) = (dir_files(dirs[0].path()), dir_files(dirs[1].path()));
        let same = codes == [0, 0] && !a.is_empty() && a == b;
        passed &= same;
        notes.push(format!("{} ({} files): {}", cmd[0], a.len(), if same { "identical" } else { "DIFFERENT" }));
    }
    Verdict::new(passed, notes.join("; "))
}
