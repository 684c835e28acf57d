//! Cost coefficients of the vectorized forward and reverse kernels.
//!
//! With `Cost(F)` the per-path time of a hand-written scalar simulation, the
//! coefficients are `K_F/c = Cost(F_v)/Cost(F)` and `K_R/c = Cost(R_v)/Cost(F)`.
//! In recompute mode step 1 costs one forward pass and step 2 a forward plus
//! a reverse pass, so the gradient of `G` should cost about
//! `2 K_F/c + K_R/c` scalar simulations per path. In store mode step 2 only
//! reverses retained states and the prediction drops to `K_F/c + K_R/c`.
//!
//! Every cost is the median over the timed repetitions, after the warm-up
//! repetitions have run. Timing runs on one worker.

use std::hint::black_box;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectation::{gradient_of_g, GradientOptions, McConfig, PathSource, Targets, BLOCK_PATHS};
use crate::heston::{pack_params, simulate_path, HestonProgram, ModelSpec};
use crate::kernel::{Kernel, MemoryMode};

pub const MIN_REPS: usize = 5;
pub const MIN_WARMUP: usize = 1;

/// A timed repetition must span at least this many timer ticks.
const MIN_TICKS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub label: String,
    pub paths: u64,
    pub seed: u64,
    pub reps: usize,
    pub warmup: usize,
    /// Mode of the full gradient run behind `total_ratio`.
    pub memory_mode: MemoryMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            label: String::from("default"),
            paths: 65_536,
            seed: 1,
            reps: MIN_REPS,
            warmup: MIN_WARMUP,
            memory_mode: MemoryMode::Recompute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub lane_width: usize,
    pub threads: usize,
    pub steps: usize,
    pub m: usize,
    #[serde(rename = "M")]
    pub num_params: usize,
    pub paths: u64,
    pub memory_mode: MemoryMode,
    /// Seconds per path of the scalar simulation.
    #[serde(rename = "cost_F")]
    pub cost_f: f64,
    /// Seconds per path of the batched forward pass, draws included.
    #[serde(rename = "cost_Fv")]
    pub cost_fv: f64,
    /// Seconds per path of the batched reverse pass from a held state.
    #[serde(rename = "cost_Rv")]
    pub cost_rv: f64,
    /// Seconds per path of step 2 recomputing the forward pass.
    pub step2_recompute: f64,
    /// Seconds per path of step 2 reversing retained states.
    pub step2_store: f64,
    /// Seconds per path of the full gradient of `G`.
    pub cost_g: f64,
    pub kf_over_c: f64,
    pub kr_over_c: f64,
    pub total_ratio: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl BenchReport {
    pub fn predicted_ratio(&self) -> f64 {
        predicted_total_ratio(self.kf_over_c, self.kr_over_c, self.memory_mode)
    }

    /// `|total_ratio - predicted| / predicted`.
    pub fn identity_error(&self) -> f64 {
        let p = self.predicted_ratio();
        (self.total_ratio - p).abs() / p
    }

    pub fn row(&self) -> BenchRow {
        BenchRow {
            label: self.label.clone(),
            lane_width: self.lane_width,
            threads: self.threads,
            steps: self.steps,
            m: self.m,
            num_params: self.num_params,
            paths: self.paths,
            cost_f: self.cost_f,
            cost_fv: self.cost_fv,
            cost_rv: self.cost_rv,
            kf_over_c: self.kf_over_c,
            kr_over_c: self.kr_over_c,
            total_ratio: self.total_ratio,
        }
    }
}

/// Total cost of the gradient of `G` in units of `paths * Cost(F)`.
pub fn predicted_total_ratio(kf_over_c: f64, kr_over_c: f64, mode: MemoryMode) -> f64 {
    match mode {
        MemoryMode::Recompute => 2.0 * kf_over_c + kr_over_c,
        MemoryMode::Store => kf_over_c + kr_over_c,
    }
}

/// One CSV row of the coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub lane_width: usize,
    pub threads: usize,
    pub steps: usize,
    pub m: usize,
    #[serde(rename = "M")]
    pub num_params: usize,
    pub paths: u64,
    #[serde(rename = "cost_F")]
    pub cost_f: f64,
    #[serde(rename = "cost_Fv")]
    pub cost_fv: f64,
    #[serde(rename = "cost_Rv")]
    pub cost_rv: f64,
    pub kf_over_c: f64,
    pub kr_over_c: f64,
    pub total_ratio: f64,
}

fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..16 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Default)]
struct Sample {
    f: f64,
    fv: f64,
    rv: f64,
    step2_recompute: f64,
    step2_store: f64,
    g: f64,
}

struct Bench<'a> {
    kernel: &'a Kernel,
    spec: &'a ModelSpec,
    source: McConfig,
    params: Vec<f64>,
    param_lanes: Vec<f64>,
    seed_lanes: Vec<f64>,
    targets: Targets,
    memory_mode: MemoryMode,
}

impl Bench<'_> {
    fn load(&self, start: u64, draw: &mut [f64], randoms: &mut [f64]) {
        let c = self.kernel.lane_width();
        for lane in 0..c {
            self.source.fill(start + lane as u64, draw);
            for (n, &z) in draw.iter().enumerate() {
                randoms[n * c + lane] = z;
            }
        }
    }

    fn accumulate(&self, ws: &crate::kernel::Workspace, acc: &mut [f64]) {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += self.kernel.param_adjoint_lanes(ws, j).iter().sum::<f64>();
        }
    }

    fn scalar(&self) -> f64 {
        let spec = self.spec;
        let mut draw = vec![0.0; 2 * spec.mc.steps];
        let mut out = vec![0.0; spec.instruments.len()];
        let mut sink = 0.0;
        let t0 = Instant::now();
        for p in 0..self.source.paths {
            self.source.fill(p, &mut draw);
            simulate_path(&spec.heston, &spec.grid, &spec.instruments, spec.mc.steps, spec.mc.dt, &draw, &mut out);
            sink += out.iter().sum::<f64>();
        }
        let t = t0.elapsed().as_secs_f64();
        black_box(sink);
        t
    }

    /// Forward and reverse kernel times, and store-mode step 2 over retained
    /// states held one block at a time.
    fn kernels(&self) -> Result<(f64, f64, f64)> {
        let k = self.kernel;
        let c = k.lane_width() as u64;
        let mut ws = k.workspace();
        let mut draw = vec![0.0; k.num_randoms()];
        let mut randoms = vec![0.0; k.num_randoms() * c as usize];
        let mut acc = vec![0.0; k.num_params()];
        let (mut fv, mut rv, mut store) = (Duration::ZERO, Duration::ZERO, Duration::ZERO);
        let mut states = Vec::new();
        let mut start = 0;
        while start < self.source.paths {
            let end = (start + BLOCK_PATHS).min(self.source.paths);
            states.clear();
            let mut p = start;
            while p < end {
                let t0 = Instant::now();
                self.load(p, &mut draw, &mut randoms);
                k.forward_into(&mut ws, &self.param_lanes, &randoms)?;
                let t1 = Instant::now();
                k.reverse_into(&mut ws, &self.seed_lanes)?;
                let t2 = Instant::now();
                fv += t1 - t0;
                rv += t2 - t1;
                states.push(k.snapshot(&ws));
                p += c;
            }
            let t0 = Instant::now();
            for st in &states {
                k.restore(&mut ws, st)?;
                k.reverse_into(&mut ws, &self.seed_lanes)?;
                self.accumulate(&ws, &mut acc);
            }
            store += t0.elapsed();
            start = end;
        }
        black_box(&acc);
        Ok((fv.as_secs_f64(), rv.as_secs_f64(), store.as_secs_f64()))
    }

    fn recompute_step2(&self) -> Result<f64> {
        let k = self.kernel;
        let c = k.lane_width() as u64;
        let mut ws = k.workspace();
        let mut draw = vec![0.0; k.num_randoms()];
        let mut randoms = vec![0.0; k.num_randoms() * c as usize];
        let mut acc = vec![0.0; k.num_params()];
        let t0 = Instant::now();
        let mut p = 0;
        while p < self.source.paths {
            self.load(p, &mut draw, &mut randoms);
            k.forward_into(&mut ws, &self.param_lanes, &randoms)?;
            k.reverse_into(&mut ws, &self.seed_lanes)?;
            self.accumulate(&ws, &mut acc);
            p += c;
        }
        let t = t0.elapsed().as_secs_f64();
        black_box(&acc);
        Ok(t)
    }

    fn gradient(&self) -> Result<f64> {
        let opts = GradientOptions {
            memory_mode: self.memory_mode,
            threads: 1,
            ..Default::default()
        };
        let t0 = Instant::now();
        let rep = gradient_of_g(self.kernel, &self.params, &self.targets, &self.source, &opts)?;
        let t = t0.elapsed().as_secs_f64();
        black_box(rep);
        Ok(t)
    }

    fn sample(&self) -> Result<Sample> {
        let (fv, rv, step2_store) = self.kernels()?;
        Ok(Sample {
            f: self.scalar(),
            fv,
            rv,
            step2_recompute: self.recompute_step2()?,
            step2_store,
            g: self.gradient()?,
        })
    }
}

/// Times the scalar simulation, the batched kernels and a full gradient run
/// of the Heston program in `spec` and derives the cost coefficients.
pub fn measure_coefficients(
    program: &HestonProgram,
    kernel: &Kernel,
    spec: &ModelSpec,
    config: &BenchConfig,
) -> Result<BenchReport> {
    spec.validate()?;
    let c = kernel.lane_width() as u64;
    if kernel.num_params() != program.num_params()
        || kernel.num_randoms() != 2 * spec.mc.steps
        || kernel.num_outputs() != spec.instruments.len()
        || program.steps != spec.mc.steps
    {
        return Err(Error::Config("kernel, program and model spec do not describe the same problem".into()));
    }
    if config.paths == 0 || !config.paths.is_multiple_of(c) {
        return Err(Error::Config(format!(
            "bench paths ({}) must be a positive multiple of the lane width ({c})",
            config.paths
        )));
    }
    if config.reps < MIN_REPS || config.warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "bench needs at least {MIN_REPS} repetitions after {MIN_WARMUP} warm-up run"
        )));
    }
    let params = pack_params(&spec.heston, &spec.grid);
    let lanes = kernel.lane_width();
    let broadcast = |xs: &[f64]| xs.iter().flat_map(|&x| std::iter::repeat_n(x, lanes)).collect::<Vec<_>>();
    let m = kernel.num_outputs();
    let bench = Bench {
        kernel,
        spec,
        source: McConfig {
            paths: config.paths,
            seed: config.seed,
            antithetic: false,
        },
        param_lanes: broadcast(&params),
        params,
        // any non-zero seed exercises the full reverse sweep
        seed_lanes: broadcast(&vec![1.0; m]),
        targets: Targets(vec![0.0; m]),
        memory_mode: config.memory_mode,
    };

    for _ in 0..config.warmup {
        bench.sample()?;
    }
    let samples = (0..config.reps).map(|_| bench.sample()).collect::<Result<Vec<_>>>()?;

    let floor = MIN_TICKS * timer_resolution().as_secs_f64();
    let shortest = samples
        .iter()
        .flat_map(|s| [s.f, s.fv, s.rv, s.step2_recompute, s.step2_store, s.g])
        .fold(f64::INFINITY, f64::min);
    if shortest < floor {
        return Err(Error::TimerResolution(format!(
            "shortest timed interval {shortest:.3e} s is below {floor:.3e} s; increase the number of paths"
        )));
    }

    let n = config.paths as f64;
    let per_path = |f: fn(&Sample) -> f64| median(samples.iter().map(f).collect()) / n;
    let cost_f = per_path(|s| s.f);
    let cost_fv = per_path(|s| s.fv);
    let cost_rv = per_path(|s| s.rv);
    let cost_g = per_path(|s| s.g);
    Ok(BenchReport {
        label: config.label.clone(),
        lane_width: lanes,
        threads: 1,
        steps: spec.mc.steps,
        m,
        num_params: kernel.num_params(),
        paths: config.paths,
        memory_mode: config.memory_mode,
        cost_f,
        cost_fv,
        cost_rv,
        step2_recompute: per_path(|s| s.step2_recompute),
        step2_store: per_path(|s| s.step2_store),
        cost_g,
        kf_over_c: cost_fv / cost_f,
        kr_over_c: cost_rv / cost_f,
        total_ratio: cost_g / cost_f,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

/// Text table (label, `K_F/c`, `K_R/c`, total) and CSV of `reports`, rows
/// sorted by label with ties kept in input order.
pub fn report_table(reports: &[BenchReport]) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::Config("no bench reports to tabulate".into()));
    }
    let mut rows: Vec<BenchRow> = reports.iter().map(BenchReport::row).collect();
    rows.sort_by(|a, b| a.label.cmp(&b.label));

    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut text = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "label", "K_F/c", "K_R/c", "total");
    for r in &rows {
        text.push_str(&format!(
            "{:<width$}  {:>8.3}  {:>8.3}  {:>8.3}\n",
            r.label, r.kf_over_c, r.kr_over_c, r.total_ratio
        ));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
        .map_err(|e| Error::Config(format!("CSV output is not UTF-8: {e}")))?;
    Ok((text, csv))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<BenchRow>, _>>()?)
}
