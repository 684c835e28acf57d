//! Gradients of `G = 1/2 sum_i (E y_i - C_i)^2` over Monte Carlo expectations.
//!
//! [`gradient_of_g`] runs two passes over the same path set:
//!
//! 1. batched forward passes estimate the means `E y_i`;
//! 2. with `lambda_i = E y_i - C_i` held constant, every path runs one seeded
//!    reverse pass and the parameter adjoints are averaged.
//!
//! [`expected_backward_ad`] is a direct, unbatched implementation of the
//! backward recurrence for programs containing an expectation operator. It is
//! slow and meant as an oracle for small problems.
//!
//! Sums over paths are formed in ascending path order inside fixed blocks of
//! [`BLOCK_PATHS`] paths, and block sums are combined in ascending block order.
//! Results therefore do not depend on the thread count or the lane width.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{BatchState, Kernel, MemoryMode, Workspace};
use crate::rng;
use crate::tape::{eval_scalar, partials, OpCode, Tape, TapeNode, VarId};

/// Paths per summation block.
pub const BLOCK_PATHS: u64 = 4096;

/// Supplies the random inputs of each path.
pub trait PathSource: Sync {
    fn paths(&self) -> u64;

    /// Fixed draw dimension, if the source has one.
    fn dim(&self) -> Option<usize>;

    fn fill(&self, path: u64, out: &mut [f64]);

    fn seed(&self) -> Option<u64> {
        None
    }

    /// An independent path set of the same size, if the source can make one.
    fn fresh(&self) -> Option<Box<dyn PathSource>> {
        None
    }
}

/// Monte Carlo path set generated from a counter-based stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub paths: u64,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(paths: u64, seed: u64) -> Self {
        McConfig {
            paths,
            seed,
            antithetic: false,
        }
    }
}

impl PathSource for McConfig {
    fn paths(&self) -> u64 {
        self.paths
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn fill(&self, path: u64, out: &mut [f64]) {
        if self.antithetic {
            rng::fill_path(self.seed, path / 2, out);
            if path % 2 == 1 {
                out.iter_mut().for_each(|z| *z = -*z);
            }
        } else {
            rng::fill_path(self.seed, path, out);
        }
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn fresh(&self) -> Option<Box<dyn PathSource>> {
        Some(Box::new(McConfig {
            seed: self.seed ^ 0x9E37_79B9_7F4A_7C15,
            ..*self
        }))
    }
}

/// Explicit scenarios with uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpace {
    scenarios: Vec<Vec<f64>>,
}

impl SampleSpace {
    pub fn new(scenarios: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = scenarios.first() else {
            return Err(Error::Config("sample space must not be empty".into()));
        };
        let dim = first.len();
        if let Some(bad) = scenarios.iter().find(|s| s.len() != dim) {
            return Err(Error::Length {
                what: "scenario dimension",
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(SampleSpace { scenarios })
    }

    pub fn scenarios(&self) -> &[Vec<f64>] {
        &self.scenarios
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

impl PathSource for SampleSpace {
    fn paths(&self) -> u64 {
        self.scenarios.len() as u64
    }

    fn dim(&self) -> Option<usize> {
        Some(self.scenarios[0].len())
    }

    fn fill(&self, path: u64, out: &mut [f64]) {
        out.copy_from_slice(&self.scenarios[path as usize]);
    }
}

/// Target values `C_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Targets(pub Vec<f64>);

/// Whether step 2 reuses the step-1 paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathReuse {
    #[default]
    Shared,
    /// Independent paths in step 2 (product of two unbiased estimators).
    Fresh,
}

#[derive(Debug, Clone, Copy)]
pub struct GradientOptions {
    pub memory_mode: MemoryMode,
    pub threads: usize,
    pub path_reuse: PathReuse,
    /// Upper bound on retained forward state in store mode.
    pub state_limit_bytes: usize,
}

impl Default for GradientOptions {
    fn default() -> Self {
        GradientOptions {
            memory_mode: MemoryMode::Recompute,
            threads: 1,
            path_reuse: PathReuse::Shared,
            state_limit_bytes: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    #[serde(rename = "G")]
    pub g: f64,
    pub means: Vec<f64>,
    pub lambda: Vec<f64>,
    pub grad: Vec<f64>,
    pub paths: u64,
    pub mode: MemoryMode,
    pub seed: Option<u64>,
}

/// Forward states of every batch, grouped by summation block.
#[derive(Debug, Clone)]
pub struct RetainedStates {
    blocks: Vec<Vec<BatchState>>,
}

impl RetainedStates {
    pub fn bytes(&self) -> usize {
        self.blocks.iter().flatten().map(BatchState::bytes).sum()
    }
}

#[derive(Debug, Clone)]
pub struct MeanEstimate {
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub paths: u64,
    pub states: Option<RetainedStates>,
}

/// `1/2 sum (means - targets)^2`.
pub fn objective(means: &[f64], targets: &[f64]) -> f64 {
    0.5 * means.iter().zip(targets).map(|(m, c)| (m - c) * (m - c)).sum::<f64>()
}

fn check_source(kernel: &Kernel, source: &dyn PathSource) -> Result<()> {
    if source.paths() == 0 {
        return Err(Error::Config("number of paths must be positive".into()));
    }
    if let Some(dim) = source.dim() {
        if dim != kernel.num_randoms() {
            return Err(Error::Length {
                what: "scenario dimension",
                expected: kernel.num_randoms(),
                got: dim,
            });
        }
    }
    Ok(())
}

fn check_params(kernel: &Kernel, params: &[f64]) -> Result<()> {
    if params.len() != kernel.num_params() {
        return Err(Error::Length {
            what: "parameter values",
            expected: kernel.num_params(),
            got: params.len(),
        });
    }
    Ok(())
}

fn run_blocks<T, F>(threads: usize, blocks: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    if threads <= 1 || blocks <= 1 {
        return (0..blocks).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..blocks).into_par_iter().map(f).collect())
}

/// Per-worker buffers for streaming batches of paths through a kernel.
struct BatchRunner<'a> {
    kernel: &'a Kernel,
    source: &'a dyn PathSource,
    ws: Workspace,
    params: Vec<f64>,
    randoms: Vec<f64>,
    draw: Vec<f64>,
}

impl<'a> BatchRunner<'a> {
    fn new(kernel: &'a Kernel, source: &'a dyn PathSource, params: &[f64]) -> Self {
        let c = kernel.lane_width();
        let mut lanes = vec![0.0; params.len() * c];
        for (j, &p) in params.iter().enumerate() {
            lanes[j * c..(j + 1) * c].fill(p);
        }
        BatchRunner {
            kernel,
            source,
            ws: kernel.workspace(),
            params: lanes,
            randoms: vec![0.0; kernel.num_randoms() * c],
            draw: vec![0.0; kernel.num_randoms()],
        }
    }

    /// Loads the draws of paths `start..start + valid`; unused lanes repeat
    /// the first path.
    fn load(&mut self, start: u64, valid: usize) {
        let c = self.kernel.lane_width();
        for lane in 0..c {
            let path = if lane < valid { start + lane as u64 } else { start };
            self.source.fill(path, &mut self.draw);
            for (n, &z) in self.draw.iter().enumerate() {
                self.randoms[n * c + lane] = z;
            }
        }
    }

    fn forward(&mut self, start: u64) -> Result<()> {
        self.kernel
            .forward_into(&mut self.ws, &self.params, &self.randoms)
            .map_err(|e| with_path(e, start))
    }
}

fn with_path(e: Error, start: u64) -> Error {
    match e {
        Error::Domain { lane, .. } => Error::Path {
            path: start + lane.unwrap_or(0) as u64,
            source: Box::new(e),
        },
        other => other,
    }
}

fn block_bounds(block: u64, paths: u64) -> (u64, u64) {
    let start = block * BLOCK_PATHS;
    (start, (start + BLOCK_PATHS).min(paths))
}

struct BlockMoments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    states: Vec<BatchState>,
}

/// Step 1: `E y_i` over the path set, with standard errors. Forward states
/// are retained iff `keep_states`.
pub fn estimate_means(
    kernel: &Kernel,
    params: &[f64],
    source: &dyn PathSource,
    keep_states: bool,
    threads: usize,
) -> Result<MeanEstimate> {
    check_params(kernel, params)?;
    check_source(kernel, source)?;
    let paths = source.paths();
    let m = kernel.num_outputs();
    let c = kernel.lane_width();
    let blocks = paths.div_ceil(BLOCK_PATHS);
    let partials = run_blocks(threads, blocks, |b| {
        let mut runner = BatchRunner::new(kernel, source, params);
        let (start, end) = block_bounds(b, paths);
        let mut acc = BlockMoments {
            sum: vec![0.0; m],
            sum_sq: vec![0.0; m],
            states: Vec::new(),
        };
        let mut p = start;
        while p < end {
            let valid = ((end - p) as usize).min(c);
            runner.load(p, valid);
            runner.forward(p)?;
            for k in 0..m {
                for &y in &kernel.output_lanes(&runner.ws, k)[..valid] {
                    acc.sum[k] += y;
                    acc.sum_sq[k] += y * y;
                }
            }
            if keep_states {
                acc.states.push(kernel.snapshot(&runner.ws));
            }
            p += valid as u64;
        }
        Ok(acc)
    })?;
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut states = Vec::new();
    for block in partials {
        for k in 0..m {
            sum[k] += block.sum[k];
            sum_sq[k] += block.sum_sq[k];
        }
        states.push(block.states);
    }
    let n = paths as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_errors = (0..m)
        .map(|k| {
            if paths < 2 {
                return 0.0;
            }
            let var = (sum_sq[k] - sum[k] * means[k]) / (n - 1.0);
            (var.max(0.0) / n).sqrt()
        })
        .collect();
    Ok(MeanEstimate {
        means,
        std_errors,
        paths,
        states: keep_states.then_some(RetainedStates { blocks: states }),
    })
}

/// Step 2: `(1/n) sum_paths sum_i lambda_i dy_i/dx_j` for every parameter.
fn seeded_parameter_mean(
    kernel: &Kernel,
    params: &[f64],
    lambda: &[f64],
    source: &dyn PathSource,
    states: Option<&RetainedStates>,
    threads: usize,
) -> Result<Vec<f64>> {
    let paths = source.paths();
    let c = kernel.lane_width();
    let mm = kernel.num_params();
    let mut seed = vec![0.0; lambda.len() * c];
    for (k, &l) in lambda.iter().enumerate() {
        seed[k * c..(k + 1) * c].fill(l);
    }
    let blocks = paths.div_ceil(BLOCK_PATHS);
    let partials = run_blocks(threads, blocks, |b| {
        let mut runner = BatchRunner::new(kernel, source, params);
        let (start, end) = block_bounds(b, paths);
        let mut acc = vec![0.0; mm];
        let mut p = start;
        let mut batch = 0;
        while p < end {
            let valid = ((end - p) as usize).min(c);
            match states {
                Some(st) => kernel.restore(&mut runner.ws, &st.blocks[b as usize][batch])?,
                None => {
                    runner.load(p, valid);
                    runner.forward(p)?;
                }
            }
            kernel.reverse_into(&mut runner.ws, &seed)?;
            for (j, a) in acc.iter_mut().enumerate() {
                for &d in &kernel.param_adjoint_lanes(&runner.ws, j)[..valid] {
                    *a += d;
                }
            }
            p += valid as u64;
            batch += 1;
        }
        Ok(acc)
    })?;
    let mut total = vec![0.0; mm];
    for block in partials {
        for (t, b) in total.iter_mut().zip(block) {
            *t += b;
        }
    }
    let n = paths as f64;
    Ok(total.into_iter().map(|s| s / n).collect())
}

/// Gradient of `G = 1/2 sum (E y_i - C_i)^2` with respect to the kernel's
/// parameter inputs. `lambda` is fixed after step 1 and not differentiated.
pub fn gradient_of_g(
    kernel: &Kernel,
    params: &[f64],
    targets: &Targets,
    source: &dyn PathSource,
    opts: &GradientOptions,
) -> Result<GradientReport> {
    if targets.0.len() != kernel.num_outputs() {
        return Err(Error::Length {
            what: "targets",
            expected: kernel.num_outputs(),
            got: targets.0.len(),
        });
    }
    check_params(kernel, params)?;
    check_source(kernel, source)?;
    let store = opts.memory_mode == MemoryMode::Store;
    if store {
        if opts.path_reuse == PathReuse::Fresh {
            return Err(Error::Config(
                "store mode keeps step-1 states and cannot be combined with fresh step-2 paths".into(),
            ));
        }
        let need = kernel.state_bytes(source.paths() as usize);
        if need > opts.state_limit_bytes {
            return Err(Error::Config(format!(
                "store mode needs {need} bytes of forward state, limit is {}",
                opts.state_limit_bytes
            )));
        }
    }
    let est = estimate_means(kernel, params, source, store, opts.threads)?;
    let lambda: Vec<f64> = est.means.iter().zip(&targets.0).map(|(m, c)| m - c).collect();
    let g = 0.5 * lambda.iter().map(|l| l * l).sum::<f64>();
    let grad = match opts.path_reuse {
        PathReuse::Shared => {
            seeded_parameter_mean(kernel, params, &lambda, source, est.states.as_ref(), opts.threads)?
        }
        PathReuse::Fresh => {
            let fresh = source
                .fresh()
                .ok_or_else(|| Error::Config("path source cannot produce fresh paths".into()))?;
            seeded_parameter_mean(kernel, params, &lambda, fresh.as_ref(), None, opts.threads)?
        }
    };
    Ok(GradientReport {
        g,
        means: est.means,
        lambda,
        grad,
        paths: est.paths,
        mode: opts.memory_mode,
        seed: source.seed(),
    })
}

/// Central differences of `G` with common random numbers: every evaluation
/// uses the same path set. Step for parameter `j` is `h * max(1, |x_j|)`.
pub fn finite_diff_objective_gradient(
    kernel: &Kernel,
    params: &[f64],
    targets: &Targets,
    source: &dyn PathSource,
    h: f64,
    threads: usize,
) -> Result<Vec<f64>> {
    let g_at = |x: &[f64]| -> Result<f64> {
        Ok(objective(&estimate_means(kernel, x, source, false, threads)?.means, &targets.0))
    };
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        let step = h * params[j].abs().max(1.0);
        x[j] = params[j] + step;
        let up = g_at(&x)?;
        x[j] = params[j] - step;
        let down = g_at(&x)?;
        x[j] = params[j];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ProgramNode {
    Closed(TapeNode),
    /// Uniform average of the argument over all scenarios.
    Expectation(VarId),
}

/// Scalar program with expectation operators, evaluated over an explicit
/// [`SampleSpace`]. Expectations may appear at several nodes (one per
/// averaged quantity) but may not be nested.
#[derive(Debug, Clone, Default)]
pub struct ExpectationProgram {
    nodes: Vec<ProgramNode>,
    params: Vec<VarId>,
    randoms: Vec<VarId>,
    output: Option<VarId>,
}

impl ExpectationProgram {
    pub fn new() -> Self {
        Self::default()
    }

    fn next_id(&self) -> VarId {
        VarId(self.nodes.len() as u32)
    }

    fn check_args(&self, args: &[VarId]) -> Result<()> {
        let node = self.nodes.len();
        match args.iter().find(|a| a.index() >= node) {
            Some(a) => Err(Error::ArgOutOfRange { node, arg: a.index() }),
            None => Ok(()),
        }
    }

    pub fn param(&mut self, initial: f64) -> VarId {
        let id = self.next_id();
        self.nodes.push(ProgramNode::Closed(TapeNode::new(OpCode::Input, &[], initial)));
        self.params.push(id);
        id
    }

    pub fn random(&mut self) -> VarId {
        let id = self.next_id();
        self.nodes.push(ProgramNode::Closed(TapeNode::new(OpCode::Input, &[], 0.0)));
        self.randoms.push(id);
        id
    }

    pub fn constant(&mut self, value: f64) -> VarId {
        let id = self.next_id();
        self.nodes.push(ProgramNode::Closed(TapeNode::new(OpCode::Const, &[], value)));
        id
    }

    /// Closed-form operation. `literal` is the `pow_int` exponent and is
    /// ignored otherwise.
    pub fn op(&mut self, op: OpCode, args: &[VarId], literal: f64) -> Result<VarId> {
        if matches!(op, OpCode::Input | OpCode::Const) {
            return Err(Error::Composite(format!("use param/random/constant for `{op}`")));
        }
        if args.len() != op.arity() {
            return Err(Error::Arity {
                op: op.name(),
                expected: op.arity(),
                got: args.len(),
            });
        }
        self.check_args(args)?;
        let id = self.next_id();
        self.nodes.push(ProgramNode::Closed(TapeNode::new(op, args, literal)));
        Ok(id)
    }

    pub fn expectation(&mut self, arg: VarId) -> Result<VarId> {
        self.check_args(&[arg])?;
        let id = self.next_id();
        self.nodes.push(ProgramNode::Expectation(arg));
        Ok(id)
    }

    pub fn set_output(&mut self, v: VarId) {
        self.output = Some(v);
    }

    pub fn num_expectations(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, ProgramNode::Expectation(_)))
            .count()
    }

    /// Copies `inner` (parameters, randoms and all nodes) and returns the
    /// program's ids for the inner outputs.
    pub fn append_tape(&mut self, inner: &Tape) -> Vec<VarId> {
        let offset = self.nodes.len() as u32;
        let shift = |v: VarId| VarId(v.0 + offset);
        for node in inner.nodes() {
            let args: Vec<VarId> = node.args().iter().map(|&a| shift(a)).collect();
            self.nodes.push(ProgramNode::Closed(TapeNode::new(node.op, &args, node.literal)));
        }
        self.params.extend(inner.param_inputs().iter().map(|&v| shift(v)));
        self.randoms.extend(inner.random_inputs().iter().map(|&v| shift(v)));
        inner.outputs().iter().map(|&v| shift(v)).collect()
    }

    /// The composite program `1/2 sum_i (E y_i - C_i)^2` around `inner`.
    pub fn for_objective(inner: &Tape, targets: &Targets) -> Result<Self> {
        if targets.0.len() != inner.outputs().len() {
            return Err(Error::Length {
                what: "targets",
                expected: inner.outputs().len(),
                got: targets.0.len(),
            });
        }
        let mut prog = ExpectationProgram::new();
        let ys = prog.append_tape(inner);
        let mut total = None;
        for (&y, &c) in ys.iter().zip(&targets.0) {
            let e = prog.expectation(y)?;
            let target = prog.constant(c);
            let r = prog.op(OpCode::Sub, &[e, target], 0.0)?;
            let sq = prog.op(OpCode::Mul, &[r, r], 0.0)?;
            total = Some(match total {
                None => sq,
                Some(t) => prog.op(OpCode::Add, &[t, sq], 0.0)?,
            });
        }
        let total = total.ok_or(Error::NoOutputs)?;
        let half = prog.constant(0.5);
        let g = prog.op(OpCode::Mul, &[half, total], 0.0)?;
        prog.set_output(g);
        Ok(prog)
    }

    fn validate(&self) -> Result<VarId> {
        let output = self.output.ok_or(Error::NoOutputs)?;
        // after_expectation[i]: node i depends on some expectation output
        let mut after = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            after[i] = match node {
                ProgramNode::Closed(n) => n.args().iter().any(|a| after[a.index()]),
                ProgramNode::Expectation(arg) => {
                    if after[arg.index()] {
                        return Err(Error::Composite(format!(
                            "nested expectation at node {i}: only one expectation stage is supported"
                        )));
                    }
                    true
                }
            };
        }
        Ok(output)
    }
}

/// Output and parameter gradient of an [`ExpectationProgram`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedAdjoints {
    /// `E y`.
    pub value: f64,
    /// `E dy/dx_j` for every parameter.
    pub params: Vec<f64>,
}

/// Backward recurrence for a program containing expectation operators:
/// adjoints start at 1 on the output and 0 elsewhere, every scenario carries
/// its own adjoint vector, and at an expectation node the argument receives
/// the scenario-average of the node's adjoint. Returns `E` of the parameter
/// adjoints.
pub fn expected_backward_ad(
    program: &ExpectationProgram,
    params: &[f64],
    space: &SampleSpace,
) -> Result<ExpectedAdjoints> {
    let output = program.validate()?;
    if params.len() != program.params.len() {
        return Err(Error::Length {
            what: "parameter values",
            expected: program.params.len(),
            got: params.len(),
        });
    }
    if space.scenarios[0].len() != program.randoms.len() {
        return Err(Error::Length {
            what: "scenario dimension",
            expected: program.randoms.len(),
            got: space.scenarios[0].len(),
        });
    }
    let n = program.nodes.len();
    let s_count = space.len();
    let weight = 1.0 / s_count as f64;
    let mean = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() * weight;

    // values[s][i]
    let mut values: Vec<Vec<f64>> = vec![vec![0.0; n]; s_count];
    for (s, row) in values.iter_mut().enumerate() {
        for (i, node) in program.nodes.iter().enumerate() {
            if let ProgramNode::Closed(t) = node {
                row[i] = t.literal;
            }
        }
        for (&v, &x) in program.params.iter().zip(params) {
            row[v.index()] = x;
        }
        for (&v, &x) in program.randoms.iter().zip(&space.scenarios[s]) {
            row[v.index()] = x;
        }
    }
    for (i, node) in program.nodes.iter().enumerate() {
        match node {
            ProgramNode::Closed(t) => {
                if matches!(t.op, OpCode::Input | OpCode::Const) {
                    continue;
                }
                for (s, row) in values.iter_mut().enumerate() {
                    row[i] = eval_scalar(t, row).map_err(|kind| Error::Path {
                        path: s as u64,
                        source: Box::new(Error::Domain { node: i, lane: None, kind }),
                    })?;
                }
            }
            ProgramNode::Expectation(arg) => {
                let e = mean(&mut values.iter().map(|row| row[arg.index()]));
                values.iter_mut().for_each(|row| row[i] = e);
            }
        }
    }

    let mut adj: Vec<Vec<f64>> = vec![vec![0.0; n]; s_count];
    adj.iter_mut().for_each(|row| row[output.index()] = 1.0);
    for m in (0..n).rev() {
        match &program.nodes[m] {
            ProgramNode::Closed(t) => {
                for (row, vals) in adj.iter_mut().zip(&values) {
                    let d = partials(t, vals, vals[m]);
                    let dm = row[m];
                    for (k, a) in t.args().iter().enumerate() {
                        row[a.index()] += dm * d[k];
                    }
                }
            }
            ProgramNode::Expectation(arg) => {
                let e = mean(&mut adj.iter().map(|row| row[m]));
                adj.iter_mut().for_each(|row| row[arg.index()] += e);
            }
        }
    }
    Ok(ExpectedAdjoints {
        value: mean(&mut values.iter().map(|row| row[output.index()])),
        params: program
            .params
            .iter()
            .map(|p| mean(&mut adj.iter().map(|row| row[p.index()])))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::InputKind;

    fn linear_tape() -> Tape {
        // y0 = p * w + q, y1 = q^2
        let mut t = Tape::new();
        let p = t.new_input(InputKind::Parameter, 1.0);
        let q = t.new_input(InputKind::Parameter, 2.0);
        let w = t.new_input(InputKind::Random, 0.0);
        let a = t.mul(p, w);
        let y0 = t.add(a, q);
        let y1 = t.mul(q, q);
        t.mark_output(y0);
        t.mark_output(y1);
        t
    }

    #[test]
    fn deterministic_kernel_means_equal_outputs() {
        let mut t = Tape::new();
        let p = t.new_input(InputKind::Parameter, 0.5);
        let e = t.exp(p);
        t.mark_output(e);
        let k = Kernel::freeze(&t, 4).unwrap();
        for paths in [1, 3, 17] {
            let est = estimate_means(&k, &[0.5], &McConfig::new(paths, 1), false, 1).unwrap();
            assert!((est.means[0] - 0.5f64.exp()).abs() <= 1e-15 * 0.5f64.exp());
        }
    }

    #[test]
    fn single_draw_mean_is_small() {
        let mut t = Tape::new();
        let w = t.new_input(InputKind::Random, 0.0);
        t.mark_output(w);
        let k = Kernel::freeze(&t, 8).unwrap();
        let est = estimate_means(&k, &[], &McConfig::new(1 << 20, 11), false, 1).unwrap();
        // 3 standard errors of a unit-variance mean over 2^20 paths
        assert!(est.means[0].abs() <= 3e-3, "{}", est.means[0]);
        assert!((est.std_errors[0] - 1.0 / 1024.0).abs() < 1e-5);
    }

    #[test]
    fn antithetic_pairs_cancel() {
        let mut t = Tape::new();
        let w = t.new_input(InputKind::Random, 0.0);
        t.mark_output(w);
        let k = Kernel::freeze(&t, 4).unwrap();
        let mc = McConfig { paths: 1000, seed: 5, antithetic: true };
        let est = estimate_means(&k, &[], &mc, false, 1).unwrap();
        assert!(est.means[0].abs() < 1e-15);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let t = linear_tape();
        let k = Kernel::freeze(&t, 4).unwrap();
        let mc = McConfig::new(50, 9);
        let means = estimate_means(&k, &[1.3, 0.7], &mc, false, 1).unwrap().means;
        let rep = gradient_of_g(&k, &[1.3, 0.7], &Targets(means), &mc, &GradientOptions::default()).unwrap();
        assert_eq!(rep.g, 0.0);
        assert!(rep.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn deterministic_kernel_matches_finite_differences() {
        let mut t = Tape::new();
        let a = t.new_input(InputKind::Parameter, 0.0);
        let b = t.new_input(InputKind::Parameter, 0.0);
        let s = t.sin(a);
        let y0 = t.mul(s, b);
        let e = t.exp(b);
        let y1 = t.add(e, a);
        t.mark_output(y0);
        t.mark_output(y1);
        let k = Kernel::freeze(&t, 2).unwrap();
        let x = [0.4, -0.3];
        let targets = Targets(vec![0.1, 2.0]);
        let mc = McConfig::new(3, 0);
        let rep = gradient_of_g(&k, &x, &targets, &mc, &GradientOptions::default()).unwrap();
        let fd = finite_diff_objective_gradient(&k, &x, &targets, &mc, 1e-5, 1).unwrap();
        for (a, f) in rep.grad.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-6 * a.abs().max(1e-8), "{a} vs {f}");
        }
        assert_eq!(rep.g, 0.5 * rep.lambda.iter().map(|l| l * l).sum::<f64>());
    }

    #[test]
    fn store_mode_matches_recompute() {
        let t = linear_tape();
        let k = Kernel::freeze(&t, 4).unwrap();
        let mc = McConfig::new(9001, 3);
        let targets = Targets(vec![0.5, 1.0]);
        let rec = gradient_of_g(&k, &[1.1, 0.9], &targets, &mc, &GradientOptions::default()).unwrap();
        let opts = GradientOptions { memory_mode: MemoryMode::Store, ..Default::default() };
        let sto = gradient_of_g(&k, &[1.1, 0.9], &targets, &mc, &opts).unwrap();
        assert_eq!(rec.grad, sto.grad);
        assert_eq!(rec.means, sto.means);
        assert_eq!(sto.mode, MemoryMode::Store);
        let tight = GradientOptions { state_limit_bytes: 1024, ..opts };
        assert!(gradient_of_g(&k, &[1.1, 0.9], &targets, &mc, &tight).is_err());
    }

    #[test]
    fn threads_and_lane_width_do_not_change_results() {
        let t = linear_tape();
        let mc = McConfig::new(10_000, 8);
        let targets = Targets(vec![0.5, 1.0]);
        let reference = gradient_of_g(
            &Kernel::freeze(&t, 1).unwrap(),
            &[1.1, 0.9],
            &targets,
            &mc,
            &GradientOptions::default(),
        )
        .unwrap();
        for (lanes, threads) in [(4, 1), (8, 3), (3, 2)] {
            let k = Kernel::freeze(&t, lanes).unwrap();
            let opts = GradientOptions { threads, ..Default::default() };
            let rep = gradient_of_g(&k, &[1.1, 0.9], &targets, &mc, &opts).unwrap();
            assert_eq!(rep, reference, "lanes {lanes} threads {threads}");
        }
    }

    #[test]
    fn fresh_paths_option() {
        let t = linear_tape();
        let k = Kernel::freeze(&t, 4).unwrap();
        let mc = McConfig::new(100, 8);
        let opts = GradientOptions { path_reuse: PathReuse::Fresh, ..Default::default() };
        let fresh = gradient_of_g(&k, &[1.0, 1.0], &Targets(vec![0.0, 0.0]), &mc, &opts).unwrap();
        let shared = gradient_of_g(&k, &[1.0, 1.0], &Targets(vec![0.0, 0.0]), &mc, &GradientOptions::default()).unwrap();
        assert_eq!(fresh.means, shared.means);
        assert_ne!(fresh.grad[0], shared.grad[0]);
        // q enters deterministically
        assert_eq!(fresh.grad[1], shared.grad[1]);
        let space = SampleSpace::new(vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(gradient_of_g(&k, &[1.0, 1.0], &Targets(vec![0.0, 0.0]), &space, &opts).is_err());
        let store_fresh = GradientOptions { memory_mode: MemoryMode::Store, ..opts };
        assert!(gradient_of_g(&k, &[1.0, 1.0], &Targets(vec![0.0, 0.0]), &mc, &store_fresh).is_err());
    }

    #[test]
    fn errors_report_path_index() {
        let mut t = Tape::new();
        let w = t.new_input(InputKind::Random, 0.0);
        let l = t.log(w);
        t.mark_output(l);
        let k = Kernel::freeze(&t, 4).unwrap();
        let space = SampleSpace::new(vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0], vec![-1.0]]).unwrap();
        match estimate_means(&k, &[], &space, false, 1) {
            Err(Error::Path { path: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn input_validation() {
        let t = linear_tape();
        let k = Kernel::freeze(&t, 4).unwrap();
        let mc = McConfig::new(10, 1);
        assert!(gradient_of_g(&k, &[1.0], &Targets(vec![0.0, 0.0]), &mc, &GradientOptions::default()).is_err());
        assert!(gradient_of_g(&k, &[1.0, 1.0], &Targets(vec![0.0]), &mc, &GradientOptions::default()).is_err());
        assert!(estimate_means(&k, &[1.0, 1.0], &McConfig::new(0, 1), false, 1).is_err());
        assert!(SampleSpace::new(vec![]).is_err());
        assert!(SampleSpace::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let wrong_dim = SampleSpace::new(vec![vec![1.0, 2.0]]).unwrap();
        assert!(estimate_means(&k, &[1.0, 1.0], &wrong_dim, false, 1).is_err());
    }

    fn squared_expectation(ws: &[f64]) -> (ExpectationProgram, SampleSpace) {
        // y = (E[x * w])^2
        let mut prog = ExpectationProgram::new();
        let x = prog.param(1.0);
        let w = prog.random();
        let xw = prog.op(OpCode::Mul, &[x, w], 0.0).unwrap();
        let e = prog.expectation(xw).unwrap();
        let y = prog.op(OpCode::Mul, &[e, e], 0.0).unwrap();
        prog.set_output(y);
        let space = SampleSpace::new(ws.iter().map(|&w| vec![w]).collect()).unwrap();
        (prog, space)
    }

    #[test]
    fn expected_backward_symmetric_draws() {
        let (prog, space) = squared_expectation(&[1.0, -1.0]);
        for x in [-2.0, 0.3, 5.0] {
            let r = expected_backward_ad(&prog, &[x], &space).unwrap();
            assert_eq!(r.params, vec![0.0]);
        }
    }

    #[test]
    fn expected_backward_two_scenarios() {
        // E[xw] = 2x, y = 4x^2, dy/dx = 8 at x = 1
        let (prog, space) = squared_expectation(&[1.0, 3.0]);
        let r = expected_backward_ad(&prog, &[1.0], &space).unwrap();
        assert_eq!(r.value, 4.0);
        assert_eq!(r.params, vec![8.0]);
    }

    #[test]
    fn expected_backward_without_expectation_is_reverse_sweep() {
        let mut t = Tape::new();
        let p = t.new_input(InputKind::Parameter, 0.0);
        let w = t.new_input(InputKind::Random, 0.0);
        let a = t.mul(p, w);
        let s = t.sin(a);
        let y = t.mul(s, p);
        t.mark_output(y);
        let mut prog = ExpectationProgram::new();
        let outs = prog.append_tape(&t);
        prog.set_output(outs[0]);
        let space = SampleSpace::new(vec![vec![0.7]]).unwrap();
        let r = expected_backward_ad(&prog, &[1.3], &space).unwrap();
        let e = t.forward_eval(&[1.3], &[0.7]).unwrap();
        let adj = t.reverse_seeded(&e.state, &[1.0]).unwrap();
        assert_eq!(r.params, adj.params);
        assert_eq!(r.value, e.outputs[0]);
    }

    #[test]
    fn nested_expectations_rejected() {
        let mut prog = ExpectationProgram::new();
        let x = prog.param(1.0);
        let w = prog.random();
        let xw = prog.op(OpCode::Mul, &[x, w], 0.0).unwrap();
        let e1 = prog.expectation(xw).unwrap();
        let z = prog.op(OpCode::Mul, &[e1, w], 0.0).unwrap();
        let e2 = prog.expectation(z).unwrap();
        prog.set_output(e2);
        let space = SampleSpace::new(vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(expected_backward_ad(&prog, &[1.0], &space), Err(Error::Composite(_))));
        assert_eq!(prog.num_expectations(), 2);
    }

    #[test]
    fn objective_program_matches_two_pass_gradient() {
        let t = linear_tape();
        let space = SampleSpace::new((0..8).map(|i| vec![0.25 * i as f64 - 1.0]).collect()).unwrap();
        let targets = Targets(vec![0.3, 2.0]);
        let prog = ExpectationProgram::for_objective(&t, &targets).unwrap();
        let oracle = expected_backward_ad(&prog, &[1.2, 0.8], &space).unwrap();
        let k = Kernel::freeze(&t, 4).unwrap();
        let rep = gradient_of_g(&k, &[1.2, 0.8], &targets, &space, &GradientOptions::default()).unwrap();
        assert!((oracle.value - rep.g).abs() <= 1e-14 * rep.g.abs());
        for (a, b) in rep.grad.iter().zip(&oracle.params) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
        }
        assert_eq!(rep.seed, None);
    }

    #[test]
    fn report_json_shape() {
        let rep = GradientReport {
            g: 0.5,
            means: vec![1.0],
            lambda: vec![1.0],
            grad: vec![2.0],
            paths: 10,
            mode: MemoryMode::Recompute,
            seed: Some(7),
        };
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for key in ["G", "means", "lambda", "grad", "paths", "mode", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["mode"], "recompute");
        let back: GradientReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, rep);
    }
}
