//! Frozen multi-lane replay of a [`Tape`].
//!
//! A [`Kernel`] executes the recorded program on `c` independent input sets at
//! once. Values are laid out structure-of-arrays: every tape node owns one
//! contiguous block of `c` lanes, so each interpreted instruction is a short
//! loop over lanes that the compiler vectorizes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DomainKind, Error, Result};
use crate::tape::{OpCode, Tape};

/// How the reverse pass obtains the forward values it needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    /// Re-run the forward pass before each reverse pass.
    #[default]
    Recompute,
    /// Keep the forward values of every batch from the first pass.
    Store,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::Recompute => "recompute",
            MemoryMode::Store => "store",
        })
    }
}

impl FromStr for MemoryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "recompute" => Ok(MemoryMode::Recompute),
            "store" => Ok(MemoryMode::Store),
            other => Err(format!("unknown memory mode `{other}` (expected recompute|store)")),
        }
    }
}

/// `vars x lanes` block of values; lane values of one variable are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneBatch {
    lanes: usize,
    data: Vec<f64>,
}

impl LaneBatch {
    pub fn zeros(vars: usize, lanes: usize) -> Self {
        assert!(lanes > 0, "lane count must be positive");
        LaneBatch {
            lanes,
            data: vec![0.0; vars * lanes],
        }
    }

    /// Every lane carries the same `values`.
    pub fn broadcast(values: &[f64], lanes: usize) -> Self {
        let mut b = Self::zeros(values.len(), lanes);
        for (v, &x) in values.iter().enumerate() {
            b.block_mut(v).fill(x);
        }
        b
    }

    /// Builds a batch from one input vector per lane.
    pub fn from_lanes(per_lane: &[Vec<f64>]) -> Result<Self> {
        let lanes = per_lane.len();
        if lanes == 0 {
            return Err(Error::Config("a lane batch needs at least one lane".into()));
        }
        let vars = per_lane[0].len();
        let mut b = Self::zeros(vars, lanes);
        for (l, vals) in per_lane.iter().enumerate() {
            if vals.len() != vars {
                return Err(Error::Length {
                    what: "lane values",
                    expected: vars,
                    got: vals.len(),
                });
            }
            for (v, &x) in vals.iter().enumerate() {
                b.data[v * lanes + l] = x;
            }
        }
        Ok(b)
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn vars(&self) -> usize {
        self.data.len() / self.lanes
    }

    pub fn block(&self, var: usize) -> &[f64] {
        &self.data[var * self.lanes..(var + 1) * self.lanes]
    }

    pub fn block_mut(&mut self, var: usize) -> &mut [f64] {
        &mut self.data[var * self.lanes..(var + 1) * self.lanes]
    }

    pub fn get(&self, var: usize, lane: usize) -> f64 {
        self.data[var * self.lanes + lane]
    }

    /// Values of all variables in one lane.
    pub fn lane(&self, lane: usize) -> Vec<f64> {
        (0..self.vars()).map(|v| self.get(v, lane)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Forward values of one batch, kept for a later reverse pass.
#[derive(Debug, Clone)]
pub struct BatchState {
    kernel_id: u64,
    lanes: usize,
    values: Vec<f64>,
}

impl BatchState {
    pub fn bytes(&self) -> usize {
        self.values.len() * std::mem::size_of::<f64>()
    }
}

/// Where [`Kernel::reverse_batch`] takes its forward values from.
#[derive(Debug, Clone, Copy)]
pub enum ReverseSource<'a> {
    State(&'a BatchState),
    /// Recompute mode: run the forward pass on these inputs first.
    Inputs {
        params: &'a LaneBatch,
        randoms: &'a LaneBatch,
    },
}

#[derive(Debug, Clone, Copy)]
struct Instr {
    op: OpCode,
    args: [u32; 4],
    literal: f64,
}

/// Scratch buffers for one batch in flight. Reuse across batches to avoid
/// reallocating `nodes x lanes` values each time.
#[derive(Debug, Clone)]
pub struct Workspace {
    kernel_id: u64,
    values: Vec<f64>,
    adjoints: Vec<f64>,
}

/// Immutable multi-lane program compiled from a tape.
#[derive(Debug, Clone)]
pub struct Kernel {
    id: u64,
    lanes: usize,
    instrs: Vec<Instr>,
    params: Vec<u32>,
    randoms: Vec<u32>,
    outputs: Vec<u32>,
}

static NEXT_KERNEL_ID: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

impl Kernel {
    pub fn freeze(tape: &Tape, lane_width: usize) -> Result<Kernel> {
        if tape.outputs().is_empty() {
            return Err(Error::NoOutputs);
        }
        if lane_width == 0 {
            return Err(Error::Config("lane width must be positive".into()));
        }
        let instrs = tape
            .nodes()
            .iter()
            .map(|n| {
                let mut args = [0u32; 4];
                for (slot, a) in args.iter_mut().zip(n.args()) {
                    *slot = a.0;
                }
                Instr {
                    op: n.op,
                    args,
                    literal: n.literal,
                }
            })
            .collect();
        let ids = |v: &[crate::tape::VarId]| v.iter().map(|x| x.0).collect::<Vec<_>>();
        Ok(Kernel {
            id: NEXT_KERNEL_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            lanes: lane_width,
            instrs,
            params: ids(tape.param_inputs()),
            randoms: ids(tape.random_inputs()),
            outputs: ids(tape.outputs()),
        })
    }

    pub fn lane_width(&self) -> usize {
        self.lanes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_randoms(&self) -> usize {
        self.randoms.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.instrs.len()
    }

    /// Bytes of retained forward state needed to keep `paths` paths in
    /// store-forward mode.
    pub fn state_bytes(&self, paths: usize) -> usize {
        let batches = paths.div_ceil(self.lanes);
        batches * self.instrs.len() * self.lanes * std::mem::size_of::<f64>()
    }

    pub fn workspace(&self) -> Workspace {
        let c = self.lanes;
        let mut values = vec![0.0; self.instrs.len() * c];
        for (i, ins) in self.instrs.iter().enumerate() {
            if matches!(ins.op, OpCode::Const | OpCode::Input) {
                values[i * c..(i + 1) * c].fill(ins.literal);
            }
        }
        Workspace {
            kernel_id: self.id,
            values,
            adjoints: vec![0.0; self.instrs.len() * c],
        }
    }

    fn check_batch(&self, what: &'static str, b: &LaneBatch, vars: usize) -> Result<()> {
        if b.lanes() != self.lanes {
            return Err(Error::Length {
                what: "lanes",
                expected: self.lanes,
                got: b.lanes(),
            });
        }
        if b.vars() != vars {
            return Err(Error::Length {
                what,
                expected: vars,
                got: b.vars(),
            });
        }
        Ok(())
    }

    fn check_workspace(&self, ws: &Workspace) -> Result<()> {
        if ws.kernel_id != self.id {
            return Err(Error::StaleState);
        }
        Ok(())
    }

    /// Forward pass into `ws`. `params` and `randoms` are `vars x lanes`
    /// slices in [`LaneBatch`] layout.
    pub fn forward_into(&self, ws: &mut Workspace, params: &[f64], randoms: &[f64]) -> Result<()> {
        self.check_workspace(ws)?;
        let c = self.lanes;
        if params.len() != self.params.len() * c {
            return Err(Error::Length {
                what: "parameter lanes",
                expected: self.params.len() * c,
                got: params.len(),
            });
        }
        if randoms.len() != self.randoms.len() * c {
            return Err(Error::Length {
                what: "random lanes",
                expected: self.randoms.len() * c,
                got: randoms.len(),
            });
        }
        let vals = &mut ws.values;
        for (k, &node) in self.params.iter().enumerate() {
            let n = node as usize;
            vals[n * c..(n + 1) * c].copy_from_slice(&params[k * c..(k + 1) * c]);
        }
        for (k, &node) in self.randoms.iter().enumerate() {
            let n = node as usize;
            vals[n * c..(n + 1) * c].copy_from_slice(&randoms[k * c..(k + 1) * c]);
        }
        match c {
            1 => forward_lanes(&self.instrs, vals, 1),
            2 => forward_lanes(&self.instrs, vals, 2),
            4 => forward_lanes(&self.instrs, vals, 4),
            8 => forward_lanes(&self.instrs, vals, 8),
            16 => forward_lanes(&self.instrs, vals, 16),
            _ => forward_lanes(&self.instrs, vals, c),
        }
    }

    /// Reverse pass seeded with `lambda` (`outputs x lanes`), using the
    /// forward values currently held by `ws`.
    pub fn reverse_into(&self, ws: &mut Workspace, lambda: &[f64]) -> Result<()> {
        self.check_workspace(ws)?;
        let c = self.lanes;
        if lambda.len() != self.outputs.len() * c {
            return Err(Error::Length {
                what: "seed lanes",
                expected: self.outputs.len() * c,
                got: lambda.len(),
            });
        }
        let Workspace { values, adjoints, .. } = ws;
        adjoints.fill(0.0);
        for (k, &node) in self.outputs.iter().enumerate() {
            let n = node as usize;
            for (a, &l) in adjoints[n * c..(n + 1) * c].iter_mut().zip(&lambda[k * c..(k + 1) * c]) {
                *a += l;
            }
        }
        match c {
            1 => reverse_lanes(&self.instrs, values, adjoints, 1),
            2 => reverse_lanes(&self.instrs, values, adjoints, 2),
            4 => reverse_lanes(&self.instrs, values, adjoints, 4),
            8 => reverse_lanes(&self.instrs, values, adjoints, 8),
            16 => reverse_lanes(&self.instrs, values, adjoints, 16),
            _ => reverse_lanes(&self.instrs, values, adjoints, c),
        }
        Ok(())
    }

    /// Lanes of output `k` after [`Kernel::forward_into`].
    pub fn output_lanes<'w>(&self, ws: &'w Workspace, k: usize) -> &'w [f64] {
        let n = self.outputs[k] as usize;
        &ws.values[n * self.lanes..(n + 1) * self.lanes]
    }

    /// Lanes of the adjoint of parameter `j` after [`Kernel::reverse_into`].
    pub fn param_adjoint_lanes<'w>(&self, ws: &'w Workspace, j: usize) -> &'w [f64] {
        let n = self.params[j] as usize;
        &ws.adjoints[n * self.lanes..(n + 1) * self.lanes]
    }

    pub fn random_adjoint_lanes<'w>(&self, ws: &'w Workspace, j: usize) -> &'w [f64] {
        let n = self.randoms[j] as usize;
        &ws.adjoints[n * self.lanes..(n + 1) * self.lanes]
    }

    /// Captures the forward values held by `ws`.
    pub fn snapshot(&self, ws: &Workspace) -> BatchState {
        BatchState {
            kernel_id: self.id,
            lanes: self.lanes,
            values: ws.values.clone(),
        }
    }

    /// Restores a retained forward state into `ws`.
    pub fn restore(&self, ws: &mut Workspace, state: &BatchState) -> Result<()> {
        self.check_workspace(ws)?;
        if state.kernel_id != self.id || state.lanes != self.lanes || state.values.len() != ws.values.len() {
            return Err(Error::StaleState);
        }
        ws.values.copy_from_slice(&state.values);
        Ok(())
    }

    fn collect_outputs(&self, ws: &Workspace) -> LaneBatch {
        let mut out = LaneBatch::zeros(self.outputs.len(), self.lanes);
        for k in 0..self.outputs.len() {
            out.block_mut(k).copy_from_slice(self.output_lanes(ws, k));
        }
        out
    }

    /// Batched forward pass over `c` lanes. The forward state is returned
    /// iff `keep_state`.
    pub fn forward_batch(
        &self,
        params: &LaneBatch,
        randoms: &LaneBatch,
        keep_state: bool,
    ) -> Result<(LaneBatch, Option<BatchState>)> {
        self.check_batch("parameter lanes", params, self.params.len())?;
        self.check_batch("random lanes", randoms, self.randoms.len())?;
        let mut ws = self.workspace();
        self.forward_into(&mut ws, params.as_slice(), randoms.as_slice())?;
        let out = self.collect_outputs(&ws);
        let state = keep_state.then_some(BatchState {
            kernel_id: self.id,
            lanes: self.lanes,
            values: ws.values,
        });
        Ok((out, state))
    }

    /// Batched seeded reverse pass. Returns `(M + N) x lanes` adjoints,
    /// parameters first.
    pub fn reverse_batch(&self, source: ReverseSource<'_>, lambda: &LaneBatch) -> Result<LaneBatch> {
        self.check_batch("seed lanes", lambda, self.outputs.len())?;
        let mut ws = self.workspace();
        match source {
            ReverseSource::State(state) => self.restore(&mut ws, state)?,
            ReverseSource::Inputs { params, randoms } => {
                self.check_batch("parameter lanes", params, self.params.len())?;
                self.check_batch("random lanes", randoms, self.randoms.len())?;
                self.forward_into(&mut ws, params.as_slice(), randoms.as_slice())?;
            }
        }
        self.reverse_into(&mut ws, lambda.as_slice())?;
        let (m, n) = (self.params.len(), self.randoms.len());
        let mut out = LaneBatch::zeros(m + n, self.lanes);
        for j in 0..m {
            out.block_mut(j).copy_from_slice(self.param_adjoint_lanes(&ws, j));
        }
        for j in 0..n {
            out.block_mut(m + j).copy_from_slice(self.random_adjoint_lanes(&ws, j));
        }
        Ok(out)
    }
}

#[inline(always)]
fn domain_check(
    node: usize,
    block: &[f64],
    kind: DomainKind,
    bad: impl Fn(f64) -> bool,
) -> Result<()> {
    match block.iter().position(|&x| bad(x)) {
        None => Ok(()),
        Some(lane) => Err(Error::Domain {
            node,
            lane: Some(lane),
            kind,
        }),
    }
}

#[inline(always)]
fn map1(out: &mut [f64], a: &[f64], f: impl Fn(f64) -> f64) {
    for (o, &x) in out.iter_mut().zip(a) {
        *o = f(x);
    }
}

#[inline(always)]
fn map2(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = f(x, y);
    }
}

#[inline(always)]
fn forward_lanes(instrs: &[Instr], vals: &mut [f64], c: usize) -> Result<()> {
    for (i, ins) in instrs.iter().enumerate() {
        let (head, tail) = vals.split_at_mut(i * c);
        let out = &mut tail[..c];
        let blk = |k: usize| {
            let a = ins.args[k] as usize * c;
            &head[a..a + c]
        };
        match ins.op {
            OpCode::Const | OpCode::Input => {}
            OpCode::Add => map2(out, blk(0), blk(1), |x, y| x + y),
            OpCode::Sub => map2(out, blk(0), blk(1), |x, y| x - y),
            OpCode::Mul => map2(out, blk(0), blk(1), |x, y| x * y),
            OpCode::Div => {
                domain_check(i, blk(1), DomainKind::DivisionByZero, |d| d == 0.0)?;
                map2(out, blk(0), blk(1), |x, y| x / y);
            }
            OpCode::Neg => map1(out, blk(0), |x| -x),
            OpCode::Exp => map1(out, blk(0), f64::exp),
            OpCode::Log => {
                domain_check(i, blk(0), DomainKind::LogNonPositive, |x| !(x > 0.0))?;
                map1(out, blk(0), f64::ln);
            }
            OpCode::Sqrt => {
                domain_check(i, blk(0), DomainKind::SqrtNegative, |x| x < 0.0)?;
                map1(out, blk(0), f64::sqrt);
            }
            OpCode::Sin => map1(out, blk(0), f64::sin),
            OpCode::Cos => map1(out, blk(0), f64::cos),
            OpCode::PowInt => {
                let n = ins.literal as i32;
                if n < 0 {
                    domain_check(i, blk(0), DomainKind::DivisionByZero, |x| x == 0.0)?;
                }
                map1(out, blk(0), |x| x.powi(n));
            }
            OpCode::MaxZero => map1(out, blk(0), |x| x.max(0.0)),
            OpCode::SelectGe => {
                let (a, b, x, y) = (blk(0), blk(1), blk(2), blk(3));
                for l in 0..c {
                    out[l] = if a[l] >= b[l] { x[l] } else { y[l] };
                }
            }
        }
    }
    Ok(())
}

#[inline(always)]
fn accumulate(adj: &mut [f64], arg: u32, c: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    let a = arg as usize * c;
    for (l, (d, &gl)) in adj[a..a + c].iter_mut().zip(g).enumerate() {
        *d += f(l, gl);
    }
}

#[inline(always)]
fn reverse_lanes(instrs: &[Instr], vals: &[f64], adj: &mut [f64], c: usize) {
    for i in (0..instrs.len()).rev() {
        let ins = &instrs[i];
        if matches!(ins.op, OpCode::Const | OpCode::Input) {
            continue;
        }
        let (head, tail) = adj.split_at_mut(i * c);
        let g = &tail[..c];
        let val = |k: usize| {
            let a = ins.args[k] as usize * c;
            &vals[a..a + c]
        };
        let out = &vals[i * c..(i + 1) * c];
        let [a0, a1, a2, a3] = ins.args;
        match ins.op {
            OpCode::Const | OpCode::Input => {}
            OpCode::Add => {
                accumulate(head, a0, c, g, |_, g| g);
                accumulate(head, a1, c, g, |_, g| g);
            }
            OpCode::Sub => {
                accumulate(head, a0, c, g, |_, g| g);
                accumulate(head, a1, c, g, |_, g| -g);
            }
            OpCode::Mul => {
                let (x, y) = (val(0), val(1));
                accumulate(head, a0, c, g, |l, g| g * y[l]);
                accumulate(head, a1, c, g, |l, g| g * x[l]);
            }
            OpCode::Div => {
                let y = val(1);
                accumulate(head, a0, c, g, |l, g| g / y[l]);
                accumulate(head, a1, c, g, |l, g| -(g * out[l] / y[l]));
            }
            OpCode::Neg => accumulate(head, a0, c, g, |_, g| -g),
            OpCode::Exp => accumulate(head, a0, c, g, |l, g| g * out[l]),
            OpCode::Log => {
                let x = val(0);
                accumulate(head, a0, c, g, |l, g| g / x[l]);
            }
            OpCode::Sqrt => accumulate(head, a0, c, g, |l, g| g * 0.5 / out[l]),
            OpCode::Sin => {
                let x = val(0);
                accumulate(head, a0, c, g, |l, g| g * x[l].cos());
            }
            OpCode::Cos => {
                let x = val(0);
                accumulate(head, a0, c, g, |l, g| -(g * x[l].sin()));
            }
            OpCode::PowInt => {
                let n = ins.literal as i32;
                if n != 0 {
                    let x = val(0);
                    accumulate(head, a0, c, g, |l, g| g * ins.literal * x[l].powi(n - 1));
                }
            }
            OpCode::MaxZero => {
                let x = val(0);
                accumulate(head, a0, c, g, |l, g| if x[l] > 0.0 { g } else { 0.0 });
            }
            OpCode::SelectGe => {
                let (a, b) = (val(0), val(1));
                accumulate(head, a2, c, g, |l, g| if a[l] >= b[l] { g } else { 0.0 });
                accumulate(head, a3, c, g, |l, g| if a[l] >= b[l] { 0.0 } else { g });
            }
        }
    }
}
