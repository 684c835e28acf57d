//! Operation tape: records a scalar program `F: R^{M+N} -> R^m`, replays it
//! forward and runs seeded reverse sweeps.
//!
//! Inputs are split into *parameters* (the `M` differentiation targets) and
//! *random* inputs (the `N` per-path draws). A reverse sweep seeded with a
//! weight vector `lambda` over the outputs returns `sum_k lambda_k dy_k/dx_i`
//! for every input in one backward pass.
//!
//! ```
//! use mc_adjoint::tape::{InputKind, Tape};
//!
//! let mut tape = Tape::new();
//! let x1 = tape.new_input(InputKind::Parameter, 2.0);
//! let x2 = tape.new_input(InputKind::Parameter, 3.0);
//! let p = tape.mul(x1, x2);
//! let s = tape.sin(x1);
//! let y = tape.add(p, s);
//! tape.mark_output(y);
//!
//! let eval = tape.forward_eval(&[2.0, 3.0], &[]).unwrap();
//! let adj = tape.reverse_seeded(&eval.state, &[1.0]).unwrap();
//! assert_eq!(adj.params, vec![3.0 + 2f64.cos(), 2.0]);
//! ```

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DomainKind, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Position of a node in a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

impl VarId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Elementary operations understood by the tape and the lane kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpCode {
    Const,
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    /// `x^n` with the integer exponent stored in the node literal.
    PowInt,
    /// `max(x, 0)`; derivative 0 at exactly 0.
    MaxZero,
    /// `select_ge(a, b, x, y) = if a >= b { x } else { y }`.
    SelectGe,
}

impl OpCode {
    pub const ALL: [OpCode; 15] = [
        OpCode::Const,
        OpCode::Input,
        OpCode::Add,
        OpCode::Sub,
        OpCode::Mul,
        OpCode::Div,
        OpCode::Neg,
        OpCode::Exp,
        OpCode::Log,
        OpCode::Sqrt,
        OpCode::Sin,
        OpCode::Cos,
        OpCode::PowInt,
        OpCode::MaxZero,
        OpCode::SelectGe,
    ];

    pub fn arity(self) -> usize {
        match self {
            OpCode::Const | OpCode::Input => 0,
            OpCode::Neg
            | OpCode::Exp
            | OpCode::Log
            | OpCode::Sqrt
            | OpCode::Sin
            | OpCode::Cos
            | OpCode::PowInt
            | OpCode::MaxZero => 1,
            OpCode::Add | OpCode::Sub | OpCode::Mul | OpCode::Div => 2,
            OpCode::SelectGe => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpCode::Const => "const",
            OpCode::Input => "input",
            OpCode::Add => "add",
            OpCode::Sub => "sub",
            OpCode::Mul => "mul",
            OpCode::Div => "div",
            OpCode::Neg => "neg",
            OpCode::Exp => "exp",
            OpCode::Log => "log",
            OpCode::Sqrt => "sqrt",
            OpCode::Sin => "sin",
            OpCode::Cos => "cos",
            OpCode::PowInt => "pow_int",
            OpCode::MaxZero => "max_zero",
            OpCode::SelectGe => "select_ge",
        }
    }

    /// Whether the node carries a meaningful literal in the dump format.
    fn has_literal(self) -> bool {
        matches!(self, OpCode::Const | OpCode::Input | OpCode::PowInt)
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpCode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpCode::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| format!("unknown opcode `{s}`"))
    }
}

/// One recorded operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeNode {
    pub op: OpCode,
    args: [VarId; 4],
    /// Constant value, default value of an input, or the `pow_int` exponent.
    pub literal: f64,
}

impl TapeNode {
    pub(crate) fn new(op: OpCode, args: &[VarId], literal: f64) -> Self {
        let mut packed = [VarId(0); 4];
        packed[..args.len()].copy_from_slice(args);
        TapeNode { op, args: packed, literal }
    }

    pub fn args(&self) -> &[VarId] {
        &self.args[..self.op.arity()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Parameter,
    Random,
}

/// Per-node values retained by [`Tape::forward_eval`] for the reverse sweep.
#[derive(Debug, Clone)]
pub struct TapeState {
    tape_id: u64,
    values: Vec<f64>,
}

impl TapeState {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.values[v.index()]
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub outputs: Vec<f64>,
    pub state: TapeState,
}

/// Seeded adjoints of every input, split by kind.
#[derive(Debug, Clone, PartialEq)]
pub struct InputAdjoints {
    pub params: Vec<f64>,
    pub randoms: Vec<f64>,
}

impl InputAdjoints {
    /// All `M + N` adjoints, parameters first.
    pub fn concat(&self) -> Vec<f64> {
        let mut all = self.params.clone();
        all.extend_from_slice(&self.randoms);
        all
    }
}

/// Append-only operation list.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<TapeNode>,
    params: Vec<VarId>,
    randoms: Vec<VarId>,
    outputs: Vec<VarId>,
}

impl Clone for Tape {
    fn clone(&self) -> Self {
        // a clone may diverge from the original, so it must not accept its states
        Tape {
            id: fresh_id(),
            nodes: self.nodes.clone(),
            params: self.params.clone(),
            randoms: self.randoms.clone(),
            outputs: self.outputs.clone(),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: fresh_id(),
            nodes: Vec::new(),
            params: Vec::new(),
            randoms: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_inputs(&self) -> &[VarId] {
        &self.params
    }

    pub fn random_inputs(&self) -> &[VarId] {
        &self.randoms
    }

    pub fn outputs(&self) -> &[VarId] {
        &self.outputs
    }

    /// Default values of the parameter inputs, in registration order.
    pub fn param_defaults(&self) -> Vec<f64> {
        self.params.iter().map(|v| self.nodes[v.index()].literal).collect()
    }

    pub fn random_defaults(&self) -> Vec<f64> {
        self.randoms.iter().map(|v| self.nodes[v.index()].literal).collect()
    }

    fn push(&mut self, op: OpCode, args: [VarId; 4], literal: f64) -> VarId {
        let id = VarId(u32::try_from(self.nodes.len()).expect("tape exceeds u32::MAX nodes"));
        self.nodes.push(TapeNode { op, args, literal });
        id
    }

    pub fn new_input(&mut self, kind: InputKind, initial: f64) -> VarId {
        let id = self.push(OpCode::Input, [VarId(0); 4], initial);
        match kind {
            InputKind::Parameter => self.params.push(id),
            InputKind::Random => self.randoms.push(id),
        }
        id
    }

    pub fn constant(&mut self, value: f64) -> VarId {
        self.push(OpCode::Const, [VarId(0); 4], value)
    }

    /// Appends an operation node. `input` and `const` nodes have dedicated
    /// constructors and are rejected here.
    pub fn record(&mut self, op: OpCode, args: &[VarId]) -> Result<VarId> {
        self.record_with_literal(op, args, 0.0)
    }

    fn record_with_literal(&mut self, op: OpCode, args: &[VarId], literal: f64) -> Result<VarId> {
        if matches!(op, OpCode::Input | OpCode::Const) {
            return Err(Error::Config(format!(
                "`{op}` nodes are created with new_input/constant"
            )));
        }
        if args.len() != op.arity() {
            return Err(Error::Arity {
                op: op.name(),
                expected: op.arity(),
                got: args.len(),
            });
        }
        let node = self.nodes.len();
        let mut packed = [VarId(0); 4];
        for (slot, &a) in packed.iter_mut().zip(args) {
            if a.index() >= node {
                return Err(Error::ArgOutOfRange { node, arg: a.index() });
            }
            *slot = a;
        }
        Ok(self.push(op, packed, literal))
    }

    /// `x^n` for an integer exponent.
    pub fn record_pow_int(&mut self, x: VarId, n: i32) -> Result<VarId> {
        self.record_with_literal(OpCode::PowInt, &[x], f64::from(n))
    }

    fn op1(&mut self, op: OpCode, a: VarId) -> VarId {
        self.record(op, &[a]).expect("operand does not belong to this tape")
    }

    fn op2(&mut self, op: OpCode, a: VarId, b: VarId) -> VarId {
        self.record(op, &[a, b]).expect("operand does not belong to this tape")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.op2(OpCode::Add, a, b)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.op2(OpCode::Sub, a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.op2(OpCode::Mul, a, b)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        self.op2(OpCode::Div, a, b)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.op1(OpCode::Neg, a)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.op1(OpCode::Exp, a)
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        self.op1(OpCode::Log, a)
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        self.op1(OpCode::Sqrt, a)
    }

    pub fn sin(&mut self, a: VarId) -> VarId {
        self.op1(OpCode::Sin, a)
    }

    pub fn cos(&mut self, a: VarId) -> VarId {
        self.op1(OpCode::Cos, a)
    }

    pub fn max_zero(&mut self, a: VarId) -> VarId {
        self.op1(OpCode::MaxZero, a)
    }

    pub fn pow_int(&mut self, a: VarId, n: i32) -> VarId {
        self.record_pow_int(a, n).expect("operand does not belong to this tape")
    }

    pub fn select_ge(&mut self, a: VarId, b: VarId, x: VarId, y: VarId) -> VarId {
        self.record(OpCode::SelectGe, &[a, b, x, y])
            .expect("operand does not belong to this tape")
    }

    pub fn mark_output(&mut self, v: VarId) {
        assert!(v.index() < self.nodes.len(), "output {v} is not on this tape");
        self.outputs.push(v);
    }

    fn check_lengths(&self, params: &[f64], randoms: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Length {
                what: "parameter values",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if randoms.len() != self.randoms.len() {
            return Err(Error::Length {
                what: "random values",
                expected: self.randoms.len(),
                got: randoms.len(),
            });
        }
        Ok(())
    }

    /// Replays the tape on the given inputs. Returns the outputs and the full
    /// per-node value state needed by [`Tape::reverse_seeded`].
    pub fn forward_eval(&self, params: &[f64], randoms: &[f64]) -> Result<Evaluation> {
        self.check_lengths(params, randoms)?;
        let mut values: Vec<f64> = self.nodes.iter().map(|n| n.literal).collect();
        for (v, &x) in self.params.iter().zip(params) {
            values[v.index()] = x;
        }
        for (v, &x) in self.randoms.iter().zip(randoms) {
            values[v.index()] = x;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, OpCode::Input | OpCode::Const) {
                continue;
            }
            values[i] = eval_scalar(node, &values).map_err(|kind| Error::Domain {
                node: i,
                lane: None,
                kind,
            })?;
        }
        let outputs = self.outputs.iter().map(|v| values[v.index()]).collect();
        Ok(Evaluation {
            outputs,
            state: TapeState {
                tape_id: self.id,
                values,
            },
        })
    }

    /// Single backward pass seeded with `lambda` over the outputs.
    pub fn reverse_seeded(&self, state: &TapeState, lambda: &[f64]) -> Result<InputAdjoints> {
        if self.outputs.is_empty() {
            return Err(Error::NoOutputs);
        }
        if state.tape_id != self.id || state.values.len() != self.nodes.len() {
            return Err(Error::StaleState);
        }
        if lambda.len() != self.outputs.len() {
            return Err(Error::Length {
                what: "seed vector",
                expected: self.outputs.len(),
                got: lambda.len(),
            });
        }
        let vals = &state.values;
        let mut adj = vec![0.0; self.nodes.len()];
        for (v, &l) in self.outputs.iter().zip(lambda) {
            adj[v.index()] += l;
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let g = adj[i];
            let args = node.args();
            match node.op {
                OpCode::Const | OpCode::Input => {}
                OpCode::Add => {
                    adj[args[0].index()] += g;
                    adj[args[1].index()] += g;
                }
                OpCode::Sub => {
                    adj[args[0].index()] += g;
                    adj[args[1].index()] -= g;
                }
                OpCode::Mul => {
                    let (a, b) = (args[0].index(), args[1].index());
                    adj[a] += g * vals[b];
                    adj[b] += g * vals[a];
                }
                OpCode::Div => {
                    let (a, b) = (args[0].index(), args[1].index());
                    adj[a] += g / vals[b];
                    adj[b] -= g * vals[i] / vals[b];
                }
                OpCode::Neg => adj[args[0].index()] -= g,
                OpCode::Exp => adj[args[0].index()] += g * vals[i],
                OpCode::Log => {
                    let a = args[0].index();
                    adj[a] += g / vals[a];
                }
                OpCode::Sqrt => adj[args[0].index()] += g * 0.5 / vals[i],
                OpCode::Sin => {
                    let a = args[0].index();
                    adj[a] += g * vals[a].cos();
                }
                OpCode::Cos => {
                    let a = args[0].index();
                    adj[a] -= g * vals[a].sin();
                }
                OpCode::PowInt => {
                    let a = args[0].index();
                    let n = node.literal as i32;
                    if n != 0 {
                        adj[a] += g * node.literal * vals[a].powi(n - 1);
                    }
                }
                OpCode::MaxZero => {
                    let a = args[0].index();
                    if vals[a] > 0.0 {
                        adj[a] += g;
                    }
                }
                OpCode::SelectGe => {
                    let taken = if vals[args[0].index()] >= vals[args[1].index()] {
                        args[2]
                    } else {
                        args[3]
                    };
                    adj[taken.index()] += g;
                }
            }
        }
        Ok(InputAdjoints {
            params: self.params.iter().map(|v| adj[v.index()]).collect(),
            randoms: self.randoms.iter().map(|v| adj[v.index()]).collect(),
        })
    }

    /// Central differences of `lambda . y` with respect to every parameter
    /// input, random inputs held fixed. The step for parameter `j` is
    /// `h * max(1, |x_j|)`.
    pub fn finite_diff_gradient(
        &self,
        params: &[f64],
        randoms: &[f64],
        lambda: &[f64],
        h: f64,
    ) -> Result<Vec<f64>> {
        if !(h > 0.0) {
            return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
        }
        if lambda.len() != self.outputs.len() {
            return Err(Error::Length {
                what: "seed vector",
                expected: self.outputs.len(),
                got: lambda.len(),
            });
        }
        let seeded = |p: &[f64]| -> Result<f64> {
            let out = self.forward_eval(p, randoms)?.outputs;
            Ok(out.iter().zip(lambda).map(|(y, l)| y * l).sum())
        };
        let mut x = params.to_vec();
        let mut grad = Vec::with_capacity(params.len());
        for j in 0..params.len() {
            let step = h * params[j].abs().max(1.0);
            x[j] = params[j] + step;
            let up = seeded(&x)?;
            x[j] = params[j] - step;
            let down = seeded(&x)?;
            x[j] = params[j];
            grad.push((up - down) / (2.0 * step));
        }
        Ok(grad)
    }

    /// Line-oriented text form: `params:`, `randoms:` and `outputs:` header
    /// lines followed by one `<index> <opcode> <args...> [literal]` line per node.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let list = |ids: &[VarId]| ids.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "params: {}", list(&self.params));
        let _ = writeln!(s, "randoms: {}", list(&self.randoms));
        let _ = writeln!(s, "outputs: {}", list(&self.outputs));
        for (i, node) in self.nodes.iter().enumerate() {
            let _ = write!(s, "{i} {}", node.op);
            for a in node.args() {
                let _ = write!(s, " {a}");
            }
            if node.op.has_literal() {
                let _ = write!(s, " {:?}", node.literal);
            }
            s.push('\n');
        }
        s
    }

    /// Parses the output of [`Tape::dump`].
    pub fn from_dump(text: &str) -> Result<Tape> {
        let mut tape = Tape::new();
        let mut params = None;
        let mut randoms = None;
        let mut outputs = None;
        let ids = |rest: &str, line: usize| -> Result<Vec<VarId>> {
            rest.split_whitespace()
                .map(|t| {
                    t.parse::<u32>().map(VarId).map_err(|e| Error::Parse {
                        line,
                        msg: format!("bad index `{t}`: {e}"),
                    })
                })
                .collect()
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            if let Some(rest) = raw.strip_prefix("params:") {
                params = Some(ids(rest, line)?);
                continue;
            }
            if let Some(rest) = raw.strip_prefix("randoms:") {
                randoms = Some(ids(rest, line)?);
                continue;
            }
            if let Some(rest) = raw.strip_prefix("outputs:") {
                outputs = Some(ids(rest, line)?);
                continue;
            }
            let perr = |msg: String| Error::Parse { line, msg };
            let mut tokens = raw.split_whitespace();
            let index: usize = tokens
                .next()
                .unwrap()
                .parse()
                .map_err(|e| perr(format!("bad node index: {e}")))?;
            if index != tape.nodes.len() {
                return Err(perr(format!("expected node {}, found {index}", tape.nodes.len())));
            }
            let op: OpCode = tokens
                .next()
                .ok_or_else(|| perr("missing opcode".into()))?
                .parse()
                .map_err(perr)?;
            let mut args = Vec::with_capacity(4);
            for _ in 0..op.arity() {
                let t = tokens.next().ok_or_else(|| perr(format!("{op} needs {} args", op.arity())))?;
                args.push(VarId(t.parse().map_err(|e| perr(format!("bad arg `{t}`: {e}")))?));
            }
            let literal = if op.has_literal() {
                let t = tokens.next().ok_or_else(|| perr(format!("{op} needs a literal")))?;
                t.parse::<f64>().map_err(|e| perr(format!("bad literal `{t}`: {e}")))?
            } else {
                0.0
            };
            if let Some(extra) = tokens.next() {
                return Err(perr(format!("unexpected token `{extra}`")));
            }
            match op {
                OpCode::Input => {
                    tape.push(OpCode::Input, [VarId(0); 4], literal);
                }
                OpCode::Const => {
                    tape.constant(literal);
                }
                _ => {
                    tape.record_with_literal(op, &args, literal)
                        .map_err(|e| perr(e.to_string()))?;
                }
            }
        }
        let n = tape.nodes.len();
        let check = |list: &[VarId], want_input: bool| -> Result<()> {
            for v in list {
                if v.index() >= n {
                    return Err(Error::Parse { line: 0, msg: format!("index {v} out of range") });
                }
                if want_input && tape.nodes[v.index()].op != OpCode::Input {
                    return Err(Error::NotAnInput(v.index()));
                }
            }
            Ok(())
        };
        let params = params.unwrap_or_default();
        let randoms = randoms.unwrap_or_default();
        let outputs = outputs.unwrap_or_default();
        check(&params, true)?;
        check(&randoms, true)?;
        check(&outputs, false)?;
        if params.iter().any(|p| randoms.contains(p)) {
            return Err(Error::Parse { line: 0, msg: "parameter and random inputs overlap".into() });
        }
        tape.params = params;
        tape.randoms = randoms;
        tape.outputs = outputs;
        Ok(tape)
    }
}

/// Partial derivatives of a node with respect to each of its arguments,
/// given the values of earlier nodes and the node's own value `out`.
pub(crate) fn partials(node: &TapeNode, vals: &[f64], out: f64) -> [f64; 4] {
    let arg = |k: usize| vals[node.args[k].index()];
    match node.op {
        OpCode::Const | OpCode::Input => [0.0; 4],
        OpCode::Add => [1.0, 1.0, 0.0, 0.0],
        OpCode::Sub => [1.0, -1.0, 0.0, 0.0],
        OpCode::Mul => [arg(1), arg(0), 0.0, 0.0],
        OpCode::Div => [1.0 / arg(1), -out / arg(1), 0.0, 0.0],
        OpCode::Neg => [-1.0, 0.0, 0.0, 0.0],
        OpCode::Exp => [out, 0.0, 0.0, 0.0],
        OpCode::Log => [1.0 / arg(0), 0.0, 0.0, 0.0],
        OpCode::Sqrt => [0.5 / out, 0.0, 0.0, 0.0],
        OpCode::Sin => [arg(0).cos(), 0.0, 0.0, 0.0],
        OpCode::Cos => [-arg(0).sin(), 0.0, 0.0, 0.0],
        OpCode::PowInt => {
            let n = node.literal as i32;
            let d = if n == 0 { 0.0 } else { node.literal * arg(0).powi(n - 1) };
            [d, 0.0, 0.0, 0.0]
        }
        OpCode::MaxZero => [if arg(0) > 0.0 { 1.0 } else { 0.0 }, 0.0, 0.0, 0.0],
        OpCode::SelectGe => {
            let first = arg(0) >= arg(1);
            [0.0, 0.0, f64::from(u8::from(first)), f64::from(u8::from(!first))]
        }
    }
}

/// Scalar value of one non-input node given the values of earlier nodes.
pub(crate) fn eval_scalar(node: &TapeNode, vals: &[f64]) -> std::result::Result<f64, DomainKind> {
    let arg = |k: usize| vals[node.args[k].index()];
    Ok(match node.op {
        OpCode::Const | OpCode::Input => node.literal,
        OpCode::Add => arg(0) + arg(1),
        OpCode::Sub => arg(0) - arg(1),
        OpCode::Mul => arg(0) * arg(1),
        OpCode::Div => {
            let d = arg(1);
            if d == 0.0 {
                return Err(DomainKind::DivisionByZero);
            }
            arg(0) / d
        }
        OpCode::Neg => -arg(0),
        OpCode::Exp => arg(0).exp(),
        OpCode::Log => {
            let a = arg(0);
            if !(a > 0.0) {
                return Err(DomainKind::LogNonPositive);
            }
            a.ln()
        }
        OpCode::Sqrt => {
            let a = arg(0);
            if a < 0.0 {
                return Err(DomainKind::SqrtNegative);
            }
            a.sqrt()
        }
        OpCode::Sin => arg(0).sin(),
        OpCode::Cos => arg(0).cos(),
        OpCode::PowInt => {
            let (a, n) = (arg(0), node.literal as i32);
            if n < 0 && a == 0.0 {
                return Err(DomainKind::DivisionByZero);
            }
            a.powi(n)
        }
        OpCode::MaxZero => arg(0).max(0.0),
        OpCode::SelectGe => {
            if arg(0) >= arg(1) {
                arg(2)
            } else {
                arg(3)
            }
        }
    })
}
