//! Shared helpers for the integration tests: a random tape generator whose
//! programs stay inside every operation's domain, kink detection for finite
//! difference comparisons and small Heston problems.

#![allow(dead_code)]

pub mod criteria;

use mc_adjoint::heston::{LeverageGrid, ModelSpec};
use mc_adjoint::tape::{InputKind, OpCode, Tape, VarId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Generated {
    pub tape: Tape,
    pub params: Vec<f64>,
    pub randoms: Vec<f64>,
}

/// Shape of a generated program.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_depth: usize,
    pub params: usize,
    pub randoms: usize,
    pub outputs: usize,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    tape: Tape,
    leaves: Vec<VarId>,
    depth: Vec<usize>,
}

impl Builder<'_> {
    fn push(&mut self, v: VarId, depth: usize) -> VarId {
        if self.depth.len() <= v.index() {
            self.depth.resize(v.index() + 1, 0);
        }
        self.depth[v.index()] = depth;
        v
    }

    fn d(&self, v: VarId) -> usize {
        self.depth.get(v.index()).copied().unwrap_or(0)
    }

    fn konst(&mut self, x: f64) -> VarId {
        let v = self.tape.constant(x);
        self.push(v, 0)
    }

    fn un(&mut self, op: OpCode, a: VarId) -> VarId {
        let v = self.tape.record(op, &[a]).unwrap();
        let d = self.d(a) + 1;
        self.push(v, d)
    }

    fn bin(&mut self, op: OpCode, a: VarId, b: VarId) -> VarId {
        let v = self.tape.record(op, &[a, b]).unwrap();
        let d = self.d(a).max(self.d(b)) + 1;
        self.push(v, d)
    }

    fn leaf(&mut self) -> VarId {
        if self.rng.gen_bool(0.15) {
            let x = self.rng.gen_range(-2.0..2.0);
            self.konst(x)
        } else {
            let i = self.rng.gen_range(0..self.leaves.len());
            self.leaves[i]
        }
    }

    /// Expression whose tape depth is at most `budget`.
    fn expr(&mut self, budget: usize) -> VarId {
        if budget == 0 || self.rng.gen_bool(0.15) {
            return self.leaf();
        }
        // (opcode, layers the construction adds above its operands)
        const CHOICES: [(OpCode, usize); 14] = [
            (OpCode::Add, 1),
            (OpCode::Sub, 1),
            (OpCode::Mul, 2),
            (OpCode::Div, 3),
            (OpCode::Neg, 1),
            (OpCode::Exp, 2),
            (OpCode::Log, 3),
            (OpCode::Sqrt, 3),
            (OpCode::Sin, 1),
            (OpCode::Cos, 1),
            (OpCode::PowInt, 3),
            (OpCode::MaxZero, 1),
            (OpCode::SelectGe, 1),
            (OpCode::Const, 0),
        ];
        let (op, cost) = CHOICES[self.rng.gen_range(0..CHOICES.len())];
        if cost > budget {
            return self.leaf();
        }
        let sub = budget - cost;
        match op {
            OpCode::Add | OpCode::Sub => {
                let (a, b) = (self.expr(sub), self.expr(sub));
                self.bin(op, a, b)
            }
            OpCode::Mul => {
                // sin keeps products bounded
                let a = self.expr(sub);
                let s = self.un(OpCode::Sin, a);
                let b = self.expr(budget - 1);
                self.bin(OpCode::Mul, s, b)
            }
            OpCode::Div => {
                let a = self.expr(budget - 1);
                let b = self.expr(sub);
                let sq = self.bin(OpCode::Mul, b, b);
                let one = self.konst(1.0);
                let den = self.bin(OpCode::Add, sq, one);
                self.bin(OpCode::Div, a, den)
            }
            OpCode::Neg | OpCode::Sin | OpCode::Cos | OpCode::MaxZero => {
                let a = self.expr(sub);
                self.un(op, a)
            }
            OpCode::Exp => {
                let a = self.expr(sub);
                let s = self.un(OpCode::Sin, a);
                self.un(OpCode::Exp, s)
            }
            OpCode::Log | OpCode::Sqrt => {
                let a = self.expr(sub);
                let sq = self.bin(OpCode::Mul, a, a);
                let c = self.konst(if op == OpCode::Log { 0.5 } else { 0.25 });
                let pos = self.bin(OpCode::Add, sq, c);
                self.un(op, pos)
            }
            OpCode::PowInt => {
                let a = self.expr(sub);
                let c = self.un(OpCode::Cos, a);
                let two = self.konst(2.0);
                let base = self.bin(OpCode::Add, c, two);
                let n = self.rng.gen_range(-3..=4);
                let v = self.tape.pow_int(base, n);
                let d = self.d(base) + 1;
                self.push(v, d)
            }
            OpCode::SelectGe => {
                let args: Vec<VarId> = (0..4).map(|_| self.expr(sub)).collect();
                let v = self.tape.select_ge(args[0], args[1], args[2], args[3]);
                let d = args.iter().map(|&a| self.d(a)).max().unwrap() + 1;
                self.push(v, d)
            }
            _ => {
                let x = self.rng.gen_range(-2.0..2.0);
                self.konst(x)
            }
        }
    }
}

/// Random program over every opcode. Values stay finite and inside the
/// domains of `log`, `sqrt`, `div` and negative `pow_int` for any inputs.
pub fn random_tape(rng: &mut ChaCha8Rng, shape: Shape) -> Generated {
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let mut params = Vec::new();
    let mut randoms = Vec::new();
    for _ in 0..shape.params {
        let x = rng.gen_range(-1.5..1.5);
        leaves.push(tape.new_input(InputKind::Parameter, x));
        params.push(x);
    }
    for _ in 0..shape.randoms {
        let x = rng.gen_range(-2.0..2.0);
        leaves.push(tape.new_input(InputKind::Random, x));
        randoms.push(x);
    }
    let mut b = Builder {
        rng,
        tape,
        leaves,
        depth: Vec::new(),
    };
    for _ in 0..shape.outputs {
        let y = b.expr(shape.max_depth);
        b.tape.mark_output(y);
    }
    Generated {
        tape: b.tape,
        params,
        randoms,
    }
}

/// Longest input-to-node chain of the tape.
pub fn tape_depth(tape: &Tape) -> usize {
    let mut depth = vec![0usize; tape.len()];
    for (i, node) in tape.nodes().iter().enumerate() {
        depth[i] = node.args().iter().map(|a| depth[a.index()] + 1).max().unwrap_or(0);
    }
    depth.into_iter().max().unwrap_or(0)
}

/// True when a `max_zero` or `select_ge` switch lies within `tol` of its
/// kink at the given forward values.
pub fn near_kink(tape: &Tape, values: &[f64], tol: f64) -> bool {
    tape.nodes().iter().any(|node| {
        let a = node.args();
        match node.op {
            OpCode::MaxZero => values[a[0].index()].abs() < tol,
            OpCode::SelectGe => (values[a[0].index()] - values[a[1].index()]).abs() < tol,
            _ => false,
        }
    })
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Heston problem with a 3x3 leverage grid and `m` options.
pub fn heston(steps: usize, m: usize, paths: u64, seed: u64) -> ModelSpec {
    ModelSpec::demo(steps, m, paths, seed)
}

/// Recovery problem for `(kappa, theta)`: 2x2 leverage grid whose values
/// vary in time only, small vol of vol.
pub fn recovery_spec(paths: u64, seed: u64) -> ModelSpec {
    let mut spec = ModelSpec::demo(16, 4, paths, seed);
    spec.heston.xi = 0.1;
    spec.grid = LeverageGrid {
        t_nodes: vec![0.0, 0.5],
        s_nodes: vec![0.0, 100.0],
        values: vec![vec![1.0, 1.0], vec![1.1, 1.1]],
    };
    spec
}
