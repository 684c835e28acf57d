//! Heston stochastic local volatility Monte Carlo program.
//!
//! ```text
//! dS = mu S dt + sqrt(V) L(t, S) S dW_S
//! dV = kappa (theta - V) dt + xi sqrt(V) dW_V,   d<W_S, W_V> = rho dt
//! ```
//!
//! Discretized with log-Euler steps for `S` and full-truncation Euler for `V`
//! (`V+ = max(V, 0)` inside drift and diffusion). `L` is piecewise constant
//! on a fixed `(t_i, S_j)` node grid. The recorded tape takes
//! `kappa, theta, xi, rho, v0` and every leverage value as parameters and two
//! standard normal draws per step as random inputs; `mu` and `s0` are
//! constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{InputKind, Tape, VarId};

/// Number of scalar Heston parameters in the calibration vector.
pub const HESTON_SCALARS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub rho: f64,
    pub v0: f64,
    pub s0: f64,
    #[serde(default)]
    pub mu: f64,
}

impl HestonParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.kappa, self.theta, self.xi, self.rho, self.v0, self.s0, self.mu]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Config("Heston parameters must be finite".into()));
        }
        for (name, v) in [("kappa", self.kappa), ("theta", self.theta), ("xi", self.xi), ("v0", self.v0)] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [-1, 1], got {}", self.rho)));
        }
        if !(self.s0 > 0.0) {
            return Err(Error::Config(format!("s0 must be positive, got {}", self.s0)));
        }
        Ok(())
    }
}

/// Piecewise-constant leverage surface `L(t_i, S_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverageGrid {
    pub t_nodes: Vec<f64>,
    pub s_nodes: Vec<f64>,
    /// `values[i][j] = L(t_i, S_j)`.
    pub values: Vec<Vec<f64>>,
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl LeverageGrid {
    /// Single-cell grid with `L = value` everywhere.
    pub fn flat(value: f64) -> Self {
        LeverageGrid {
            t_nodes: vec![0.0],
            s_nodes: vec![0.0],
            values: vec![vec![value]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_nodes.is_empty() || self.s_nodes.is_empty() {
            return Err(Error::Config("leverage grid needs at least one node per axis".into()));
        }
        if !strictly_increasing(&self.t_nodes) || !strictly_increasing(&self.s_nodes) {
            return Err(Error::Config("leverage grid nodes must be strictly increasing".into()));
        }
        if self.values.len() != self.t_nodes.len()
            || self.values.iter().any(|row| row.len() != self.s_nodes.len())
        {
            return Err(Error::Config(format!(
                "leverage values must be {}x{}",
                self.t_nodes.len(),
                self.s_nodes.len()
            )));
        }
        if self.values.iter().flatten().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("leverage values must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t_nodes.len() * self.s_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Greatest `i` with `nodes[i] <= x`, or 0 below the first node.
    fn cell(nodes: &[f64], x: f64) -> usize {
        nodes.iter().rposition(|&n| n <= x).unwrap_or(0)
    }

    pub fn time_row(&self, t: f64) -> usize {
        Self::cell(&self.t_nodes, t)
    }

    pub fn spot_col(&self, s: f64) -> usize {
        Self::cell(&self.s_nodes, s)
    }

    /// Row-major copy of the values.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn with_flat_values(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::Length {
                what: "leverage values",
                expected: self.len(),
                got: flat.len(),
            });
        }
        let cols = self.s_nodes.len();
        Ok(LeverageGrid {
            t_nodes: self.t_nodes.clone(),
            s_nodes: self.s_nodes.clone(),
            values: flat.chunks(cols).map(<[f64]>::to_vec).collect(),
        })
    }
}

/// Piecewise-constant lookup with clamping at both ends of each axis.
pub fn leverage_lookup(grid: &LeverageGrid, t: f64, s: f64) -> f64 {
    grid.values[grid.time_row(t)][grid.spot_col(s)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub kind: OptionKind,
    pub strike: f64,
    /// Number of Euler steps to expiry.
    pub maturity_step: usize,
}

/// Undiscounted European payoff.
pub fn payoff(instrument: &InstrumentSpec, s_t: f64) -> f64 {
    match instrument.kind {
        OptionKind::Call => (s_t - instrument.strike).max(0.0),
        OptionKind::Put => (instrument.strike - s_t).max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub s: f64,
    pub v: f64,
    pub step: usize,
}

/// One Euler step from `state` (at time `state.step * dt`) with independent
/// standard normal draws `z1` (variance) and `z2` (spot).
pub fn euler_step(
    state: PathState,
    params: &HestonParams,
    grid: &LeverageGrid,
    z1: f64,
    z2: f64,
    dt: f64,
) -> PathState {
    let sdt = dt.sqrt();
    let rho_c = (1.0 - params.rho * params.rho).sqrt();
    let t = state.step as f64 * dt;
    step_with(state, params, leverage_lookup(grid, t, state.s), rho_c, sdt, z1, z2, dt)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn step_with(
    state: PathState,
    p: &HestonParams,
    lev: f64,
    rho_c: f64,
    sdt: f64,
    z1: f64,
    z2: f64,
    dt: f64,
) -> PathState {
    let PathState { s, v, step } = state;
    let dwv = sdt * z1;
    let dws = p.rho * dwv + rho_c * (sdt * z2);
    let vp = v.max(0.0);
    let sv = vp.sqrt();
    let l2 = lev * lev;
    let drift = (p.mu - 0.5 * (vp * l2)) * dt;
    let diffusion = sv * lev * dws;
    PathState {
        s: s * (drift + diffusion).exp(),
        v: v + p.kappa * (p.theta - vp) * dt + p.xi * sv * dwv,
        step: step + 1,
    }
}

/// Direct simulation of one path without a tape. `draws` holds
/// `(z1, z2)` per step; `out` receives one payoff per instrument.
pub fn simulate_path(
    params: &HestonParams,
    grid: &LeverageGrid,
    instruments: &[InstrumentSpec],
    steps: usize,
    dt: f64,
    draws: &[f64],
    out: &mut [f64],
) {
    let sdt = dt.sqrt();
    let rho_c = (1.0 - params.rho * params.rho).sqrt();
    let mut state = PathState {
        s: params.s0,
        v: params.v0,
        step: 0,
    };
    for n in 0..steps {
        let row = &grid.values[grid.time_row(n as f64 * dt)];
        let lev = row[grid.spot_col(state.s)];
        state = step_with(state, params, lev, rho_c, sdt, draws[2 * n], draws[2 * n + 1], dt);
        for (o, inst) in out.iter_mut().zip(instruments) {
            if inst.maturity_step == n + 1 {
                *o = payoff(inst, state.s);
            }
        }
    }
}

/// Model, grid, instruments and simulation settings as read from a JSON
/// specification file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub heston: HestonParams,
    pub grid: LeverageGrid,
    pub instruments: Vec<InstrumentSpec>,
    pub mc: SimulationSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub paths: u64,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.heston.validate()?;
        self.grid.validate()?;
        if self.mc.paths == 0 {
            return Err(Error::Config("mc.paths must be positive".into()));
        }
        validate_layout(&self.instruments, self.mc.steps, self.mc.dt)
    }

    pub fn mc_config(&self) -> crate::expectation::McConfig {
        crate::expectation::McConfig {
            paths: self.mc.paths,
            seed: self.mc.seed,
            antithetic: self.mc.antithetic,
        }
    }

    pub fn record(&self) -> Result<HestonProgram> {
        self.validate()?;
        record_heston_program(&self.heston, &self.grid, &self.instruments, self.mc.steps, self.mc.dt)
    }

    /// A one-year model with a 3x3 leverage grid and `m` out-of-the-money
    /// options whose strikes span 80..120 and whose expiries cycle through
    /// the quarters. `steps` must be a multiple of 4.
    pub fn demo(steps: usize, m: usize, paths: u64, seed: u64) -> ModelSpec {
        let instruments = (0..m)
            .map(|k| {
                let strike = if m > 1 { 80.0 + 40.0 * k as f64 / (m - 1) as f64 } else { 100.0 };
                InstrumentSpec {
                    kind: if strike >= 100.0 { OptionKind::Call } else { OptionKind::Put },
                    strike,
                    maturity_step: steps * (1 + k % 4) / 4,
                }
            })
            .collect();
        ModelSpec {
            heston: HestonParams {
                kappa: 1.5,
                theta: 0.04,
                xi: 0.5,
                rho: -0.7,
                v0: 0.06,
                s0: 100.0,
                mu: 0.0,
            },
            grid: LeverageGrid {
                t_nodes: vec![0.0, 1.0 / 3.0, 2.0 / 3.0],
                s_nodes: vec![0.0, 95.0, 105.0],
                values: vec![vec![1.1, 1.0, 0.9], vec![1.15, 1.0, 0.95], vec![1.2, 1.05, 0.95]],
            },
            instruments,
            mc: SimulationSpec {
                paths,
                steps,
                dt: 1.0 / steps as f64,
                seed,
                antithetic: false,
            },
        }
    }
}

fn validate_layout(instruments: &[InstrumentSpec], steps: usize, dt: f64) -> Result<()> {
    if instruments.is_empty() {
        return Err(Error::Config("at least one instrument is required".into()));
    }
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    for (k, inst) in instruments.iter().enumerate() {
        if !(inst.strike > 0.0) {
            return Err(Error::Config(format!("instrument {k}: strike must be positive")));
        }
        if inst.maturity_step == 0 || inst.maturity_step > steps {
            return Err(Error::Config(format!(
                "instrument {k}: maturity_step {} outside 1..={steps}",
                inst.maturity_step
            )));
        }
    }
    Ok(())
}

/// Recorded Heston program plus the layout of its parameter vector.
#[derive(Debug, Clone)]
pub struct HestonProgram {
    pub tape: Tape,
    pub grid_shape: (usize, usize),
    pub steps: usize,
    pub dt: f64,
}

impl HestonProgram {
    pub fn num_params(&self) -> usize {
        HESTON_SCALARS + self.grid_shape.0 * self.grid_shape.1
    }

    pub fn param_names(&self) -> Vec<String> {
        param_names(self.grid_shape)
    }
}

pub fn param_names(grid_shape: (usize, usize)) -> Vec<String> {
    let mut names: Vec<String> = ["kappa", "theta", "xi", "rho", "v0"].iter().map(|s| s.to_string()).collect();
    for i in 0..grid_shape.0 {
        for j in 0..grid_shape.1 {
            names.push(format!("L[{i},{j}]"));
        }
    }
    names
}

/// Calibration vector `[kappa, theta, xi, rho, v0, L row-major...]`.
pub fn pack_params(params: &HestonParams, grid: &LeverageGrid) -> Vec<f64> {
    let mut x = vec![params.kappa, params.theta, params.xi, params.rho, params.v0];
    x.extend(grid.flat_values());
    x
}

/// Inverse of [`pack_params`]; `mu` and `s0` come from `base`.
pub fn unpack_params(x: &[f64], base: &HestonParams, grid: &LeverageGrid) -> Result<(HestonParams, LeverageGrid)> {
    if x.len() != HESTON_SCALARS + grid.len() {
        return Err(Error::Length {
            what: "calibration vector",
            expected: HESTON_SCALARS + grid.len(),
            got: x.len(),
        });
    }
    let params = HestonParams {
        kappa: x[0],
        theta: x[1],
        xi: x[2],
        rho: x[3],
        v0: x[4],
        ..*base
    };
    Ok((params, grid.with_flat_values(&x[HESTON_SCALARS..])?))
}

struct Recorder {
    tape: Tape,
    consts: Vec<(u64, VarId)>,
}

impl Recorder {
    fn constant(&mut self, x: f64) -> VarId {
        if let Some(&(_, v)) = self.consts.iter().find(|(bits, _)| *bits == x.to_bits()) {
            return v;
        }
        let v = self.tape.constant(x);
        self.consts.push((x.to_bits(), v));
        v
    }
}

/// Records the Euler-discretized path program. Initial parameter values
/// become the tape's input defaults.
pub fn record_heston_program(
    params: &HestonParams,
    grid: &LeverageGrid,
    instruments: &[InstrumentSpec],
    steps: usize,
    dt: f64,
) -> Result<HestonProgram> {
    params.validate()?;
    grid.validate()?;
    validate_layout(instruments, steps, dt)?;

    let mut r = Recorder {
        tape: Tape::new(),
        consts: Vec::new(),
    };
    let kappa = r.tape.new_input(InputKind::Parameter, params.kappa);
    let theta = r.tape.new_input(InputKind::Parameter, params.theta);
    let xi = r.tape.new_input(InputKind::Parameter, params.xi);
    let rho = r.tape.new_input(InputKind::Parameter, params.rho);
    let v0 = r.tape.new_input(InputKind::Parameter, params.v0);
    let lev: Vec<Vec<VarId>> = grid
        .values
        .iter()
        .map(|row| row.iter().map(|&l| r.tape.new_input(InputKind::Parameter, l)).collect())
        .collect();
    let draws: Vec<VarId> = (0..2 * steps).map(|_| r.tape.new_input(InputKind::Random, 0.0)).collect();

    let sdt = r.constant(dt.sqrt());
    let dt_c = r.constant(dt);
    let half = r.constant(0.5);
    let one = r.constant(1.0);
    let mu = r.constant(params.mu);
    let s_nodes: Vec<VarId> = grid.s_nodes.iter().map(|&s| r.constant(s)).collect();
    let rho_sq = r.tape.mul(rho, rho);
    let one_minus = r.tape.sub(one, rho_sq);
    let rho_c = r.tape.sqrt(one_minus);

    let mut s = r.constant(params.s0);
    let mut v = v0;
    let mut payoffs: Vec<Option<VarId>> = vec![None; instruments.len()];
    for n in 0..steps {
        let t = &mut r.tape;
        let dwv = t.mul(sdt, draws[2 * n]);
        let sz2 = t.mul(sdt, draws[2 * n + 1]);
        let corr = t.mul(rho, dwv);
        let indep = t.mul(rho_c, sz2);
        let dws = t.add(corr, indep);
        let vp = t.max_zero(v);
        let sv = t.sqrt(vp);

        let row = &lev[grid.time_row(n as f64 * dt)];
        let mut l = row[0];
        for j in 1..row.len() {
            l = t.select_ge(s, s_nodes[j], row[j], l);
        }

        let l2 = t.mul(l, l);
        let vl2 = t.mul(vp, l2);
        let h = t.mul(half, vl2);
        let md = t.sub(mu, h);
        let drift = t.mul(md, dt_c);
        let svl = t.mul(sv, l);
        let diffusion = t.mul(svl, dws);
        let x = t.add(drift, diffusion);
        let growth = t.exp(x);
        let s_next = t.mul(s, growth);

        let gap = t.sub(theta, vp);
        let pull = t.mul(kappa, gap);
        let pull_dt = t.mul(pull, dt_c);
        let va = t.add(v, pull_dt);
        let xs = t.mul(xi, sv);
        let shock = t.mul(xs, dwv);
        v = t.add(va, shock);
        s = s_next;

        for (k, inst) in instruments.iter().enumerate() {
            if inst.maturity_step == n + 1 {
                let strike = r.constant(inst.strike);
                let t = &mut r.tape;
                let intrinsic = match inst.kind {
                    OptionKind::Call => t.sub(s, strike),
                    OptionKind::Put => t.sub(strike, s),
                };
                payoffs[k] = Some(t.max_zero(intrinsic));
            }
        }
    }
    for p in payoffs {
        r.tape.mark_output(p.expect("maturities validated above"));
    }
    Ok(HestonProgram {
        tape: r.tape,
        grid_shape: (grid.t_nodes.len(), grid.s_nodes.len()),
        steps,
        dt,
    })
}
