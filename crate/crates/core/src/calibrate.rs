//! Gradient-descent calibration of `G` and synthetic target generation.
//!
//! The optimizer is a projected gradient descent with Armijo backtracking.
//! The first trial step of each line search is the Barzilai-Borwein step from
//! the previous iterate pair (when enabled), which keeps plain descent usable
//! on the badly scaled problems calibration produces. An optional diagonal
//! scale runs the descent in coordinates `x_j / scale_j`. Accepted iterates
//! never increase `G`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectation::{estimate_means, gradient_of_g, GradientOptions, GradientReport, PathSource, Targets};
use crate::heston::HESTON_SCALARS;
use crate::kernel::Kernel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    /// Step shrink factor in `(0, 1)`.
    pub backtrack: f64,
    /// Sufficient-decrease constant in `(0, 1)`.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Stop when the projected gradient norm falls to this value.
    pub grad_tol: f64,
    /// Stop when `G` falls to this value.
    pub g_tol: f64,
    /// Stop when `G <= g_rel_tol * G(init)`.
    pub g_rel_tol: f64,
    pub barzilai_borwein: bool,
    pub min_step: f64,
    pub max_step: f64,
    /// Diagonal scaling: descent runs in the coordinates `x_j / scale_j`.
    /// Empty means unit scaling.
    pub scale: Vec<f64>,
    /// Box bounds; empty means unbounded.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 500,
            initial_step: 1.0,
            backtrack: 0.5,
            armijo: 1e-4,
            max_backtracks: 60,
            grad_tol: 1e-12,
            g_tol: 0.0,
            g_rel_tol: 0.0,
            barzilai_borwein: true,
            min_step: 1e-20,
            max_step: 1e20,
            scale: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.initial_step > 0.0) {
            return bad("initial_step must be positive");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack factor must lie in (0, 1)");
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("Armijo constant must lie in (0, 1)");
        }
        if self.grad_tol < 0.0 || self.g_tol < 0.0 || self.g_rel_tol < 0.0 {
            return bad("tolerances must be non-negative");
        }
        if self.scale.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return bad("scale entries must be positive and finite");
        }
        for b in [&self.scale, &self.lower, &self.upper] {
            if !b.is_empty() && b.len() != dim {
                return Err(Error::Length {
                    what: "scale or bounds",
                    expected: dim,
                    got: b.len(),
                });
            }
        }
        Ok(())
    }

    fn scale_sq(&self, j: usize) -> f64 {
        self.scale.get(j).map_or(1.0, |s| s * s)
    }

    fn project(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            if let Some(&lo) = self.lower.get(j) {
                *v = v.max(lo);
            }
            if let Some(&hi) = self.upper.get(j) {
                *v = v.min(hi);
            }
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        let mut p = x.to_vec();
        self.project(&mut p);
        p == x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub iter: usize,
    pub params: Vec<f64>,
    #[serde(rename = "G")]
    pub g: f64,
    pub grad_norm: f64,
    /// Accepted step length (0 for the initial point).
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    ObjectiveTolerance,
    RelativeObjectiveTolerance,
    MaxIterations,
    LineSearchFailed,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iterates: Vec<Iterate>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn last(&self) -> &Iterate {
        self.iterates.last().expect("trajectory always holds the initial point")
    }

    /// CSV with columns `iter,G,grad_norm,step` followed by one column per
    /// parameter. `header` lines are written first, each prefixed by `# `.
    pub fn write_csv<W: Write>(&self, out: W, param_names: &[String], header: &[String]) -> Result<()> {
        let mut out = out;
        for line in header {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut cols: Vec<String> = ["iter", "G", "grad_norm", "step"].iter().map(|s| s.to_string()).collect();
        cols.extend(param_names.iter().cloned());
        w.write_record(&cols)?;
        for it in &self.iterates {
            let mut row = vec![it.iter.to_string(), fmt(it.g), fmt(it.grad_norm), fmt(it.step)];
            row.extend(it.params.iter().map(|&p| fmt(p)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite(g: f64, grad: &[f64]) -> bool {
    g.is_finite() && grad.iter().all(|x| x.is_finite())
}

/// Projected gradient descent with Armijo backtracking on `objective`, which
/// returns `(G, dG/dx)`.
pub fn gradient_descent<F>(mut objective: F, init: &[f64], config: &OptimizerConfig) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate(init.len())?;
    if !config.contains(init) {
        return Err(Error::Config("initial point lies outside the bounds".into()));
    }
    let mut x = init.to_vec();
    let (mut g, mut grad) = objective(&x)?;
    let mut iterates = vec![Iterate {
        iter: 0,
        params: x.clone(),
        g,
        grad_norm: norm(&grad),
        step: 0.0,
    }];
    let done = |iterates: Vec<Iterate>, termination| Ok(Trajectory { iterates, termination });
    if !finite(g, &grad) {
        return done(iterates, Termination::NonFinite);
    }
    let g0 = g;
    let mut trial = config.initial_step;
    for iter in 1..=config.max_iters + 1 {
        // search direction: the gradient in scaled coordinates, mapped back
        let dir: Vec<f64> = grad.iter().enumerate().map(|(j, g)| config.scale_sq(j) * g).collect();
        let mut pg = x.iter().zip(&grad).map(|(a, b)| a - b).collect::<Vec<_>>();
        config.project(&mut pg);
        let pg_norm = norm(&x.iter().zip(&pg).map(|(a, b)| a - b).collect::<Vec<_>>());
        if pg_norm <= config.grad_tol {
            return done(iterates, Termination::GradientTolerance);
        }
        if g <= config.g_tol {
            return done(iterates, Termination::ObjectiveTolerance);
        }
        if g <= config.g_rel_tol * g0 {
            return done(iterates, Termination::RelativeObjectiveTolerance);
        }
        if iter > config.max_iters {
            break;
        }

        let mut step = trial.clamp(config.min_step, config.max_step);
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a - step * b).collect();
            config.project(&mut xn);
            let d: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if d.iter().all(|&v| v == 0.0) {
                break;
            }
            let (gn, gradn) = objective(&xn)?;
            if !finite(gn, &gradn) {
                iterates.push(Iterate {
                    iter,
                    params: xn,
                    g: gn,
                    grad_norm: norm(&gradn),
                    step,
                });
                return done(iterates, Termination::NonFinite);
            }
            if gn <= g + config.armijo * dot(&grad, &d) {
                accepted = Some((xn, gn, gradn, d));
                break;
            }
            step *= config.backtrack;
            if step < config.min_step {
                break;
            }
        }
        let Some((xn, gn, gradn, s)) = accepted else {
            return done(iterates, Termination::LineSearchFailed);
        };
        trial = if config.barzilai_borwein {
            let y: Vec<f64> = gradn.iter().zip(&grad).map(|(a, b)| a - b).collect();
            // both products taken in scaled coordinates
            let sy = dot(&s, &y);
            let ss: f64 = s.iter().enumerate().map(|(j, v)| v * v / config.scale_sq(j)).sum();
            if sy > 0.0 {
                ss / sy
            } else {
                step / config.backtrack
            }
        } else {
            config.initial_step
        };
        x = xn;
        g = gn;
        grad = gradn;
        iterates.push(Iterate {
            iter,
            params: x.clone(),
            g,
            grad_norm: norm(&grad),
            step,
        });
    }
    done(iterates, Termination::MaxIterations)
}

/// Targets `C_i = E y_i` at the true parameters on the given path set.
pub fn synthetic_targets(
    kernel: &Kernel,
    true_params: &[f64],
    source: &dyn PathSource,
    threads: usize,
) -> Result<Targets> {
    Ok(Targets(estimate_means(kernel, true_params, source, false, threads)?.means))
}

/// Lower bound on positive Heston quantities and leverage values.
pub const POSITIVE_FLOOR: f64 = 1e-6;
pub const RHO_LIMIT: f64 = 0.999;

/// Box bounds for the full Heston calibration vector.
pub fn heston_bounds(num_params: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lower = vec![POSITIVE_FLOOR; num_params];
    let mut upper = vec![f64::INFINITY; num_params];
    lower[3] = -RHO_LIMIT;
    upper[3] = RHO_LIMIT;
    debug_assert!(num_params >= HESTON_SCALARS);
    (lower, upper)
}

/// `G` as a function of a subset of the parameter vector, the rest held at
/// `base`. Every evaluation uses the same path set (common random numbers).
pub struct SubsetObjective<'a> {
    pub kernel: &'a Kernel,
    pub targets: &'a Targets,
    pub source: &'a dyn PathSource,
    pub options: GradientOptions,
    pub base: Vec<f64>,
    pub free: Vec<usize>,
}

impl SubsetObjective<'_> {
    pub fn full(&self, free_values: &[f64]) -> Vec<f64> {
        let mut x = self.base.clone();
        for (&j, &v) in self.free.iter().zip(free_values) {
            x[j] = v;
        }
        x
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&j| full[j]).collect()
    }

    pub fn report(&self, free_values: &[f64]) -> Result<GradientReport> {
        gradient_of_g(self.kernel, &self.full(free_values), self.targets, self.source, &self.options)
    }

    pub fn evaluate(&self, free_values: &[f64]) -> Result<(f64, Vec<f64>)> {
        let rep = self.report(free_values)?;
        Ok((rep.g, self.restrict(&rep.grad)))
    }
}
