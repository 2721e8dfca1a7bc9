//! Deterministic local optimizers: limited-memory BFGS with Armijo
//! backtracking, and a damped Gauss-Newton (Levenberg-Marquardt) solver for
//! small dense least-squares problems.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gradient vanished at the current point.
    Stationary,
    /// Relative loss decrease fell below the tolerance.
    Converged,
    MaxIterations,
    /// No step along the search direction decreased the loss.
    LineSearchFailed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub max_iterations: usize,
    /// Length of the first (steepest-descent) trial step.
    pub initial_step: f64,
    /// Stop when `(f_prev − f) / max(|f_prev|, tiny) < tolerance`.
    pub tolerance: f64,
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iterations: 2000,
            initial_step: 0.1,
            tolerance: 1e-8,
            memory: 10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_step > 0.0
            && self.tolerance > 0.0
            && self.memory > 0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.max_backtracks > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimTrace {
    /// Loss at the start and after every accepted step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn lbfgs<F>(x0: &[f64], mut f: F, cfg: &LbfgsConfig) -> Result<(Vec<f64>, OptimTrace)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective { frame: None });
    }
    let mut losses = vec![fx];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        let gnorm = norm(&g);
        if gnorm == 0.0 || fx == 0.0 {
            stop = StopReason::Stationary;
            break;
        }
        let mut d = two_loop(&g, &mem);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if mem.is_empty() {
            (cfg.initial_step / gnorm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            evaluations += 1;
            match f(&trial) {
                Ok((ft, gt)) if ft.is_finite() && ft <= fx + cfg.armijo * step * slope => {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_numerical() => {}
                Err(e) => return Err(e),
            }
            step *= cfg.backtrack;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if !mem.is_empty() {
                // Retry once from steepest descent before giving up.
                mem.clear();
                continue;
            }
            stop = StopReason::LineSearchFailed;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if mem.len() == cfg.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - fn_) / fx.abs().max(f64::MIN_POSITIVE);
        x = xn;
        fx = fn_;
        g = gn;
        losses.push(fx);
        if rel < cfg.tolerance {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok((
        x,
        OptimTrace {
            losses,
            iterations,
            evaluations,
            stop,
        },
    ))
}

fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    /// Accepted steps per call.
    pub iterations: usize,
    pub initial_damping: f64,
    /// Damping multiplier after a rejected trial.
    pub damping_up: f64,
    /// Damping multiplier after an accepted step.
    pub damping_down: f64,
    /// Rejected trials tolerated per step before stopping.
    pub max_rejections: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            iterations: 10,
            initial_damping: 1e-2,
            damping_up: 4.0,
            damping_down: 0.25,
            max_rejections: 12,
        }
    }
}

/// Residuals and, when requested, their Jacobian (one row per residual).
pub type ResidualEval = (Vec<f64>, Option<DMatrix<f64>>);

#[derive(Clone, Debug, PartialEq)]
pub struct LmTrace {
    /// `‖r‖²` at the start and after every accepted step.
    pub costs: Vec<f64>,
    pub rejections: usize,
}

/// Minimizes `‖r(x)‖²`. Each step solves `(JᵀJ + λI)δ = −Jᵀr`; a trial that
/// does not lower the cost is rejected and retried with larger `λ`.
pub fn levenberg_marquardt<F>(x0: &[f64], mut r: F, cfg: &LmConfig) -> Result<(Vec<f64>, LmTrace)>
where
    F: FnMut(&[f64], bool) -> Result<ResidualEval>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (res, jac) = r(&x, true)?;
    let mut cost = dot(&res, &res);
    if !cost.is_finite() {
        return Err(Error::NonFiniteObjective { frame: None });
    }
    let mut res = DVector::from_vec(res);
    let mut jac = jac.expect("jacobian requested");
    let mut lambda = cfg.initial_damping;
    let mut costs = vec![cost];
    let mut rejections = 0;

    'outer: for _ in 0..cfg.iterations {
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * &res;
        if grad.norm() == 0.0 {
            break;
        }
        let mut tries = 0;
        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda;
            }
            let Some(chol) = a.cholesky() else {
                lambda *= cfg.damping_up;
                tries += 1;
                if tries > cfg.max_rejections {
                    break 'outer;
                }
                continue;
            };
            let delta = chol.solve(&(-&grad));
            let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let ok = match r(&trial, false) {
                Ok((rt, _)) => {
                    let ct = dot(&rt, &rt);
                    (ct.is_finite() && ct < cost).then_some(ct)
                }
                Err(e) if e.is_numerical() => None,
                Err(e) => return Err(e),
            };
            if let Some(ct) = ok {
                x = trial;
                cost = ct;
                costs.push(cost);
                lambda = (lambda * cfg.damping_down).max(1e-12);
                let (rn, jn) = r(&x, true)?;
                res = DVector::from_vec(rn);
                jac = jn.expect("jacobian requested");
                break;
            }
            rejections += 1;
            tries += 1;
            lambda *= cfg.damping_up;
            if tries > cfg.max_rejections {
                break 'outer;
            }
        }
    }
    Ok((x, LmTrace { costs, rejections }))
}
