//! Limited-memory quasi-Newton minimizer with backtracking line search.
//!
//! Two-loop recursion over a bounded history of curvature pairs, Armijo
//! sufficient decrease, and the termination tolerances used by every solver
//! stage. Accepted iterates are monotonically non-increasing in objective
//! value, and the iterate sequence is deterministic for a given objective.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Termination and step-size settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimSettings {
    /// Scale of the first trial step; later iterations use the standard
    /// quasi-Newton unit step.
    pub learning_rate: f64,
    /// First-order optimality threshold (infinity norm of the gradient).
    pub grad_tol: f64,
    /// Relative function-change threshold: |Δf| / max(1, |f|).
    pub f_tol: f64,
    /// Parameter-change threshold (infinity norm of the step).
    pub x_tol: f64,
    pub max_iters: usize,
    /// Number of curvature pairs retained.
    pub history: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            grad_tol: 1e-7,
            f_tol: 1e-9,
            x_tol: 1e-9,
            max_iters: 10_000,
            history: 10,
        }
    }
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.f_tol > 0.0 && self.x_tol > 0.0) {
            return Err(Error::InvalidParams("optimizer tolerances must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParams("max_iters must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParams("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_max_iters(mut self, iters: usize) -> Self {
        self.max_iters = iters;
        self
    }
}

/// Why the minimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    ConvergedGrad,
    ConvergedF,
    ConvergedX,
    MaxIters,
    LineSearchFailure,
}

impl Status {
    pub fn converged(self) -> bool {
        matches!(self, Status::ConvergedGrad | Status::ConvergedF | Status::ConvergedX)
    }
}

/// Result of a [`minimize`] call.
#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub status: Status,
    pub iterations: usize,
}

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 50;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, &x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective` starting at `x0`.
///
/// The objective fills `grad` (already zeroed) and returns the function value.
pub fn minimize<F>(mut objective: F, x0: &[f64], settings: &OptimSettings) -> Result<MinimizeResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    settings.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut f = objective(&x, &mut grad);
    if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("objective or gradient at the starting point".into()));
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.history);
    let mut direction = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut grad_new = vec![0.0; n];
    let mut alpha_init = settings.learning_rate;

    for iter in 0..settings.max_iters {
        if inf_norm(&grad) <= settings.grad_tol {
            return Ok(MinimizeResult {
                x,
                f,
                status: Status::ConvergedGrad,
                iterations: iter,
            });
        }

        two_loop_direction(&grad, &history, &mut direction);
        let mut slope = dot(&grad, &direction);
        if slope >= 0.0 {
            // not a descent direction; fall back to steepest descent
            for (d, g) in direction.iter_mut().zip(&grad) {
                *d = -g;
            }
            slope = dot(&grad, &direction);
        }

        // backtracking line search with Armijo sufficient decrease
        let mut alpha = alpha_init;
        let mut accepted = false;
        let mut f_new = f;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] + alpha * direction[i];
            }
            grad_new.iter_mut().for_each(|g| *g = 0.0);
            f_new = objective(&x_new, &mut grad_new);
            if f_new.is_finite()
                && grad_new.iter().all(|g| g.is_finite())
                && f_new <= f + ARMIJO_C * alpha * slope
            {
                accepted = true;
                break;
            }
            alpha *= BACKTRACK_SHRINK;
        }
        if !accepted {
            return Ok(MinimizeResult {
                x,
                f,
                status: Status::LineSearchFailure,
                iterations: iter,
            });
        }
        alpha_init = 1.0;

        let mut s = vec![0.0; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            s[i] = x_new[i] - x[i];
            y[i] = grad_new[i] - grad[i];
        }
        let step_norm = inf_norm(&s);
        let f_change = (f - f_new).abs() / f.abs().max(1.0);

        let sy = dot(&s, &y);
        if sy > 1e-12 * inf_norm(&y).max(1e-300) {
            if history.len() >= settings.history.max(1) {
                history.pop_front();
            }
            let rho = 1.0 / sy;
            history.push_back((s, y, rho));
        }

        x.copy_from_slice(&x_new);
        grad.copy_from_slice(&grad_new);
        f = f_new;

        if f_change <= settings.f_tol {
            return Ok(MinimizeResult {
                x,
                f,
                status: Status::ConvergedF,
                iterations: iter + 1,
            });
        }
        if step_norm <= settings.x_tol {
            return Ok(MinimizeResult {
                x,
                f,
                status: Status::ConvergedX,
                iterations: iter + 1,
            });
        }
    }

    Ok(MinimizeResult {
        x,
        f,
        status: Status::MaxIters,
        iterations: settings.max_iters,
    })
}

/// Two-loop recursion: `direction = -H * grad` with the implicit inverse
/// Hessian built from the stored curvature pairs.
fn two_loop_direction(
    grad: &[f64],
    history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    direction: &mut [f64],
) {
    direction.copy_from_slice(grad);
    if history.is_empty() {
        for d in direction.iter_mut() {
            *d = -*d;
        }
        return;
    }
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, direction);
        for (d, yi) in direction.iter_mut().zip(y) {
            *d -= a * yi;
        }
        alphas.push(a);
    }
    // initial Hessian scaling from the most recent pair
    let (s_last, y_last, _) = history.back().unwrap();
    let gamma = dot(s_last, y_last) / dot(y_last, y_last).max(1e-300);
    for d in direction.iter_mut() {
        *d *= gamma;
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, direction);
        for (d, si) in direction.iter_mut().zip(s) {
            *d += (a - b) * si;
        }
    }
    for d in direction.iter_mut() {
        *d = -*d;
    }
}
