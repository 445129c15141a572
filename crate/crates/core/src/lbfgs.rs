//! Limited-memory quasi-Newton minimizer.
//!
//! Two-loop recursion over a bounded history of secant pairs, with a strong
//! Wolfe line search. Objectives return the cost and fill the gradient in
//! one call; non-finite trial values are treated as infinitely bad so the
//! line search backs away from them.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    /// Number of secant pairs kept for the inverse-Hessian approximation.
    pub memory: usize,
    pub max_iterations: usize,
    /// Terminate when the sup-norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Terminate when the relative cost decrease falls below this.
    pub cost_tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            cost_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub cost: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// A tolerance fired (gradient or cost); false when the iteration cap
    /// was hit or the line search stalled.
    pub converged: bool,
    /// Non-finite values made progress impossible.
    pub diverged: bool,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 30;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` starting from `x0`. `f(x, grad)` must fill `grad` with the
/// gradient at `x` and return the cost.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut cost = f(&x, &mut grad);

    if !cost.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return LbfgsOutcome {
            x,
            cost,
            gradient_norm: inf_norm(&grad),
            iterations: 0,
            converged: false,
            diverged: true,
        };
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;
    let mut small_decreases = 0usize;

    while iterations < cfg.max_iterations {
        if inf_norm(&grad) <= cfg.gradient_tolerance {
            converged = true;
            break;
        }

        let mut dir = two_loop_direction(&grad, &history);
        let mut slope = dot(&dir, &grad);
        if !(slope < 0.0) {
            // Fall back to steepest descent when the approximation breaks.
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&dir, &grad);
            if !(slope < 0.0) {
                break;
            }
        }

        let alpha0 = if history.is_empty() {
            (1.0 / inf_norm(&grad).max(1.0)).min(1.0)
        } else {
            1.0
        };

        let mut grad_new = vec![0.0; n];
        let trial = {
            let mut phi = |alpha: f64, g_out: &mut [f64]| -> f64 {
                let xt: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
                f(&xt, g_out)
            };
            line_search_wolfe(&mut phi, cost, slope, &dir, alpha0, &mut grad_new)
        };

        let (alpha, cost_new) = match trial {
            Some(pair) => pair,
            None => {
                // No acceptable finite step; report divergence only when the
                // current gradient is itself unusable.
                diverged = grad.iter().any(|g| !g.is_finite());
                break;
            }
        };

        iterations += 1;

        let s: Vec<f64> = dir.iter().map(|d| alpha * d).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm && sy.is_finite() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }

        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let cost_drop = cost - cost_new;
        grad = grad_new;
        let prev_cost = cost;
        cost = cost_new;

        // Two consecutive negligible decreases end the run; a single one can
        // be a line-search hiccup in a curved valley.
        if cost_drop.abs() <= cfg.cost_tolerance * prev_cost.abs().max(1.0) {
            small_decreases += 1;
            if small_decreases >= 2 {
                converged = true;
                break;
            }
        } else {
            small_decreases = 0;
        }
    }

    if iterations == cfg.max_iterations && inf_norm(&grad) <= cfg.gradient_tolerance {
        converged = true;
    }

    LbfgsOutcome {
        gradient_norm: inf_norm(&grad),
        x,
        cost,
        iterations,
        converged,
        diverged,
    }
}

/// H * g via the two-loop recursion, negated into a descent direction.
fn two_loop_direction(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        if gamma.is_finite() && gamma > 0.0 {
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Strong Wolfe line search (bracket then zoom). Returns the accepted step
/// and cost, leaving the gradient at the accepted point in `grad_out`.
fn line_search_wolfe<P>(
    phi: &mut P,
    phi0: f64,
    dphi0: f64,
    dir: &[f64],
    alpha0: f64,
    grad_out: &mut [f64],
) -> Option<(f64, f64)>
where
    P: FnMut(f64, &mut [f64]) -> f64,
{
    let mut evals = 0;
    let mut eval = |alpha: f64, g: &mut [f64], evals: &mut usize| -> (f64, f64) {
        *evals += 1;
        let v = phi(alpha, g);
        if v.is_finite() {
            (v, dot(g, dir))
        } else {
            (f64::INFINITY, f64::INFINITY)
        }
    };

    let mut alpha_prev = 0.0;
    let mut value_prev = phi0;
    let mut alpha = alpha0.max(1e-16);
    let mut grad_buf = vec![0.0; dir.len()];

    while evals < MAX_LINE_EVALS {
        let (value, slope) = eval(alpha, &mut grad_buf, &mut evals);
        if value > phi0 + WOLFE_C1 * alpha * dphi0 || (value >= value_prev && evals > 1) {
            return zoom(
                phi, phi0, dphi0, dir, alpha_prev, value_prev, alpha, grad_out, &mut evals,
            );
        }
        if slope.abs() <= -WOLFE_C2 * dphi0 {
            grad_out.copy_from_slice(&grad_buf);
            return Some((alpha, value));
        }
        if slope >= 0.0 {
            return zoom(
                phi, phi0, dphi0, dir, alpha, value, alpha_prev, grad_out, &mut evals,
            );
        }
        alpha_prev = alpha;
        value_prev = value;
        alpha = (2.0 * alpha).min(1e6);
    }
    None
}

/// Bisection zoom between a low point satisfying Armijo and a high bound.
#[allow(clippy::too_many_arguments)]
fn zoom<P>(
    phi: &mut P,
    phi0: f64,
    dphi0: f64,
    dir: &[f64],
    mut alpha_lo: f64,
    mut value_lo: f64,
    mut alpha_hi: f64,
    grad_out: &mut [f64],
    evals: &mut usize,
) -> Option<(f64, f64)>
where
    P: FnMut(f64, &mut [f64]) -> f64,
{
    let mut grad_buf = vec![0.0; dir.len()];
    let mut best: Option<(f64, f64)> = None;
    while *evals < MAX_LINE_EVALS {
        let alpha = 0.5 * (alpha_lo + alpha_hi);
        if (alpha_hi - alpha_lo).abs() < 1e-16 * alpha_lo.abs().max(1.0) {
            break;
        }
        *evals += 1;
        let value = phi(alpha, &mut grad_buf);
        let (value, slope) = if value.is_finite() {
            (value, dot(&grad_buf, dir))
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        if value > phi0 + WOLFE_C1 * alpha * dphi0 || value >= value_lo {
            alpha_hi = alpha;
        } else {
            if slope.abs() <= -WOLFE_C2 * dphi0 {
                grad_out.copy_from_slice(&grad_buf);
                return Some((alpha, value));
            }
            if slope * (alpha_hi - alpha_lo) >= 0.0 {
                alpha_hi = alpha_lo;
            }
            alpha_lo = alpha;
            value_lo = value;
            grad_out.copy_from_slice(&grad_buf);
            best = Some((alpha, value));
        }
    }
    // Accept the best Armijo point even if the curvature condition never
    // fired; progress beats a stall.
    if best.is_none() && value_lo < phi0 && alpha_lo > 0.0 {
        *evals += 1;
        let value = phi(alpha_lo, &mut grad_buf);
        if value.is_finite() {
            grad_out.copy_from_slice(&grad_buf);
            return Some((alpha_lo, value));
        }
    }
    best
}
