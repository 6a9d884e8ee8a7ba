//! Limited-memory BFGS with two-loop recursion and Armijo backtracking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::VecDeque;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;
const CURVATURE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    /// Best iterate found (lowest objective seen).
    pub x: Tensor,
    /// Objective at `x`; never exceeds the objective at the start point.
    pub objective: f64,
    /// Outer iterations performed.
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Minimize a differentiable scalar objective. The closure receives a
/// candidate point and returns the objective value together with its gradient
/// (same shape as the point). Terminates when the gradient infinity norm
/// drops below `grad_tol` or after `max_iters` accepted iterations.
pub fn lbfgs_minimize(
    mut objective: impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
    x0: &Tensor,
    memory: usize,
    max_iters: usize,
    grad_tol: f64,
) -> Result<LbfgsResult> {
    if memory == 0 {
        return Err(Error::param("lbfgs_minimize", "memory must be at least 1"));
    }
    let shape = x0.shape().to_vec();
    let to_tensor = |x: &[f64]| -> Result<Tensor> {
        Tensor::from_vec(shape.clone(), x.iter().map(|&v| v as f32).collect())
    };
    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (f, g) = objective(&to_tensor(x)?)?;
        if !f.is_finite() {
            return Err(Error::numeric("lbfgs_minimize", format!("objective value {f}")));
        }
        if g.shape() != shape.as_slice() {
            return Err(Error::contract(
                "lbfgs_minimize",
                format!("gradient shape {:?} vs point shape {:?}", g.shape(), shape),
            ));
        }
        let gd: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
        if gd.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("lbfgs_minimize", "non-finite gradient"));
        }
        Ok((f, gd))
    };

    let mut x: Vec<f64> = x0.data().iter().map(|&v| v as f64).collect();
    let (mut f, mut g) = eval(&x)?;
    let mut best_x = x.clone();
    let mut best_f = f;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0usize;

    while iterations < max_iters && inf_norm(&g) >= grad_tol {
        // Two-loop recursion: d = -H_k g with the implicit inverse Hessian.
        let mut q = g.clone();
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
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|&v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Curvature information went stale; fall back to steepest descent.
            d = g.iter().map(|&v| -v).collect();
            slope = -dot(&g, &g);
            history.clear();
        }

        let mut alpha = 1.0f64;
        let mut accepted = None;
        while alpha >= MIN_STEP {
            let cand: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let (fc, gc) = eval(&cand)?;
            if fc <= f + ARMIJO_C * alpha * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break; // Line search exhausted; keep the best point found so far.
        };
        iterations += 1;

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        } else {
            // Negative curvature along the step: the stored pairs no longer
            // describe the local Hessian, and keeping them can lock the
            // iteration into repeating the same tiny step. Start fresh.
            history.clear();
        }
        x = xn;
        f = fn_;
        g = gn;
        if f < best_f {
            best_f = f;
            best_x = x.clone();
        }
    }
    Ok(LbfgsResult { x: to_tensor(&best_x)?, objective: best_f, iterations })
}
