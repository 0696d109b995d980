//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Stop once the Euclidean norm of the gradient falls below this value.
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-7,
            max_iter: 500,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &SolverConfig, stage: &str) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut value = f(&x, &mut g);
    if !value.is_finite() {
        return Err(Error::Diverged {
            stage: stage.to_string(),
            iteration: 0,
            value,
        });
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut alpha_buf = vec![0.0; cfg.memory];

    for iter in 0..cfg.max_iter {
        let gnorm = norm(&g);
        if gnorm <= cfg.tol {
            return Ok(Minimum {
                x,
                value,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            });
        }

        // two-loop recursion: dir = -H g
        dir.copy_from_slice(&g);
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[i] = a;
            for (d, yv) in dir.iter_mut().zip(y) {
                *d -= a * yv;
            }
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        } else {
            let scale = 1.0 / gnorm.max(1.0);
            dir.iter_mut().for_each(|d| *d *= scale);
        }
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            for (d, sv) in dir.iter_mut().zip(s) {
                *d += (alpha_buf[i] - b) * sv;
            }
        }
        dir.iter_mut().for_each(|d| *d = -*d);

        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // not a descent direction: restart from steepest descent
            history.clear();
            let scale = 1.0 / gnorm.max(1.0);
            for (d, gv) in dir.iter_mut().zip(&g) {
                *d = -gv * scale;
            }
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let v = f(&x_new, &mut g_new);
            if v.is_finite() && v <= value + 1e-4 * step * slope {
                value_update(&mut history, &x, &x_new, &g, &g_new, cfg.memory);
                value = v;
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    iteration: iter,
                    value,
                });
            }
            // no representable decrease left along the search direction
            let gnorm = norm(&g);
            return Ok(Minimum {
                x,
                value,
                grad_norm: gnorm,
                iterations: iter,
                converged: gnorm <= cfg.tol,
            });
        }
    }
    let gnorm = norm(&g);
    Ok(Minimum {
        x,
        value,
        grad_norm: gnorm,
        iterations: cfg.max_iter,
        converged: gnorm <= cfg.tol,
    })
}

fn value_update(
    history: &mut VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    x: &[f64],
    x_new: &[f64],
    g: &[f64],
    g_new: &[f64],
    memory: usize,
) {
    let s: Vec<f64> = x_new.iter().zip(x).map(|(a, b)| a - b).collect();
    let y: Vec<f64> = g_new.iter().zip(g).map(|(a, b)| a - b).collect();
    let sy = dot(&s, &y);
    if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
        if history.len() == memory {
            history.pop_front();
        }
        history.push_back((s, y, 1.0 / sy));
    }
}
