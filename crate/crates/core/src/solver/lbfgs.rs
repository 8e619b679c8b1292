//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Options {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub memory: usize,
    /// Largest ∞-norm of a single step.
    pub max_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    Stagnation,
    MaxIterations,
}

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective after every accepted step (starting value first).
    pub accepted: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which returns the value and gradient. Non-finite trial
/// values are treated as failed line-search steps.
pub(crate) fn minimize<F>(mut f: F, x0: Vec<f64>, opts: Options) -> Outcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut accepted = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut flat_steps = 0;
    let mut iterations = 0;

    let termination = loop {
        if inf_norm(&g) <= opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let quasi_newton = !history.is_empty();
        let mut dir = two_loop(&g, &history);
        if dot(&dir, &g) >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
        }
        let cap = opts.max_step / inf_norm(&dir).max(f64::MIN_POSITIVE);
        let step0 = if quasi_newton {
            1.0
        } else {
            1.0 / inf_norm(&g).max(1.0)
        }
        .min(cap);

        let mut step = search(&mut f, &x, fx, &g, &dir, step0);
        if step.is_none() && quasi_newton {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            let start = (1.0 / inf_norm(&g).max(1.0)).min(opts.max_step / inf_norm(&g));
            step = search(&mut f, &x, fx, &g, &dir, start);
        }
        let Some((x_new, f_new, g_new)) = step else {
            break Termination::Stagnation;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        if (fx - f_new).abs() <= 1e-15 * fx.abs().max(1.0) {
            flat_steps += 1;
        } else {
            flat_steps = 0;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        accepted.push(fx);
        if flat_steps >= 5 {
            break Termination::Stagnation;
        }
    };

    Outcome {
        grad_norm: inf_norm(&g),
        x,
        value: fx,
        iterations,
        termination,
        accepted,
    }
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

type Trial = (Vec<f64>, f64, Vec<f64>);

fn search<F>(f: &mut F, x: &[f64], fx: f64, g: &[f64], dir: &[f64], mut step: f64) -> Option<Trial>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let slope = dot(g, dir);
    for _ in 0..60 {
        let trial: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        let (ft, gt) = f(&trial);
        if ft.is_finite() && ft <= fx + 1e-4 * step * slope && gt.iter().all(|v| v.is_finite()) {
            return Some((trial, ft, gt));
        }
        step *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (v, g)
        };
        let out = minimize(
            f,
            vec![-1.2, 1.0],
            Options {
                max_iters: 500,
                grad_tol: 1e-8,
                memory: 8,
                max_step: 1e3,
            },
        );
        assert_eq!(out.termination, Termination::GradientTolerance);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
        assert!(out.accepted.windows(2).all(|w| w[1] <= w[0]));
    }
}
