//! Limited-memory BFGS: two-loop recursion with an Armijo backtracking line
//! search. The accepted step is refined by one quadratic interpolation when
//! that lowers the objective further, which makes the search exact on
//! quadratics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::numcore::{axpy, dot};

const CURVATURE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Iterations per call of [`Lbfgs::minimize`].
    pub max_iters: usize,
    /// Initial trial step of the line search.
    pub step: f64,
    pub c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Stop when the largest gradient entry falls below this.
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 10,
            step: 0.05,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 20,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LbfgsReport {
    pub iterations: usize,
    pub f_start: f64,
    pub f_end: f64,
    /// Objective after every accepted step.
    pub accepted: Vec<f64>,
    pub line_search_failed: bool,
    pub converged: bool,
}

/// Optimizer state; the curvature memory persists across calls.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    pub cfg: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
}

impl Lbfgs {
    pub fn new(cfg: LbfgsConfig) -> Self {
        Self {
            cfg,
            s: VecDeque::new(),
            y: VecDeque::new(),
        }
    }

    pub fn memory_len(&self) -> usize {
        self.s.len()
    }

    /// `−H·g` by the two-loop recursion with `H₀ = γI`, `γ = sᵀy / yᵀy`
    /// of the newest pair.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let rho: Vec<f64> = self
            .s
            .iter()
            .zip(&self.y)
            .map(|(s, y)| 1.0 / dot(s, y))
            .collect();
        let mut alpha = vec![0.0; self.s.len()];
        for i in (0..self.s.len()).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            axpy(-alpha[i], &self.y[i], &mut q);
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..self.s.len() {
            let beta = rho[i] * dot(&self.y[i], &q);
            axpy(alpha[i] - beta, &self.s[i], &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn remember(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if dot(&s, &y) <= 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            return;
        }
        if self.s.len() == self.cfg.memory {
            self.s.pop_front();
            self.y.pop_front();
        }
        if self.cfg.memory > 0 {
            self.s.push_back(s);
            self.y.push_back(y);
        }
    }

    /// Runs up to `max_iters` iterations on `f`, which returns the objective
    /// and its gradient. `x` always holds the last accepted iterate.
    pub fn minimize<F>(&mut self, x: &mut [f64], mut f: F) -> LbfgsReport
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let (mut fx, mut g) = f(x);
        let mut report = LbfgsReport {
            f_start: fx,
            f_end: fx,
            ..LbfgsReport::default()
        };
        for _ in 0..self.cfg.max_iters {
            if g.iter().all(|v| v.abs() < self.cfg.grad_tol) {
                report.converged = true;
                break;
            }
            let mut d = self.direction(&g);
            let mut gd = dot(&g, &d);
            if !(gd < 0.0) {
                self.s.clear();
                self.y.clear();
                d = g.iter().map(|v| -v).collect();
                gd = dot(&g, &d);
            }
            let Some((t, fx_new, g_new)) = self.line_search(x, fx, gd, &d, &mut f) else {
                report.line_search_failed = true;
                break;
            };
            let s: Vec<f64> = d.iter().map(|v| t * v).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            axpy(1.0, &s, x);
            self.remember(s, y);
            fx = fx_new;
            g = g_new;
            report.iterations += 1;
            report.accepted.push(fx);
        }
        report.f_end = fx;
        report
    }

    fn line_search<F>(
        &self,
        x: &[f64],
        fx: f64,
        gd: f64,
        d: &[f64],
        f: &mut F,
    ) -> Option<(f64, f64, Vec<f64>)>
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let at = |t: f64| -> Vec<f64> { x.iter().zip(d).map(|(a, b)| a + t * b).collect() };
        let armijo = |t: f64, ft: f64| ft.is_finite() && ft <= fx + self.cfg.c1 * t * gd;
        let mut t = self.cfg.step;
        for attempt in 0..=self.cfg.max_backtracks {
            let (ft, gt) = f(&at(t));
            if !armijo(t, ft) {
                t *= self.cfg.backtrack;
                continue;
            }
            let mut best = (t, ft, gt);
            // Minimizer of the parabola through f(0), f'(0) and f(t).
            let curv = ft - fx - gd * t;
            if curv > 0.0 {
                let tq = -gd * t * t / (2.0 * curv);
                if tq.is_finite() && tq > 0.0 && tq != t {
                    let (fq, gq) = f(&at(tq));
                    if fq < best.1 && armijo(tq, fq) {
                        best = (tq, fq, gq);
                    }
                }
            }
            // A full first step that is still descending steeply was too
            // short: expand while the objective keeps falling.
            if attempt == 0 {
                for _ in 0..self.cfg.max_backtracks {
                    if dot(&best.2, d) >= CURVATURE * gd {
                        break;
                    }
                    let t2 = 2.0 * best.0;
                    let (f2, g2) = f(&at(t2));
                    if !(armijo(t2, f2) && f2 <= best.1) {
                        break;
                    }
                    best = (t2, f2, g2);
                }
            }
            return Some(best);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad<'a>(a: &'a [f64], c: &'a [f64]) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + 'a {
        move |x: &[f64]| {
            let g: Vec<f64> = x
                .iter()
                .zip(a)
                .zip(c)
                .map(|((x, a), c)| a * (x - c))
                .collect();
            let f = x
                .iter()
                .zip(a)
                .zip(c)
                .map(|((x, a), c)| 0.5 * a * (x - c) * (x - c))
                .sum();
            (f, g)
        }
    }

    #[test]
    fn optimal_point_is_left_unchanged() {
        let (a, c) = (vec![1.0, 3.0], vec![0.5, -2.0]);
        let mut x = c.clone();
        let rep = Lbfgs::new(LbfgsConfig::default()).minimize(&mut x, quad(&a, &c));
        assert_eq!(x, c);
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn separable_quadratic_converges() {
        let (a, c) = (vec![1.0, 4.0, 9.0], vec![1.0, -1.0, 2.0]);
        let mut x = vec![0.0; 3];
        Lbfgs::new(LbfgsConfig::default()).minimize(&mut x, quad(&a, &c));
        for (xi, ci) in x.iter().zip(&c) {
            assert!((xi - ci).abs() < 1e-8);
        }
    }

    #[test]
    fn accepted_values_never_increase() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (v, g)
        };
        let mut x = vec![-1.2, 1.0];
        let mut opt = Lbfgs::new(LbfgsConfig {
            max_iters: 200,
            ..LbfgsConfig::default()
        });
        let rep = opt.minimize(&mut x, f);
        let mut prev = rep.f_start;
        for &v in &rep.accepted {
            assert!(v <= prev);
            prev = v;
        }
        assert!(rep.f_end < 1e-8, "{}", rep.f_end);
    }

    #[test]
    fn failed_search_keeps_iterate() {
        // Gradient points the wrong way: no step can satisfy Armijo.
        let f = |x: &[f64]| (x[0], vec![-1.0]);
        let mut x = vec![0.0];
        let rep = Lbfgs::new(LbfgsConfig::default()).minimize(&mut x, f);
        assert!(rep.line_search_failed);
        assert_eq!(x, vec![0.0]);
    }
}
