//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! Projected L-BFGS: variables sitting on a bound with the gradient pushing
//! outward are frozen for the step, the two-loop recursion supplies the search
//! direction on the rest, and a backtracking Armijo search runs along the
//! projected path.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        debug_assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        BoxBounds { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn at_bound(&self, x: &[f64], i: usize) -> bool {
        x[i] <= self.lower[i] || x[i] >= self.upper[i]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the projected gradient's largest component falls below this.
    pub grad_tol: f64,
    /// Stop when a step improves the objective by less than `f_tol * (1 + |f|)`.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iter: 200,
            memory: 8,
            grad_tol: 1e-6,
            f_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over `bounds` from `x0`. `f` returns the value and gradient; a
/// non-finite value marks an infeasible point and shortens the step.
pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &BoxBounds, opts: LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    if !fx.is_finite() {
        return Minimum {
            x,
            f: fx,
            iterations: 0,
            evaluations,
        };
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| {
                !((x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0))
            })
            .collect();
        let gf: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let pg = gf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pg < opts.grad_tol {
            break;
        }

        let mut d = two_loop(&gf, &mem);
        for i in 0..n {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if !(dot(&d, &g) < 0.0) {
            mem.clear();
            d = gf.iter().map(|v| -v).collect();
        }
        let mut t = if mem.is_empty() {
            (1.0 / d.iter().fold(0.0f64, |m, v| m.max(v.abs()))).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..50 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            bounds.project(&mut xn);
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            let (fn_, gn) = f(&xn);
            evaluations += 1;
            if fn_.is_finite() && fn_ <= fx + 1e-4 * dot(&g, &step) {
                accepted = Some((xn, fn_, gn, step));
                break;
            }
            t *= 0.5;
        }

        let Some((xn, fn_, gn, s)) = accepted else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let improvement = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        if improvement < opts.f_tol * (1.0 + fx.abs()) {
            break;
        }
    }

    Minimum {
        x,
        f: fx,
        iterations,
        evaluations,
    }
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

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn finds_unconstrained_minimum() {
        let b = BoxBounds::new(vec![-5.0, -5.0], vec![5.0, 5.0]);
        let m = minimize(rosenbrock, &[-1.2, 1.0], &b, LbfgsOptions::default());
        assert!((m.x[0] - 1.0).abs() < 1e-5, "{m:?}");
        assert!((m.x[1] - 1.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn respects_bounds() {
        // Minimum of (x-3)^2 + (y+2)^2 on [0,1]^2 is the corner (1, 0).
        let f = |x: &[f64]| {
            (
                (x[0] - 3.0).powi(2) + (x[1] + 2.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 2.0)],
            )
        };
        let b = BoxBounds::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let m = minimize(f, &[0.5, 0.5], &b, LbfgsOptions::default());
        assert_eq!(m.x, vec![1.0, 0.0]);
    }

    #[test]
    fn infeasible_start_returns_immediately() {
        let b = BoxBounds::new(vec![0.0], vec![1.0]);
        let m = minimize(|_| (f64::INFINITY, vec![0.0]), &[0.5], &b, LbfgsOptions::default());
        assert_eq!(m.iterations, 0);
        assert!(m.f.is_infinite());
    }
}
