use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    pub history: usize,
    pub max_line_search: usize,
    /// Stop once the gradient 2-norm falls below this.
    pub gtol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iter: 80, history: 50, max_line_search: 50, gtol: 1e-8, c1: 1e-4, c2: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LbfgsResult {
    #[serde(skip)]
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub f_history: Vec<f64>,
    pub warnings: Vec<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Probe {
    alpha: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, F> {
    fun: &'a mut F,
    x: &'a [f64],
    p: &'a [f64],
    evals: usize,
    budget: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Probe {
        self.evals += 1;
        let x: Vec<f64> = self.x.iter().zip(self.p).map(|(a, b)| a + alpha * b).collect();
        let mut g = vec![0.0; x.len()];
        let f = (self.fun)(&x, &mut g);
        let d = dot(&g, self.p);
        Probe { alpha, f, d, x, g }
    }

    fn exhausted(&self) -> bool {
        self.evals >= self.budget
    }
}

/// Minimizer of the cubic through two points with derivatives, if it lies inside.
fn cubic_min(a: &Probe, b: &Probe) -> Option<f64> {
    let d1 = a.d + b.d - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.d * b.d;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.d + d2 - d1) / (b.d - a.d + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Strong-Wolfe line search (bracketing then zoom with cubic interpolation).
fn strong_wolfe<F: FnMut(&[f64], &mut [f64]) -> f64>(
    ls: &mut LineSearch<'_, F>,
    f0: f64,
    d0: f64,
    alpha0: f64,
    c1: f64,
    c2: f64,
) -> (Option<Probe>, Option<Probe>) {
    let zero = Probe { alpha: 0.0, f: f0, d: d0, x: vec![], g: vec![] };
    let mut prev = zero;
    let mut alpha = alpha0;
    let mut best: Option<Probe> = None;
    let mut keep_best = |p: &Probe, best: &mut Option<Probe>| {
        if p.f.is_finite() && p.f < best.as_ref().map_or(f0, |b| b.f) {
            *best = Some(Probe { alpha: p.alpha, f: p.f, d: p.d, x: p.x.clone(), g: p.g.clone() });
        }
    };
    let mut first = true;
    loop {
        if ls.exhausted() {
            return (None, best);
        }
        let cur = ls.eval(alpha);
        keep_best(&cur, &mut best);
        if !cur.f.is_finite() || cur.f > f0 + c1 * alpha * d0 || (!first && cur.f >= prev.f) {
            return zoom(ls, prev, cur, f0, d0, c1, c2, best, &mut keep_best);
        }
        if cur.d.abs() <= -c2 * d0 {
            return (Some(cur), best);
        }
        if cur.d >= 0.0 {
            return zoom(ls, cur, prev, f0, d0, c1, c2, best, &mut keep_best);
        }
        first = false;
        alpha *= 2.0;
        prev = cur;
    }
}

#[allow(clippy::too_many_arguments)]
fn zoom<F: FnMut(&[f64], &mut [f64]) -> f64>(
    ls: &mut LineSearch<'_, F>,
    mut lo: Probe,
    mut hi: Probe,
    f0: f64,
    d0: f64,
    c1: f64,
    c2: f64,
    mut best: Option<Probe>,
    keep_best: &mut impl FnMut(&Probe, &mut Option<Probe>),
) -> (Option<Probe>, Option<Probe>) {
    loop {
        if ls.exhausted() || (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            return (None, best);
        }
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let guard = 0.1 * (b - a);
        let alpha = match (hi.f.is_finite()).then(|| cubic_min(&lo, &hi)).flatten() {
            Some(t) if t > a + guard && t < b - guard => t,
            _ => 0.5 * (a + b),
        };
        let cur = ls.eval(alpha);
        keep_best(&cur, &mut best);
        if !cur.f.is_finite() || cur.f > f0 + c1 * alpha * d0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.d.abs() <= -c2 * d0 {
                return (Some(cur), best);
            }
            if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
}

/// Limited-memory BFGS. `fun(x, grad)` returns `f(x)` and writes `∇f(x)`.
pub fn lbfgs<F: FnMut(&[f64], &mut [f64]) -> f64>(mut fun: F, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = fun(&x, &mut g);
    let mut evals = 1;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut res = LbfgsResult {
        x: vec![],
        f,
        grad_norm: norm(&g),
        iterations: 0,
        evaluations: 0,
        converged: false,
        f_history: vec![f],
        warnings: vec![],
    };
    for it in 0..cfg.max_iter {
        let gn = norm(&g);
        if gn <= cfg.gtol {
            res.converged = true;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut d0 = dot(&g, &p);
        if !(d0 < 0.0) {
            hist.clear();
            p = g.iter().map(|v| -v).collect();
            d0 = -gn * gn;
        }
        let alpha0 = if hist.is_empty() { (1.0 / gn).min(1.0) } else { 1.0 };
        let mut ls = LineSearch { fun: &mut fun, x: &x, p: &p, evals: 0, budget: cfg.max_line_search };
        let (found, best) = strong_wolfe(&mut ls, f, d0, alpha0, cfg.c1, cfg.c2);
        evals += ls.evals;
        res.iterations = it + 1;
        let step = match (found, best) {
            (Some(p), _) => p,
            (None, Some(b)) => {
                res.warnings.push(format!("line search failed at iteration {it}; keeping best point"));
                b
            }
            (None, None) => {
                res.warnings.push(format!("line search failed at iteration {it}; no decrease"));
                break;
            }
        };
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if hist.len() == cfg.history.max(1) {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x = step.x;
        g = step.g;
        f = step.f;
        res.f_history.push(f);
    }
    res.grad_norm = norm(&g);
    res.converged |= res.grad_norm <= cfg.gtol;
    res.f = f;
    res.x = x;
    res.evaluations = evals;
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let cfg = LbfgsConfig { max_iter: 500, history: 10, gtol: 1e-9, ..Default::default() };
        let r = lbfgs(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &[-1.2, 1.0],
            &cfg,
        );
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_memory_exact_search_quadratic_in_dim_steps() {
        let n = 12;
        let diag: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let cfg = LbfgsConfig { max_iter: n + 2, history: n, gtol: 1e-10, c2: 1e-8, ..Default::default() };
        let r = lbfgs(
            |x, g| {
                let mut f = 0.0;
                for i in 0..n {
                    g[i] = diag[i] * (x[i] - 1.0);
                    f += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
                }
                f
            },
            &vec![0.0; n],
            &cfg,
        );
        assert!(r.converged && r.iterations <= n + 1, "{} iterations", r.iterations);
    }

    #[test]
    fn history_is_monotone() {
        let r = lbfgs(|x, g| { g[0] = 4.0 * x[0].powi(3); x[0].powi(4) }, &[3.0], &LbfgsConfig::default());
        assert!(r.f_history.windows(2).all(|w| w[1] <= w[0]));
    }
}
