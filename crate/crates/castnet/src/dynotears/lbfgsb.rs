//! Projected L-BFGS for box-constrained smooth minimization.
//!
//! Limited-memory BFGS directions (two-loop recursion) with gradient
//! projection for the active set and a backtracking Armijo search along the
//! projected path. This is the classic treatment for bound-constrained
//! quasi-Newton when variables only carry nonnegativity bounds, as in the
//! positive/negative weight split used by the structure learner.

/// Inclusive variable bounds; use infinities for free variables.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn nonneg(n: usize) -> Bounds {
        Bounds { lower: vec![0.0; n], upper: vec![f64::INFINITY; n] }
    }

    fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub history: usize,
    /// Stop when the infinity norm of the projected gradient drops below this.
    pub pg_tol: f64,
    /// Stop on relative objective stagnation.
    pub f_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { max_iters: 500, history: 10, pg_tol: 1e-7, f_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub projected_gradient_norm: f64,
}

/// Infinity norm of the projected gradient `P(x - g) - x`.
fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).clamp(bounds.lower[i], bounds.upper[i]) - x[i];
        norm = norm.max(step.abs());
    }
    norm
}

/// Minimize `f` over the box. `func` fills the gradient buffer and returns
/// the objective value.
pub fn minimize<F>(mut func: F, x0: &[f64], bounds: &Bounds, opts: &SolveOptions) -> Solution
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = func(&x, &mut g);

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut iterations = 0;
    for iter in 0..opts.max_iters {
        iterations = iter;
        let pg = projected_gradient_norm(&x, &g, bounds);
        if pg < opts.pg_tol {
            return Solution { x, f, iterations, projected_gradient_norm: pg };
        }

        // Active variables pinned at a bound with the gradient pushing
        // outward take no part in the quasi-Newton direction.
        const EPS_ACTIVE: f64 = 1e-12;
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (x[i] <= bounds.lower[i] + EPS_ACTIVE && g[i] > 0.0)
                    || (x[i] >= bounds.upper[i] - EPS_ACTIVE && g[i] < 0.0)
            })
            .collect();

        // Two-loop recursion on the reduced gradient.
        let mut q: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { g[i] }).collect();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for j in (0..k).rev() {
            let a = rho_hist[j] * dot(&s_hist[j], &q);
            alphas[j] = a;
            axpy(&mut q, -a, &y_hist[j]);
        }
        if k > 0 {
            let sy = 1.0 / rho_hist[k - 1];
            let yy = dot(&y_hist[k - 1], &y_hist[k - 1]);
            let gamma = sy / yy.max(1e-300);
            for v in q.iter_mut() {
                *v *= gamma;
            }
        }
        for j in 0..k {
            let b = rho_hist[j] * dot(&y_hist[j], &q);
            axpy(&mut q, alphas[j] - b, &s_hist[j]);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        // Fall back to steepest descent when the direction fails to descend.
        let mut descent = dot(&d, &g);
        if !descent.is_finite() || descent >= 0.0 {
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
            descent = dot(&d, &g);
            if descent >= 0.0 {
                break; // fully constrained stationary point
            }
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        // Backtracking Armijo search along the projected path.
        const C1: f64 = 1e-4;
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut f_new = f;
        for _ in 0..50 {
            for i in 0..n {
                x_new[i] = x[i] + alpha * d[i];
            }
            bounds.project(&mut x_new);
            f_new = func(&x_new, &mut g_new);
            // Sufficient decrease measured against the realized step.
            let gain: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
            if f_new.is_finite() && f_new <= f + C1 * gain && gain < 0.0 {
                accepted = true;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-16 {
                break;
            }
        }
        if !accepted {
            // Retry once from a clean memory with steepest descent.
            if !s_hist.is_empty() {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            break;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        let ss = dot(&s, &s);
        if sy > 1e-10 * ss.sqrt() * dot(&y, &y).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > opts.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }

        let f_prev = f;
        x = x_new.clone();
        g = g_new.clone();
        f = f_new;
        if (f_prev - f).abs() <= opts.f_tol * f_prev.abs().max(1.0) {
            break;
        }
    }
    let pg = projected_gradient_norm(&x, &g, bounds);
    Solution { x, f, iterations, projected_gradient_norm: pg }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}
