//! Structure learning for time series: jointly estimates a contemporaneous
//! (intra-slice) weight matrix `C` constrained to be acyclic and time-lagged
//! (inter-slice) matrices `A_1..A_P`, by minimizing a least-squares score
//! with L1 sparsity under the smooth acyclicity penalty
//! `h(C) = tr(exp(C o C)) - N`, driven to zero by an augmented Lagrangian.
//!
//! The nonsmooth L1 terms are handled by splitting every weight into a
//! positive and negative part and solving the smooth bound-constrained inner
//! problems with projected L-BFGS. Lagged edges point forward in time, so no
//! acyclicity constraint applies to the `A_i`.

pub mod expm;
pub mod lbfgsb;

use lbfgsb::{Bounds, SolveOptions};
use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynoError {
    #[error("expected square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dataset is empty or inconsistent: {0}")]
    Contract(String),
    #[error("solver did not converge: h = {h:.3e} with rho at cap {rho:.3e}")]
    NonConvergence { h: f64, rho: f64 },
    #[error("thresholded intra-slice graph still has a cycle: {cycle:?}")]
    CyclicAfterThreshold { cycle: Vec<usize> },
    #[error("graph file parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DynoError>;

/// Acyclicity tolerance below which a weighted graph counts as a DAG.
pub const H_TOL: f64 = 1e-8;

/// Regression view of a series for lag-`P` structural fitting: `X` holds the
/// current slices row-wise and `S` the concatenated `P` lagged slices.
#[derive(Debug, Clone)]
pub struct SvarDataset {
    pub x: Array2<f64>,
    pub s: Array2<f64>,
    pub p: usize,
}

impl SvarDataset {
    /// Build from a steps x nodes series.
    pub fn from_series(values: ArrayView2<f64>, p: usize) -> Result<SvarDataset> {
        let (t, n) = values.dim();
        if p == 0 {
            return Err(DynoError::Contract("lag order must be >= 1".into()));
        }
        if t <= p {
            return Err(DynoError::Contract(format!("series of {t} steps too short for P={p}")));
        }
        let samples = t - p;
        let mut x = Array2::zeros((samples, n));
        let mut s = Array2::zeros((samples, n * p));
        for row in 0..samples {
            let tcur = row + p;
            for j in 0..n {
                x[[row, j]] = values[[tcur, j]];
            }
            for lag in 1..=p {
                for j in 0..n {
                    s[[row, (lag - 1) * n + j]] = values[[tcur - lag, j]];
                }
            }
        }
        Ok(SvarDataset { x, s, p })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }
}

/// Learned (or ground-truth) causal graphs: intra-slice `C` and one lagged
/// matrix per lag, plus the sparsification threshold that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraphSet {
    pub c: Array2<f64>,
    pub a_lag: Vec<Array2<f64>>,
    pub threshold: f64,
}

impl CausalGraphSet {
    pub fn new(c: Array2<f64>, a_lag: Vec<Array2<f64>>, threshold: f64) -> Result<CausalGraphSet> {
        let n = c.nrows();
        if c.ncols() != n {
            return Err(DynoError::NotSquare { rows: c.nrows(), cols: c.ncols() });
        }
        for a in &a_lag {
            if a.nrows() != n || a.ncols() != n {
                return Err(DynoError::NotSquare { rows: a.nrows(), cols: a.ncols() });
            }
        }
        if a_lag.is_empty() {
            return Err(DynoError::Contract("at least one lag matrix required".into()));
        }
        for i in 0..n {
            if c[[i, i]] != 0.0 {
                return Err(DynoError::Contract(format!("diagonal of C must be zero (node {i})")));
            }
        }
        if let Some(cycle) = find_cycle(&c) {
            return Err(DynoError::CyclicAfterThreshold { cycle });
        }
        Ok(CausalGraphSet { c, a_lag, threshold })
    }

    pub fn n_nodes(&self) -> usize {
        self.c.nrows()
    }

    pub fn lag_order(&self) -> usize {
        self.a_lag.len()
    }

    pub fn intra_edge_count(&self) -> usize {
        self.c.iter().filter(|v| **v != 0.0).count()
    }

    pub fn inter_edge_count(&self) -> usize {
        self.a_lag.iter().map(|a| a.iter().filter(|v| **v != 0.0).count()).sum()
    }

    /// Text serialization: header `N P threshold`, row-major matrices
    /// (`C`, then `A_1..A_P`), then an edge list (`src dst lag weight`,
    /// lag 0 = intra-slice).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let n = self.n_nodes();
        let mut out = format!("{} {} {}\n", n, self.lag_order(), self.threshold);
        let write_matrix = |m: &Array2<f64>, out: &mut String| {
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        };
        write_matrix(&self.c, &mut out);
        for a in &self.a_lag {
            write_matrix(a, &mut out);
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.c[[i, j]] != 0.0 {
                    edges.push((i, j, 0usize, self.c[[i, j]]));
                }
            }
        }
        for (lag, a) in self.a_lag.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    if a[[i, j]] != 0.0 {
                        edges.push((i, j, lag + 1, a[[i, j]]));
                    }
                }
            }
        }
        out.push_str(&format!("edges {}\n", edges.len()));
        for (src, dst, lag, w) in edges {
            out.push_str(&format!("{src} {dst} {lag} {w}\n"));
        }
        std::fs::write(path, out).map_err(|e| DynoError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &std::path::Path) -> Result<CausalGraphSet> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DynoError::Io { path: path.display().to_string(), source: e })?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(DynoError::Parse { line: 1, detail: "empty file".into() })?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 {
            return Err(DynoError::Parse { line: 1, detail: "want `N P threshold`".into() });
        }
        let parse_err = |line: usize, e: String| DynoError::Parse { line, detail: e };
        let n: usize = head[0].parse().map_err(|e| parse_err(1, format!("{e}")))?;
        let p: usize = head[1].parse().map_err(|e| parse_err(1, format!("{e}")))?;
        let threshold: f64 = head[2].parse().map_err(|e| parse_err(1, format!("{e}")))?;
        let read_matrix = |lines: &mut std::iter::Enumerate<std::str::Lines>| -> Result<Array2<f64>> {
            let mut m = Array2::zeros((n, n));
            for r in 0..n {
                let (lineno, line) = lines
                    .next()
                    .ok_or(DynoError::Parse { line: 0, detail: "unexpected end of file".into() })?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() != n {
                    return Err(parse_err(lineno + 1, format!("want {n} values, got {}", vals.len())));
                }
                for (cidx, v) in vals.iter().enumerate() {
                    m[[r, cidx]] = v.parse().map_err(|e| parse_err(lineno + 1, format!("{e}")))?;
                }
            }
            Ok(m)
        };
        let c = read_matrix(&mut lines)?;
        let mut a_lag = Vec::with_capacity(p);
        for _ in 0..p {
            a_lag.push(read_matrix(&mut lines)?);
        }
        CausalGraphSet::new(c, a_lag, threshold)
    }
}

/// Acyclicity score `h(C) = tr(exp(C o C)) - N` and its gradient
/// `exp(C o C)^T o 2C`. Zero exactly on acyclic weighted supports.
pub fn acyclicity(c: &ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(DynoError::NotSquare { rows: c.nrows(), cols: c.ncols() });
    }
    let hadamard = c.mapv(|v| v * v);
    let e = expm::expm(&hadamard);
    let h = e.diag().sum() - n as f64;
    let grad = &e.t().to_owned() * &c.mapv(|v| 2.0 * v);
    Ok((h.max(0.0), grad))
}

/// Squared-loss score with L1 penalties and the smooth-part gradients
/// (`grad_c`, `grad_a`); the L1 terms enter the value only, their
/// nonsmoothness being handled by the solver's weight split.
pub fn svar_loss(
    c: &Array2<f64>,
    a_stack: &Array2<f64>,
    data: &SvarDataset,
    lambda_c: f64,
    lambda_a: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = data.n_nodes();
    let samples = data.n_samples();
    if samples == 0 {
        return Err(DynoError::Contract("no samples".into()));
    }
    if c.dim() != (n, n) || a_stack.dim() != (n * data.p, n) {
        return Err(DynoError::Contract(format!(
            "shape mismatch: C {:?}, A {:?} for N={n}, P={}",
            c.dim(),
            a_stack.dim(),
            data.p
        )));
    }
    let resid = &data.x - &data.x.dot(c) - &data.s.dot(a_stack);
    let inv_n = 1.0 / samples as f64;
    let fit = 0.5 * inv_n * resid.iter().map(|v| v * v).sum::<f64>();
    let l1 = lambda_c * c.iter().map(|v| v.abs()).sum::<f64>()
        + lambda_a * a_stack.iter().map(|v| v.abs()).sum::<f64>();
    let grad_c = data.x.t().dot(&resid).mapv(|v| -inv_n * v);
    let grad_a = data.s.t().dot(&resid).mapv(|v| -inv_n * v);
    Ok((fit + l1, grad_c, grad_a))
}

/// Augmented-Lagrangian schedule and tolerances for [`fit`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub lambda_c: f64,
    pub lambda_a: f64,
    /// Edge magnitudes below this are zeroed after optimization.
    pub threshold: f64,
    pub h_tol: f64,
    pub rho_max: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Center variables and apply one shared scale before fitting. Weights
    /// stay in original units; per-variable rescaling is deliberately avoided
    /// because it erases the noise-variance asymmetry that orients edges.
    pub standardize: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda_c: 0.05,
            lambda_a: 0.05,
            threshold: 0.1,
            h_tol: H_TOL,
            rho_max: 1e16,
            max_outer: 100,
            max_inner: 500,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub graphs: CausalGraphSet,
    /// Acyclicity value of the continuous (pre-threshold) solution.
    pub h: f64,
    pub rho: f64,
    pub alpha_l: f64,
    pub outer_iterations: usize,
}

/// Learn `C` and `A_1..A_P` from data.
pub fn fit(data: &SvarDataset, config: &SolverConfig) -> Result<FitResult> {
    if config.lambda_c < 0.0 || config.lambda_a < 0.0 {
        return Err(DynoError::Contract("lambda_C and lambda_A must be >= 0".into()));
    }
    let n = data.n_nodes();
    let p = data.p;
    if data.n_samples() < 2 {
        return Err(DynoError::Contract("need at least two samples".into()));
    }

    // Optionally center columns and apply one shared scale. A single scale
    // leaves the weights in original units and keeps the relative noise
    // variances that identify edge directions, while making the L1 weights
    // comparable across datasets.
    let work = centered_scaled_copy(data, config.standardize);

    let nn = n * n;
    let na = n * n * p;
    let dim = 2 * (nn + na);
    let mut theta = vec![0.0; dim];
    let mut bounds = Bounds::nonneg(dim);
    for i in 0..n {
        // both halves of the C diagonal are pinned at zero
        bounds.upper[i * n + i] = 0.0;
        bounds.upper[nn + i * n + i] = 0.0;
    }

    let unpack = |theta: &[f64]| -> (Array2<f64>, Array2<f64>) {
        let mut c = Array2::zeros((n, n));
        for i in 0..nn {
            c[[i / n, i % n]] = theta[i] - theta[nn + i];
        }
        let mut a = Array2::zeros((n * p, n));
        for i in 0..na {
            a[[i / n, i % n]] = theta[2 * nn + i] - theta[2 * nn + na + i];
        }
        (c, a)
    };

    let mut alpha_l = 0.0_f64;
    let mut rho = 1.0_f64;
    let mut h_val = f64::INFINITY;
    let mut outer_iterations = 0;

    let inner_opts = SolveOptions { max_iters: config.max_inner, ..SolveOptions::default() };
    for outer in 0..config.max_outer {
        outer_iterations = outer + 1;
        let h_new = loop {
            let objective = |th: &[f64], grad: &mut [f64]| -> f64 {
                let (c, a) = unpack(th);
                let (loss, grad_c, grad_a) =
                    svar_loss(&c, &a, &work, config.lambda_c, config.lambda_a)
                        .expect("shapes fixed by construction");
                let (h, grad_h) = acyclicity(&c.view()).expect("square by construction");
                let mult = alpha_l + rho * h;
                let value = loss + alpha_l * h + 0.5 * rho * h * h;
                for i in 0..nn {
                    let g = grad_c[[i / n, i % n]] + mult * grad_h[[i / n, i % n]];
                    grad[i] = g + config.lambda_c;
                    grad[nn + i] = -g + config.lambda_c;
                }
                for i in 0..na {
                    let g = grad_a[[i / n, i % n]];
                    grad[2 * nn + i] = g + config.lambda_a;
                    grad[2 * nn + na + i] = -g + config.lambda_a;
                }
                value
            };
            let sol = lbfgsb::minimize(objective, &theta, &bounds, &inner_opts);
            let (c, _) = unpack(&sol.x);
            let h_candidate = acyclicity(&c.view())?.0;
            if h_candidate > 0.25 * h_val && rho < config.rho_max {
                rho *= 10.0;
            } else {
                theta = sol.x;
                break h_candidate;
            }
        };
        h_val = h_new;
        alpha_l += rho * h_val;
        if h_val <= config.h_tol || rho >= config.rho_max {
            break;
        }
    }
    if h_val > config.h_tol && rho >= config.rho_max {
        return Err(DynoError::NonConvergence { h: h_val, rho });
    }

    let (c, a) = unpack(&theta);
    let a_lag: Vec<Array2<f64>> = (0..p)
        .map(|lag| a.slice(ndarray::s![lag * n..(lag + 1) * n, ..]).to_owned())
        .collect();
    let continuous = CausalGraphSet { c: c.clone(), a_lag: a_lag.clone(), threshold: 0.0 };
    let graphs = threshold_graphs(&continuous, config.threshold)?;
    Ok(FitResult { graphs, h: h_val, rho, alpha_l, outer_iterations })
}

/// Center each variable and divide everything by the mean per-node standard
/// deviation. The shared scale cancels out of the learned weights, so they
/// stay in original units.
fn centered_scaled_copy(data: &SvarDataset, enabled: bool) -> SvarDataset {
    if !enabled {
        return data.clone();
    }
    let n = data.n_nodes();
    let mut x = data.x.clone();
    let mut s = data.s.clone();
    let mut means = vec![0.0; n];
    let mut scale = 0.0;
    for j in 0..n {
        let col = x.column(j);
        let mean = col.sum() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        means[j] = mean;
        scale += var.sqrt();
    }
    let scale = (scale / n as f64).max(1e-12);
    for j in 0..n {
        for v in x.column_mut(j).iter_mut() {
            *v = (*v - means[j]) / scale;
        }
        for lag in 0..data.p {
            for v in s.column_mut(lag * n + j).iter_mut() {
                *v = (*v - means[j]) / scale;
            }
        }
    }
    SvarDataset { x, s, p: data.p }
}

/// Zero out entries below `tau` in magnitude and re-verify acyclicity of the
/// intra-slice support.
pub fn threshold_graphs(g: &CausalGraphSet, tau: f64) -> Result<CausalGraphSet> {
    if tau < 0.0 {
        return Err(DynoError::Contract("threshold must be >= 0".into()));
    }
    let clip = |m: &Array2<f64>| m.mapv(|v| if v.abs() < tau { 0.0 } else { v });
    let c = clip(&g.c);
    if let Some(cycle) = find_cycle(&c) {
        return Err(DynoError::CyclicAfterThreshold { cycle });
    }
    let (h, _) = acyclicity(&c.view())?;
    if h > H_TOL {
        return Err(DynoError::NonConvergence { h, rho: f64::NAN });
    }
    Ok(CausalGraphSet {
        c,
        a_lag: g.a_lag.iter().map(&clip).collect(),
        threshold: tau,
    })
}

/// Kahn's algorithm; `None` when the support is acyclic.
pub fn find_cycle(c: &Array2<f64>) -> Option<Vec<usize>> {
    let n = c.nrows();
    let mut indegree = vec![0usize; n];
    for j in 0..n {
        for i in 0..n {
            if i != j && c[[i, j]] != 0.0 {
                indegree[j] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut removed = vec![false; n];
    let mut seen = 0;
    while let Some(u) = queue.pop() {
        removed[u] = true;
        seen += 1;
        for v in 0..n {
            if v != u && c[[u, v]] != 0.0 && !removed[v] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    queue.push(v);
                }
            }
        }
    }
    if seen == n {
        return None;
    }
    // Walk predecessors among the remaining nodes: each of them kept a
    // positive indegree, so the walk must revisit a node and close a cycle.
    let start = (0..n).find(|&i| !removed[i]).unwrap();
    let mut path = vec![start];
    let mut cur = start;
    loop {
        let pred = (0..n)
            .find(|&u| !removed[u] && u != cur && c[[u, cur]] != 0.0)
            .expect("remaining nodes keep a remaining predecessor");
        if let Some(pos) = path.iter().position(|&x| x == pred) {
            let mut cycle = vec![pred];
            cycle.extend(path[pos..].iter().rev());
            return Some(cycle);
        }
        path.push(pred);
        cur = pred;
    }
}

/// Precision/recall/F1 of a recovered edge support against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeScore {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn edge_f1(estimate: &Array2<f64>, truth: &Array2<f64>, skip_diagonal: bool) -> EdgeScore {
    let n = estimate.nrows();
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if skip_diagonal && i == j {
                continue;
            }
            let est = estimate[[i, j]] != 0.0;
            let tru = truth[[i, j]] != 0.0;
            match (est, tru) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fnn == 0 { 1.0 } else { tp as f64 / (tp + fnn) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    EdgeScore { true_positive: tp, false_positive: fp, false_negative: fnn, precision, recall, f1 }
}

/// Stack per-lag matrices into the `(N P) x N` design layout.
pub fn stack_lags(a_lag: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = a_lag.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform shapes")
}
