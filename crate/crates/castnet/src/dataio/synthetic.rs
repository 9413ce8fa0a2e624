//! Synthetic SVAR data with known causal ground truth.
//!
//! Samples `x_t' = x_t' C + sum_i x_{t-i}' A_i + z_t'` where `C` is a random
//! DAG of contemporaneous effects and the `A_i` carry time-lagged effects
//! (positive self-lags on the diagonal plus sparse cross-node edges). Lag
//! weights are rescaled until the companion matrix of the reduced-form VAR
//! has spectral radius below 0.95, and a burn-in prefix is discarded.

use super::{DataError, Result, SeriesTable};
use crate::dynotears::CausalGraphSet;
use crate::rngutil;
use chrono::NaiveDate;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub lag_order: usize,
    /// Probability of each admissible cross-node edge.
    pub edge_density: f64,
    /// Magnitude range for cross-node weights (sign is random).
    pub weight_low: f64,
    pub weight_high: f64,
    /// Magnitude range for the positive lag-1 self-effects.
    pub self_lag_low: f64,
    pub self_lag_high: f64,
    pub noise_sigma: f64,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_nodes: 30,
            lag_order: 1,
            edge_density: 0.1,
            weight_low: 0.3,
            weight_high: 0.8,
            self_lag_low: 0.6,
            self_lag_high: 0.9,
            noise_sigma: 0.5,
            n_steps: 4000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGroundTruth {
    pub graphs: CausalGraphSet,
    /// Physical adjacency: symmetrized support of `C` plus random geometric
    /// edges, so the four graph roles stay distinct.
    pub adjacency: Array2<f64>,
}

const BURN_IN: usize = 200;
const SPECTRAL_TARGET: f64 = 0.95;

pub fn generate_svar(spec: &SyntheticSpec) -> Result<(SeriesTable, SyntheticGroundTruth)> {
    if spec.n_nodes == 0 || spec.lag_order == 0 || spec.n_steps == 0 {
        return Err(DataError::Contract("n_nodes, lag_order, n_steps must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.edge_density) {
        return Err(DataError::Contract("edge_density must lie in [0,1]".into()));
    }
    let n = spec.n_nodes;
    let p = spec.lag_order;
    let mut rng = rngutil::stream(spec.seed, "svar-structure");

    // Random topological order, then admissible intra-slice edges u -> v only
    // when u precedes v, which keeps C acyclic by construction.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut rank = vec![0usize; n];
    for (pos, &node) in order.iter().enumerate() {
        rank[node] = pos;
    }
    let mut c = Array2::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            if rank[u] < rank[v] && rng.random::<f64>() < spec.edge_density {
                c[[u, v]] = random_weight(&mut rng, spec);
            }
        }
    }

    let mut a_lag: Vec<Array2<f64>> = Vec::with_capacity(p);
    for lag in 0..p {
        let mut a = Array2::zeros((n, n));
        for u in 0..n {
            for v in 0..n {
                if u == v {
                    if lag == 0 && spec.self_lag_high > 0.0 {
                        a[[u, v]] = rngutil::uniform(&mut rng, spec.self_lag_low, spec.self_lag_high);
                    }
                } else if rng.random::<f64>() < spec.edge_density {
                    a[[u, v]] = random_weight(&mut rng, spec);
                }
            }
        }
        a_lag.push(a);
    }

    // Stationarity: shrink lag weights until the companion spectral radius
    // of the reduced form x_t' = x_{t-i}' A_i (I-C)^{-1} is below target.
    let inv_imc = invert_i_minus_c(&c, &order)?;
    for _ in 0..64 {
        let reduced: Vec<Array2<f64>> = a_lag.iter().map(|a| a.dot(&inv_imc)).collect();
        let rho = companion_spectral_radius(&reduced);
        if rho < SPECTRAL_TARGET {
            break;
        }
        for a in &mut a_lag {
            a.mapv_inplace(|w| w * 0.8);
        }
    }

    // Simulate, solving the contemporaneous system in topological order.
    let mut rng_sim = rngutil::stream(spec.seed, "svar-noise");
    let total = spec.n_steps + BURN_IN;
    let mut hist: Vec<Vec<f64>> = Vec::with_capacity(total);
    for t in 0..total {
        let mut drive = vec![0.0; n];
        for (v, d) in drive.iter_mut().enumerate() {
            *d = spec.noise_sigma * rngutil::standard_normal(&mut rng_sim);
            for (i, a) in a_lag.iter().enumerate() {
                if t > i {
                    let prev = &hist[t - 1 - i];
                    for u in 0..n {
                        *d += prev[u] * a[[u, v]];
                    }
                }
            }
        }
        let mut x = drive;
        for &v in &order {
            let mut acc = x[v];
            for &u in &order[..rank[v]] {
                let w = c[[u, v]];
                if w != 0.0 {
                    acc += x[u] * w;
                }
            }
            x[v] = acc;
        }
        hist.push(x);
    }

    let mut values = Array2::zeros((spec.n_steps, n));
    for t in 0..spec.n_steps {
        for i in 0..n {
            values[[t, i]] = hist[BURN_IN + t][i];
        }
    }
    let base = NaiveDate::from_ymd_opt(2023, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let timestamps = (0..spec.n_steps)
        .map(|i| base + chrono::Duration::minutes(5 * i as i64))
        .collect();
    let series = SeriesTable {
        timestamps,
        values,
        node_ids: (0..n).map(|i| format!("node_{i}")).collect(),
        present: Array2::from_elem((spec.n_steps, n), true),
    };

    let adjacency = build_adjacency(&c, spec.seed, n);
    let graphs = CausalGraphSet::new(c, a_lag, 0.0)
        .map_err(|e| DataError::Contract(format!("generated ground truth invalid: {e}")))?;
    Ok((series, SyntheticGroundTruth { graphs, adjacency }))
}

fn random_weight(rng: &mut rand_chacha::ChaCha8Rng, spec: &SyntheticSpec) -> f64 {
    let mag = rngutil::uniform(rng, spec.weight_low, spec.weight_high);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// (I - C)^{-1} for acyclic C via forward substitution along the topological
/// order: column v of the inverse solves (I - C') e_v.
fn invert_i_minus_c(c: &Array2<f64>, order: &[usize]) -> Result<Array2<f64>> {
    let n = c.nrows();
    let mut inv = Array2::zeros((n, n));
    for col in 0..n {
        // solve (I - C)^T y = e_col row-wise in topological order, i.e.
        // y_v = e_v + sum_u C[u,v] y_u over predecessors u.
        let mut y = vec![0.0; n];
        for &v in order {
            let mut acc = if v == col { 1.0 } else { 0.0 };
            for u in 0..n {
                let w = c[[u, v]];
                if w != 0.0 {
                    acc += w * y[u];
                }
            }
            y[v] = acc;
        }
        for v in 0..n {
            inv[[col, v]] = y[v];
        }
    }
    // inv now holds rows: row `col` is e_col' (I-C)^{-1}; that is exactly the
    // matrix acting on row vectors, which is how it is used.
    Ok(inv)
}

/// Spectral radius of the block companion matrix via Gelfand's formula with
/// repeated normalized squaring (robust to complex dominant eigenvalues).
fn companion_spectral_radius(reduced: &[Array2<f64>]) -> f64 {
    let n = reduced[0].nrows();
    let p = reduced.len();
    let dim = n * p;
    let mut m = Array2::zeros((dim, dim));
    // x_t = sum_i B_i^T x_{t-i} in column convention; companion blocks on the
    // first row, identity shifts below.
    for (i, b) in reduced.iter().enumerate() {
        for r in 0..n {
            for cidx in 0..n {
                m[[r, i * n + cidx]] = b[[cidx, r]];
            }
        }
    }
    for i in 1..p {
        for r in 0..n {
            m[[i * n + r, (i - 1) * n + r]] = 1.0;
        }
    }
    let mut log_rho = 0.0;
    let mut cur = m;
    let squarings = 10;
    for k in 0..=squarings {
        let norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        log_rho += norm.ln() / (1u64 << k) as f64;
        if k == squarings {
            break;
        }
        cur.mapv_inplace(|v| v / norm);
        cur = cur.dot(&cur);
    }
    log_rho.exp()
}

fn build_adjacency(c: &Array2<f64>, seed: u64, n: usize) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j && (c[[i, j]] != 0.0 || c[[j, i]] != 0.0) {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    // Random geometric extras: nodes on the unit square, connect near pairs.
    let mut rng = rngutil::stream(seed, "geometric-adjacency");
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let radius = (2.0 / n as f64).sqrt() * 0.9;
    for i in 0..n {
        for j in (i + 1)..n {
            let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
            if (dx * dx + dy * dy).sqrt() < radius {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    a
}
