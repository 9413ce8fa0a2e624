//! Graph processing operators for the multi-graph convolution and
//! descriptive statistics of learned graphs.
//!
//! Physical adjacency goes through the normalized Laplacian operator,
//! learned causal graphs through out-degree row normalization, and the
//! adaptive graph is its own operator (already row-stochastic). Each
//! operator is cached together with its matrix powers `g(a)^0..g(a)^K`.

use crate::diffcore::{Tape, Var};
use crate::dynotears::CausalGraphSet;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("adjacency weights must be nonnegative (found {value} at ({i},{j}))")]
    NegativeWeight { i: usize, j: usize, value: f64 },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Which graphs participate in the multi-graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    /// Physical road adjacency.
    Adjacency,
    /// Time-lagged (inter-slice) causal graph.
    Lagged,
    /// Contemporaneous (intra-slice) causal graph.
    Contemporaneous,
    /// Learned auxiliary graph from node embeddings.
    Adaptive,
}

/// Normalized Laplacian operator `I - D^{-1/2} A D^{-1/2}`; rows of isolated
/// nodes reduce to the identity row, so their features pass through.
pub fn laplacian_operator(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(GraphError::Contract(format!("adjacency must be square, got {:?}", a.dim())));
    }
    for i in 0..n {
        if a[[i, i]] != 0.0 {
            return Err(GraphError::Contract(format!("adjacency diagonal must be zero (node {i})")));
        }
        for j in 0..n {
            if a[[i, j]] < 0.0 {
                return Err(GraphError::NegativeWeight { i, j, value: a[[i, j]] });
            }
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut op = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                op[[i, j]] -= inv_sqrt[i] * a[[i, j]] * inv_sqrt[j];
            }
        }
    }
    Ok(op)
}

/// Out-degree normalization `D_out^{-1} a` with degrees from absolute
/// weights; zero out-degree rows map to zero rows.
pub fn asymmetric_operator(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(GraphError::Contract(format!("matrix must be square, got {:?}", a.dim())));
    }
    let mut op = Array2::zeros((n, n));
    for i in 0..n {
        let out_degree: f64 = a.row(i).iter().map(|v| v.abs()).sum();
        if out_degree > 0.0 {
            for j in 0..n {
                op[[i, j]] = a[[i, j]] / out_degree;
            }
        }
    }
    Ok(op)
}

/// Adaptive graph `softmax_rows(relu(emb1 emb2^T))` on plain arrays.
pub fn adaptive_graph(emb1: &Array2<f64>, emb2: &Array2<f64>) -> Result<Array2<f64>> {
    if emb1.ncols() == 0 || emb1.ncols() != emb2.ncols() || emb1.nrows() != emb2.nrows() {
        return Err(GraphError::Contract(format!(
            "embedding shapes {:?} and {:?} must match with d_n >= 1",
            emb1.dim(),
            emb2.dim()
        )));
    }
    let logits = emb1.dot(&emb2.t()).mapv(|v| v.max(0.0));
    let n = logits.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..n {
            out[[i, j]] /= sum;
        }
    }
    Ok(out)
}

/// Same computation recorded on a tape so gradients reach both embeddings.
pub fn adaptive_graph_on_tape(tape: &mut Tape, emb1: Var, emb2: Var) -> crate::diffcore::Result<Var> {
    let e2t = tape.transpose(emb2)?;
    let logits = tape.matmul(emb1, e2t)?;
    let pos = tape.relu(logits);
    tape.softmax_rows(pos)
}

/// `[I, op, op^2, ..., op^K]`.
pub fn powers(op: &Array2<f64>, k: usize) -> Vec<Array2<f64>> {
    let n = op.nrows();
    let mut out = Vec::with_capacity(k + 1);
    out.push(Array2::<f64>::eye(n));
    for i in 1..=k {
        let next = out[i - 1].dot(op);
        out.push(next);
    }
    out
}

/// One processed graph ready for convolution: the operator and its powers.
#[derive(Debug, Clone)]
pub struct GraphOperator {
    pub kind: GraphKind,
    pub powers: Vec<Array2<f64>>,
}

/// The static graphs the forecaster can draw on, with cached operators.
/// The adaptive graph lives with the model parameters and is rebuilt on the
/// tape every forward pass, so it never enters this cache.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub adjacency: Array2<f64>,
    pub graphs: CausalGraphSet,
    pub k_hops: usize,
    cache: Vec<GraphOperator>,
}

impl GraphBundle {
    pub fn new(adjacency: Array2<f64>, graphs: CausalGraphSet, k_hops: usize) -> Result<GraphBundle> {
        let n = graphs.n_nodes();
        if adjacency.dim() != (n, n) {
            return Err(GraphError::Contract(format!(
                "adjacency {:?} does not match graph node count {n}",
                adjacency.dim()
            )));
        }
        let mut cache = Vec::new();
        let lap = laplacian_operator(&adjacency)?;
        cache.push(GraphOperator { kind: GraphKind::Adjacency, powers: powers(&lap, k_hops) });
        // Lag matrices beyond P = 1 are summed after normalization.
        let mut lag_sum = Array2::zeros((n, n));
        for a in &graphs.a_lag {
            lag_sum = lag_sum + asymmetric_operator(a)?;
        }
        cache.push(GraphOperator { kind: GraphKind::Lagged, powers: powers(&lag_sum, k_hops) });
        let intra = asymmetric_operator(&graphs.c)?;
        cache.push(GraphOperator { kind: GraphKind::Contemporaneous, powers: powers(&intra, k_hops) });
        Ok(GraphBundle { adjacency, graphs, k_hops, cache })
    }

    pub fn n_nodes(&self) -> usize {
        self.graphs.n_nodes()
    }

    pub fn operator(&self, kind: GraphKind) -> Option<&GraphOperator> {
        self.cache.iter().find(|op| op.kind == kind)
    }

    /// Neighbor sets from the physical adjacency, used by the conformal
    /// spatial weighting.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let n = self.n_nodes();
        (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.adjacency[[i, j]] != 0.0).collect())
            .collect()
    }
}

/// Descriptive statistics of one graph (support only, hop distances).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub n_edges: usize,
    /// Longest shortest path over connected ordered pairs; 0 when no pair
    /// is connected.
    pub diameter: usize,
    /// Mean shortest path over connected ordered pairs (self-pairs excluded).
    pub avg_shortest_path: f64,
    /// Edge endpoints per node: `E/N` directed, `2E/N` undirected.
    pub avg_degree: f64,
    /// Ordered node pairs with no connecting path (reported, not averaged).
    pub unreachable_pairs: usize,
}

pub fn graph_stats(g: &Array2<f64>, directed: bool) -> GraphStats {
    let n = g.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut n_edges = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j || g[[i, j]] == 0.0 {
                continue;
            }
            if directed {
                adj[i].push(j);
                n_edges += 1;
            } else if i < j {
                adj[i].push(j);
                adj[j].push(i);
                n_edges += 1;
            }
        }
    }
    let mut diameter = 0usize;
    let mut sum_paths = 0usize;
    let mut connected_pairs = 0usize;
    let mut unreachable_pairs = 0usize;
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for src in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for dst in 0..n {
            if dst == src {
                continue;
            }
            if dist[dst] == usize::MAX {
                unreachable_pairs += 1;
            } else {
                connected_pairs += 1;
                sum_paths += dist[dst];
                diameter = diameter.max(dist[dst]);
            }
        }
    }
    let avg_shortest_path = if connected_pairs > 0 {
        sum_paths as f64 / connected_pairs as f64
    } else {
        0.0
    };
    let avg_degree = if directed {
        n_edges as f64 / n as f64
    } else {
        2.0 * n_edges as f64 / n as f64
    };
    GraphStats { n_nodes: n, n_edges, diameter, avg_shortest_path, avg_degree, unreachable_pairs }
}

/// CSV rows for a set of named graphs, column names following the summary
/// table layout used in reports.
pub fn stats_csv(rows: &[(&str, GraphStats)]) -> String {
    let mut out = String::from(
        "Graph type,Number of nodes,Number of edges,Graph diameter,Average shortest path,Average degree,Unreachable pairs\n",
    );
    for (name, s) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name, s.n_nodes, s.n_edges, s.diameter, s.avg_shortest_path, s.avg_degree, s.unreachable_pairs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor as DTensor;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn laplacian_of_empty_graph_is_identity() {
        let a = Array2::zeros((4, 4));
        let op = laplacian_operator(&a).unwrap();
        assert_eq!(op, Array2::<f64>::eye(4));
    }

    #[test]
    fn laplacian_two_node_unit_edge() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 1]] = 1.0;
        a[[1, 0]] = 1.0;
        let op = laplacian_operator(&a).unwrap();
        let expect = Array2::from_shape_vec((2, 2), vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        assert_eq!(op, expect);
    }

    #[test]
    fn laplacian_path_graph_matches_per_entry_oracle() {
        // P3: 0-1-2, unit weights; direct formula per entry
        let mut a = Array2::zeros((3, 3));
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            a[[i, j]] = 1.0;
        }
        let op = laplacian_operator(&a).unwrap();
        let d = [1.0f64, 2.0, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j {
                    1.0
                } else if a[[i, j]] != 0.0 {
                    -a[[i, j]] / (d[i].sqrt() * d[j].sqrt())
                } else {
                    0.0
                };
                assert!((op[[i, j]] - expect).abs() < 1e-15);
            }
        }
        // symmetric input keeps the operator symmetric
        assert_eq!(op, op.t().to_owned());
    }

    #[test]
    fn laplacian_rejects_negative_weights() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 1]] = -1.0;
        assert!(matches!(laplacian_operator(&a), Err(GraphError::NegativeWeight { .. })));
    }

    #[test]
    fn asymmetric_operator_cases() {
        let a = Array2::from_shape_vec((2, 2), vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let op = asymmetric_operator(&a).unwrap();
        assert_eq!(op, Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        // zero out-degree second row stays zero
        assert_eq!(op.row(1).sum(), 0.0);

        let eye_scaled = Array2::from_diag(&ndarray::Array1::from(vec![3.0, 0.5, 2.0]));
        let op = asymmetric_operator(&eye_scaled).unwrap();
        assert_eq!(op, Array2::<f64>::eye(3));
    }

    #[test]
    fn asymmetric_operator_matches_per_entry_oracle() {
        let mut seed = 12u64;
        let a = Array2::from_shape_fn((5, 5), |_| lcg(&mut seed));
        let op = asymmetric_operator(&a).unwrap();
        for i in 0..5 {
            let d: f64 = a.row(i).iter().map(|v| v.abs()).sum();
            for j in 0..5 {
                assert!((op[[i, j]] - a[[i, j]] / d).abs() < 1e-15);
            }
            // signed rows sum to (signed row sum / degree); absolute rows sum to 1
            let abs_sum: f64 = op.row(i).iter().map(|v| v.abs()).sum();
            assert!((abs_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_graph_zero_embeddings_give_uniform_rows() {
        let e = Array2::zeros((4, 3));
        let g = adaptive_graph(&e, &e).unwrap();
        for v in g.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let one = Array2::zeros((1, 2));
        let g1 = adaptive_graph(&one, &one).unwrap();
        assert_eq!(g1[[0, 0]], 1.0);
    }

    #[test]
    fn adaptive_graph_rows_sum_to_one_and_shift_invariance() {
        let mut seed = 77u64;
        let e1 = Array2::from_shape_fn((6, 4), |_| lcg(&mut seed));
        let e2 = Array2::from_shape_fn((6, 4), |_| lcg(&mut seed));
        let g = adaptive_graph(&e1, &e2).unwrap();
        for i in 0..6 {
            let s: f64 = g.row(i).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..6 {
                assert!(g[[i, j]] >= 0.0);
            }
        }
        assert!(adaptive_graph(&Array2::zeros((2, 0)), &Array2::zeros((2, 0))).is_err());
    }

    #[test]
    fn adaptive_graph_gradient_matches_central_differences() {
        let mut seed = 5u64;
        let n = 4;
        let dn = 3;
        let e1v: Vec<f64> = (0..n * dn).map(|_| lcg(&mut seed)).collect();
        let e2v: Vec<f64> = (0..n * dn).map(|_| lcg(&mut seed)).collect();
        let eval = |e1: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let v1 = tape.leaf(DTensor::new(vec![n, dn], e1.to_vec()).unwrap().with_grad());
            let v2 = tape.constant(DTensor::new(vec![n, dn], e2v.clone()).unwrap());
            let g = adaptive_graph_on_tape(&mut tape, v1, v2).unwrap();
            // weighted sum to exercise nontrivial gradients
            let w = tape.constant(
                DTensor::new(vec![n, n], (0..n * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            );
            let prod = tape.mul(g, w).unwrap();
            let s = tape.sum(prod);
            tape.value(s).data()[0]
        };
        let mut tape = Tape::new();
        let v1 = tape.leaf(DTensor::new(vec![n, dn], e1v.clone()).unwrap().with_grad());
        let v2 = tape.constant(DTensor::new(vec![n, dn], e2v.clone()).unwrap());
        let g = adaptive_graph_on_tape(&mut tape, v1, v2).unwrap();
        let w = tape.constant(
            DTensor::new(vec![n, n], (0..n * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        let prod = tape.mul(g, w).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s).unwrap();
        let analytic = grads.wrt(v1).unwrap();
        let h = 1e-5;
        let mut x = e1v.clone();
        for i in 0..x.len() {
            x[i] = e1v[i] + h;
            let fp = eval(&x);
            x[i] = e1v[i] - h;
            let fm = eval(&x);
            x[i] = e1v[i];
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!((fd - analytic[i]).abs() / denom < 1e-4, "entry {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn powers_basics_and_oracle() {
        assert_eq!(powers(&Array2::<f64>::eye(3), 0), vec![Array2::<f64>::eye(3)]);
        let all_eye = powers(&Array2::<f64>::eye(3), 4);
        assert!(all_eye.iter().all(|m| *m == Array2::<f64>::eye(3)));

        let mut seed = 31u64;
        let op = Array2::from_shape_fn((4, 4), |_| 0.5 * lcg(&mut seed));
        let pw = powers(&op, 3);
        // naive repeated-multiplication oracle
        let mut naive = Array2::<f64>::eye(4);
        for k in 0..=3 {
            let diff = (&pw[k] - &naive).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "power {k} differs by {diff}");
            naive = naive.dot(&op);
        }
        // op^k · op^j == op^(k+j)
        for k in 0..=3 {
            for j in 0..=(3 - k) {
                let prod = pw[k].dot(&pw[j]);
                let diff = (&prod - &pw[k + j]).iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(diff < 1e-9);
            }
        }
    }

    #[test]
    fn stats_complete_and_path_graphs() {
        let mut k3 = Array2::from_elem((3, 3), 1.0);
        for i in 0..3 {
            k3[[i, i]] = 0.0;
        }
        let s = graph_stats(&k3, false);
        assert_eq!(s.diameter, 1);
        assert_eq!(s.avg_degree, 2.0);
        assert_eq!(s.avg_shortest_path, 1.0);
        assert_eq!(s.unreachable_pairs, 0);

        let mut p3 = Array2::zeros((3, 3));
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            p3[[i, j]] = 1.0;
        }
        let s = graph_stats(&p3, false);
        assert_eq!(s.diameter, 2);
        assert_eq!(s.n_edges, 2);
    }

    #[test]
    fn stats_match_bfs_oracle_on_random_dag() {
        let mut seed = 8u64;
        let n = 10;
        let g = Array2::from_shape_fn((n, n), |(i, j)| {
            if i < j && lcg(&mut seed) > 0.4 {
                1.0
            } else {
                0.0
            }
        });
        let s = graph_stats(&g, true);
        // Floyd-Warshall oracle
        let inf = usize::MAX / 2;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
            for j in 0..n {
                if g[[i, j]] != 0.0 {
                    d[i][j] = 1;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
                }
            }
        }
        let mut diameter = 0;
        let mut total = 0;
        let mut pairs = 0;
        let mut unreachable = 0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if d[i][j] >= inf {
                    unreachable += 1;
                } else {
                    diameter = diameter.max(d[i][j]);
                    total += d[i][j];
                    pairs += 1;
                }
            }
        }
        assert_eq!(s.diameter, diameter);
        assert_eq!(s.unreachable_pairs, unreachable);
        assert!((s.avg_shortest_path - total as f64 / pairs as f64).abs() < 1e-12);
        assert_eq!(s.avg_degree, s.n_edges as f64 / n as f64);
    }

    #[test]
    fn bundle_caches_all_static_operators() {
        use crate::dataio::{generate_svar, SyntheticSpec};
        let spec = SyntheticSpec { n_nodes: 6, n_steps: 10, seed: 2, ..SyntheticSpec::default() };
        let (_, truth) = generate_svar(&spec).unwrap();
        let bundle = GraphBundle::new(truth.adjacency.clone(), truth.graphs.clone(), 2).unwrap();
        for kind in [GraphKind::Adjacency, GraphKind::Lagged, GraphKind::Contemporaneous] {
            let op = bundle.operator(kind).unwrap();
            assert_eq!(op.powers.len(), 3);
            assert_eq!(op.powers[0], Array2::<f64>::eye(6));
        }
        assert!(bundle.operator(GraphKind::Adaptive).is_none());
        let nb = bundle.neighbors();
        for (i, list) in nb.iter().enumerate() {
            for &j in list {
                assert!(bundle.adjacency[[i, j]] != 0.0 && i != j);
            }
        }
    }
}
