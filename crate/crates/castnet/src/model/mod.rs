//! The spatio-temporal multi-graph forecaster: calendar-aware embedding,
//! stacked ST-blocks (masked self-attention, gated dilated causal
//! convolutions, multi-graph diffusion convolution, residuals), and a
//! per-node fully-connected prediction head.
//!
//! Forward passes are recorded on a [`Tape`](crate::diffcore::Tape); training
//! differentiates the mean-absolute-error loss through the whole stack,
//! including the adaptive graph's node embeddings.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{train, EpochStats, TrainHistory, TrainedModel};

use crate::dataio::TIME_FEATURES;
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::graphops::{adaptive_graph_on_tape, GraphBundle, GraphError, GraphKind};
use crate::rngutil;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Input feature count per step: one traffic variable plus calendar one-hots.
pub const INPUT_FEATURES: usize = 1 + TIME_FEATURES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    WeightedSum,
    Sum,
    Mean,
    Max,
    Min,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Adaptive-graph node embedding width.
    pub d_n: usize,
    pub n_blocks: usize,
    /// Diffusion hops per graph.
    pub k_hops: usize,
    /// Dilation of each causal convolution in a gate stack.
    pub dilations: Vec<usize>,
    /// Taps per convolution kernel.
    pub kernel_size: usize,
    /// Hidden widths of the prediction head; the last entry is the horizon H.
    pub head_widths: Vec<usize>,
    pub fusion: Fusion,
    pub graph_subset: Vec<GraphKind>,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cap on training windows per epoch (evenly spaced, fixed across epochs).
    pub windows_per_epoch: Option<usize>,
    /// Cap on validation windows per evaluation.
    pub val_windows: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            d_n: 10,
            n_blocks: 2,
            k_hops: 2,
            dilations: vec![1, 2, 4],
            kernel_size: 2,
            head_widths: vec![64, 32, 12],
            fusion: Fusion::WeightedSum,
            graph_subset: vec![
                GraphKind::Adjacency,
                GraphKind::Lagged,
                GraphKind::Contemporaneous,
                GraphKind::Adaptive,
            ],
            dropout: 0.3,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 8,
            windows_per_epoch: Some(192),
            val_windows: Some(64),
            early_stop_patience: 15,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration matching the tuned reference setup.
    pub fn paper_scale() -> ModelConfig {
        ModelConfig {
            d: 32,
            d_n: 10,
            n_blocks: 4,
            head_widths: vec![512, 256, 12],
            batch_size: 64,
            epochs: 100,
            windows_per_epoch: None,
            val_windows: None,
            ..ModelConfig::default()
        }
    }

    /// Graph subsets of the six ablation variants (1 = adjacency only,
    /// 6 = all four graphs).
    pub fn ablation_subset(model_no: usize) -> Option<Vec<GraphKind>> {
        use GraphKind::*;
        match model_no {
            1 => Some(vec![Adjacency]),
            2 => Some(vec![Adjacency, Adaptive]),
            3 => Some(vec![Adjacency, Contemporaneous, Adaptive]),
            4 => Some(vec![Adjacency, Lagged, Adaptive]),
            5 => Some(vec![Adjacency, Lagged, Contemporaneous]),
            6 => Some(vec![Adjacency, Lagged, Contemporaneous, Adaptive]),
            _ => None,
        }
    }

    pub fn horizon(&self) -> usize {
        *self.head_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_n == 0 || self.n_blocks == 0 {
            return Err(ModelError::Config("d, d_n, n_blocks must be >= 1".into()));
        }
        if self.head_widths.is_empty() {
            return Err(ModelError::Config("head_widths must end with the horizon H".into()));
        }
        if self.graph_subset.is_empty() {
            return Err(ModelError::Config("graph_subset must be nonempty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for kind in &self.graph_subset {
            if !seen.insert(*kind) {
                return Err(ModelError::Config(format!("duplicate graph kind {kind:?}")));
            }
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(ModelError::Config("dilations must be nonempty positive".into()));
        }
        if self.kernel_size == 0 {
            return Err(ModelError::Config("kernel_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConvParams {
    pub kind: GraphKind,
    /// One transform per diffusion hop, `k = 0..=K`.
    pub w_hops: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_gate: Vec<Tensor>,
    pub b_gate: Tensor,
    pub w_sig: Vec<Tensor>,
    pub b_sig: Tensor,
    pub graph_convs: Vec<GraphConvParams>,
    pub fusion_logits: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Every learnable tensor of the forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_embed: Tensor,
    pub b_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub adaptive_emb1: Option<Tensor>,
    pub adaptive_emb2: Option<Tensor>,
    pub head: Vec<HeadLayer>,
}

impl ModelParams {
    /// Deterministic traversal; the optimizer, checkpoints, and gradient
    /// bookkeeping all share this order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("embed.w".into(), &self.w_embed);
        f("embed.b".into(), &self.b_embed);
        for (bi, b) in self.blocks.iter().enumerate() {
            f(format!("block{bi}.w_q"), &b.w_q);
            f(format!("block{bi}.w_k"), &b.w_k);
            f(format!("block{bi}.w_v"), &b.w_v);
            for (ci, w) in b.w_gate.iter().enumerate() {
                f(format!("block{bi}.gate{ci}.w"), w);
            }
            f(format!("block{bi}.gate.b"), &b.b_gate);
            for (ci, w) in b.w_sig.iter().enumerate() {
                f(format!("block{bi}.sig{ci}.w"), w);
            }
            f(format!("block{bi}.sig.b"), &b.b_sig);
            for gc in &b.graph_convs {
                for (k, w) in gc.w_hops.iter().enumerate() {
                    f(format!("block{bi}.{:?}.hop{k}", gc.kind), w);
                }
            }
            if let Some(fl) = &b.fusion_logits {
                f(format!("block{bi}.fusion"), fl);
            }
        }
        if let Some(e) = &self.adaptive_emb1 {
            f("adaptive.emb1".into(), e);
        }
        if let Some(e) = &self.adaptive_emb2 {
            f("adaptive.emb2".into(), e);
        }
        for (hi, layer) in self.head.iter().enumerate() {
            f(format!("head{hi}.w"), &layer.w);
            f(format!("head{hi}.b"), &layer.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embed.w".into(), &mut self.w_embed);
        f("embed.b".into(), &mut self.b_embed);
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            f(format!("block{bi}.w_q"), &mut b.w_q);
            f(format!("block{bi}.w_k"), &mut b.w_k);
            f(format!("block{bi}.w_v"), &mut b.w_v);
            for (ci, w) in b.w_gate.iter_mut().enumerate() {
                f(format!("block{bi}.gate{ci}.w"), w);
            }
            f(format!("block{bi}.gate.b"), &mut b.b_gate);
            for (ci, w) in b.w_sig.iter_mut().enumerate() {
                f(format!("block{bi}.sig{ci}.w"), w);
            }
            f(format!("block{bi}.sig.b"), &mut b.b_sig);
            for gc in &mut b.graph_convs {
                for (k, w) in gc.w_hops.iter_mut().enumerate() {
                    f(format!("block{bi}.{:?}.hop{k}", gc.kind), w);
                }
            }
            if let Some(fl) = &mut b.fusion_logits {
                f(format!("block{bi}.fusion"), fl);
            }
        }
        if let Some(e) = &mut self.adaptive_emb1 {
            f("adaptive.emb1".into(), e);
        }
        if let Some(e) = &mut self.adaptive_emb2 {
            f("adaptive.emb2".into(), e);
        }
        for (hi, layer) in self.head.iter_mut().enumerate() {
            f(format!("head{hi}.w"), &mut layer.w);
            f(format!("head{hi}.b"), &mut layer.b);
        }
    }

    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn count(&self) -> usize {
        self.flat().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape handles of the parameters for one recorded forward pass, in the same
/// order as [`ModelParams::flat`].
pub struct ParamVars {
    pub vars: Vec<Var>,
    block_offsets: Vec<BlockVarIndex>,
    embed_w: Var,
    embed_b: Var,
    adaptive: Option<(Var, Var)>,
    head: Vec<(Var, Var)>,
}

struct BlockVarIndex {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_gate: Vec<Var>,
    b_gate: Var,
    w_sig: Vec<Var>,
    b_sig: Var,
    graph_convs: Vec<(GraphKind, Vec<Var>)>,
    fusion_logits: Option<Var>,
}

/// The forecaster: configuration, dimensions, and parameters.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub n_nodes: usize,
    pub m_in: usize,
}

impl Forecaster {
    /// Seeded initialization: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
    /// weights and biases, standard normal for the adaptive embeddings.
    pub fn init(config: ModelConfig, n_nodes: usize, m_in: usize) -> Result<Forecaster> {
        config.validate()?;
        if n_nodes == 0 || m_in == 0 {
            return Err(ModelError::Config("n_nodes and m_in must be >= 1".into()));
        }
        let mut rng = rngutil::stream(config.seed, "model-init");
        let d = config.d;
        fn uniform_fan(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rngutil::uniform(rng, -bound, bound)).collect();
            Tensor::new(shape, data).expect("static shape")
        }

        let w_embed = uniform_fan(&mut rng, vec![INPUT_FEATURES, d], INPUT_FEATURES);
        let b_embed = uniform_fan(&mut rng, vec![1, d], INPUT_FEATURES);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let conv_fan = config.kernel_size * d;
            let w_q = uniform_fan(&mut rng, vec![d, d], d);
            let w_k = uniform_fan(&mut rng, vec![d, d], d);
            let w_v = uniform_fan(&mut rng, vec![d, d], d);
            let w_gate: Vec<Tensor> = config
                .dilations
                .iter()
                .map(|_| uniform_fan(&mut rng, vec![config.kernel_size, d, d], conv_fan))
                .collect();
            let b_gate = uniform_fan(&mut rng, vec![1, d], conv_fan);
            let w_sig: Vec<Tensor> = config
                .dilations
                .iter()
                .map(|_| uniform_fan(&mut rng, vec![config.kernel_size, d, d], conv_fan))
                .collect();
            let b_sig = uniform_fan(&mut rng, vec![1, d], conv_fan);
            let graph_convs = config
                .graph_subset
                .iter()
                .map(|kind| GraphConvParams {
                    kind: *kind,
                    w_hops: (0..=config.k_hops)
                        .map(|_| uniform_fan(&mut rng, vec![d, d], d))
                        .collect(),
                })
                .collect();
            let g = config.graph_subset.len();
            blocks.push(BlockParams {
                w_q,
                w_k,
                w_v,
                w_gate,
                b_gate,
                w_sig,
                b_sig,
                graph_convs,
                fusion_logits: match config.fusion {
                    Fusion::WeightedSum => Some(uniform_fan(&mut rng, vec![1, g], g)),
                    _ => None,
                },
            });
        }
        let adaptive = config.graph_subset.contains(&GraphKind::Adaptive);
        let normal_emb = |rng: &mut ChaCha8Rng| -> Tensor {
            let data = (0..n_nodes * config.d_n).map(|_| rngutil::standard_normal(rng)).collect();
            Tensor::new(vec![n_nodes, config.d_n], data).expect("static shape")
        };
        let adaptive_emb1 = adaptive.then(|| normal_emb(&mut rng));
        let adaptive_emb2 = adaptive.then(|| normal_emb(&mut rng));

        let mut head = Vec::new();
        let mut in_width = m_in * d;
        for &w in &config.head_widths {
            head.push(HeadLayer {
                w: uniform_fan(&mut rng, vec![in_width, w], in_width),
                b: uniform_fan(&mut rng, vec![1, w], in_width),
            });
            in_width = w;
        }
        let params = ModelParams { w_embed, b_embed, blocks, adaptive_emb1, adaptive_emb2, head };
        Ok(Forecaster { config, params, n_nodes, m_in })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon()
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn leaf_params(&self, tape: &mut Tape) -> ParamVars {
        let mut vars = Vec::new();
        let add = |tape: &mut Tape, t: &Tensor, vars: &mut Vec<Var>| -> Var {
            let v = tape.leaf(t.clone().with_grad());
            vars.push(v);
            v
        };
        let embed_w = add(tape, &self.params.w_embed, &mut vars);
        let embed_b = add(tape, &self.params.b_embed, &mut vars);
        let mut block_offsets = Vec::new();
        for b in &self.params.blocks {
            let w_q = add(tape, &b.w_q, &mut vars);
            let w_k = add(tape, &b.w_k, &mut vars);
            let w_v = add(tape, &b.w_v, &mut vars);
            let w_gate: Vec<Var> = b.w_gate.iter().map(|w| add(tape, w, &mut vars)).collect();
            let b_gate = add(tape, &b.b_gate, &mut vars);
            let w_sig: Vec<Var> = b.w_sig.iter().map(|w| add(tape, w, &mut vars)).collect();
            let b_sig = add(tape, &b.b_sig, &mut vars);
            let graph_convs: Vec<(GraphKind, Vec<Var>)> = b
                .graph_convs
                .iter()
                .map(|gc| (gc.kind, gc.w_hops.iter().map(|w| add(tape, w, &mut vars)).collect()))
                .collect();
            let fusion_logits = b.fusion_logits.as_ref().map(|fl| add(tape, fl, &mut vars));
            block_offsets.push(BlockVarIndex {
                w_q,
                w_k,
                w_v,
                w_gate,
                b_gate,
                w_sig,
                b_sig,
                graph_convs,
                fusion_logits,
            });
        }
        let adaptive = match (&self.params.adaptive_emb1, &self.params.adaptive_emb2) {
            (Some(e1), Some(e2)) => {
                let v1 = add(tape, e1, &mut vars);
                let v2 = add(tape, e2, &mut vars);
                Some((v1, v2))
            }
            _ => None,
        };
        let head: Vec<(Var, Var)> = self
            .params
            .head
            .iter()
            .map(|l| {
                let w = add(tape, &l.w, &mut vars);
                let b = add(tape, &l.b, &mut vars);
                (w, b)
            })
            .collect();
        ParamVars { vars, block_offsets, embed_w, embed_b, adaptive, head }
    }

    /// Concatenate the normalized inputs with calendar features:
    /// one `(N*M) x F'` constant ready for the shared embedding.
    fn build_input(&self, x_norm: &Array2<f64>, tfeat: &Array2<f64>) -> Result<Tensor> {
        let (n, m) = x_norm.dim();
        if n != self.n_nodes || m != self.m_in {
            return Err(ModelError::Contract(format!(
                "window is {n}x{m}, model wants {}x{}",
                self.n_nodes, self.m_in
            )));
        }
        if tfeat.dim() != (m, TIME_FEATURES) {
            return Err(ModelError::Contract(format!(
                "time features are {:?}, want ({m}, {TIME_FEATURES}); timestamps misaligned with window",
                tfeat.dim()
            )));
        }
        let mut data = Vec::with_capacity(n * m * INPUT_FEATURES);
        for i in 0..n {
            for t in 0..m {
                data.push(x_norm[[i, t]]);
                for ft in 0..TIME_FEATURES {
                    data.push(tfeat[[t, ft]]);
                }
            }
        }
        Ok(Tensor::new(vec![n * m, INPUT_FEATURES], data).expect("static shape"))
    }

    /// Record a full forward pass; returns the prediction `[N, H]` (in
    /// normalized units) and the parameter handles.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bundle: &GraphBundle,
        x_norm: &Array2<f64>,
        tfeat: &Array2<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, ParamVars)> {
        if bundle.n_nodes() != self.n_nodes {
            return Err(ModelError::Contract(format!(
                "graph bundle has {} nodes, model wants {}",
                bundle.n_nodes(),
                self.n_nodes
            )));
        }
        if bundle.k_hops < self.config.k_hops {
            return Err(ModelError::Contract(format!(
                "bundle caches {} hops, config wants {}",
                bundle.k_hops, self.config.k_hops
            )));
        }
        let pv = self.leaf_params(tape);
        let (n, m, d) = (self.n_nodes, self.m_in, self.config.d);

        let xbar = tape.constant(self.build_input(x_norm, tfeat)?);
        let embedded = self.embed(tape, xbar, &pv)?;
        let mask = tape.constant(causal_mask(m));

        let mut cur = embedded; // [N, M, d]
        let mut outputs = Vec::with_capacity(pv.block_offsets.len());
        for bvars in &pv.block_offsets {
            let atcn = self.gated_atcn_block(tape, cur, bvars, mask, &mut dropout_rng)?;
            let mgcn = self.mgcn(tape, atcn, bundle, bvars, &pv)?;
            let mgcn = self.apply_dropout(tape, mgcn, &mut dropout_rng);
            cur = tape.add(mgcn, atcn)?; // residual around the spatial module
            outputs.push(cur);
        }
        // Sum of the last two block outputs feeds the head.
        let pre_head = if outputs.len() >= 2 {
            tape.add(outputs[outputs.len() - 1], outputs[outputs.len() - 2])?
        } else {
            cur
        };
        let mut h = tape.reshape(pre_head, vec![n, m * d])?;
        let n_layers = pv.head.len();
        for (li, (w, b)) in pv.head.iter().enumerate() {
            let lin = tape.matmul(h, *w)?;
            h = tape.add(lin, *b)?;
            if li + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        let value = tape.value(h);
        if value.data().iter().any(|v| v.is_nan()) {
            return Err(ModelError::Contract("forward produced NaN".into()));
        }
        Ok((h, pv))
    }

    /// Shared affine embedding over concatenated traffic + calendar features.
    pub fn embed(&self, tape: &mut Tape, xbar: Var, pv: &ParamVars) -> Result<Var> {
        let lin = tape.matmul(xbar, pv.embed_w)?;
        let biased = tape.add(lin, pv.embed_b)?;
        Ok(tape.reshape(biased, vec![self.n_nodes, self.m_in, self.config.d])?)
    }

    /// Temporal module for one block: per node, masked self-attention,
    /// two stacks of dilated causal convolutions, the tanh/sigmoid gate, and
    /// a residual from the block input.
    fn gated_atcn_block(
        &self,
        tape: &mut Tape,
        input: Var,
        bvars: &BlockVarIndex,
        mask: Var,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.n_nodes);
        for i in 0..self.n_nodes {
            let xi = tape.slice0(input, i)?; // [M, d]
            let att = masked_attention(tape, xi, bvars.w_q, bvars.w_k, bvars.w_v, mask)?;
            let att = self.apply_dropout(tape, att, dropout_rng);
            let gate = self.conv_stack(tape, att, &bvars.w_gate, bvars.b_gate)?;
            let sig = self.conv_stack(tape, att, &bvars.w_sig, bvars.b_sig)?;
            let th = tape.tanh(gate);
            let sg = tape.sigmoid(sig);
            rows.push(tape.mul(th, sg)?);
        }
        let stacked = tape.stack0(&rows)?;
        Ok(tape.add(stacked, input)?)
    }

    fn conv_stack(&self, tape: &mut Tape, x: Var, kernels: &[Var], bias: Var) -> Result<Var> {
        let mut cur = x;
        for (w, &dil) in kernels.iter().zip(&self.config.dilations) {
            let pad = (self.config.kernel_size - 1) * dil;
            cur = tape.dilated_conv1d(cur, *w, dil, pad)?;
        }
        Ok(tape.add(cur, bias)?)
    }

    /// Multi-graph diffusion convolution `fuse_a sum_k g(a)^k X W_k`,
    /// applied per time step (no residual here; the block adds it).
    fn mgcn(
        &self,
        tape: &mut Tape,
        x: Var,
        bundle: &GraphBundle,
        bvars: &BlockVarIndex,
        pv: &ParamVars,
    ) -> Result<Var> {
        let (n, m, d) = (self.n_nodes, self.m_in, self.config.d);
        let x_mat = tape.reshape(x, vec![n, m * d])?;

        // Adaptive operator powers are rebuilt on the tape so its gradients
        // reach the node embeddings; static powers come from the cache.
        let adaptive_ops: Option<Vec<Var>> = match pv.adaptive {
            Some((e1, e2)) if self.config.graph_subset.contains(&GraphKind::Adaptive) => {
                let a_hat = adaptive_graph_on_tape(tape, e1, e2)?;
                let mut ops = Vec::with_capacity(self.config.k_hops);
                let mut cur = a_hat;
                for k in 1..=self.config.k_hops {
                    if k > 1 {
                        cur = tape.matmul(cur, a_hat)?;
                    }
                    ops.push(cur);
                }
                Some(ops)
            }
            _ => None,
        };

        let mut branches = Vec::with_capacity(bvars.graph_convs.len());
        for (kind, w_hops) in &bvars.graph_convs {
            let mut branch: Option<Var> = None;
            for k in 0..=self.config.k_hops {
                let diffused = if k == 0 {
                    x_mat
                } else {
                    match kind {
                        GraphKind::Adaptive => {
                            let op = adaptive_ops.as_ref().expect("adaptive params exist")[k - 1];
                            tape.matmul(op, x_mat)?
                        }
                        _ => {
                            let powers =
                                &bundle.operator(*kind).ok_or_else(|| {
                                    ModelError::Contract(format!("bundle lacks operator {kind:?}"))
                                })?.powers;
                            let gk = tape.constant(Tensor::from_array2(&powers[k]));
                            tape.matmul(gk, x_mat)?
                        }
                    }
                };
                let flat = tape.reshape(diffused, vec![n * m, d])?;
                let transformed = tape.matmul(flat, w_hops[k])?;
                let back = tape.reshape(transformed, vec![n, m * d])?;
                branch = Some(match branch {
                    Some(acc) => tape.add(acc, back)?,
                    None => back,
                });
            }
            branches.push(branch.expect("k_hops >= 0 yields at least one term"));
        }

        let fused = self.fuse(tape, &branches, bvars.fusion_logits)?;
        Ok(tape.reshape(fused, vec![n, m, d])?)
    }

    fn fuse(&self, tape: &mut Tape, branches: &[Var], logits: Option<Var>) -> Result<Var> {
        let g = branches.len();
        match self.config.fusion {
            Fusion::WeightedSum => {
                let logits = logits.ok_or_else(|| {
                    ModelError::Config("weighted_sum fusion without fusion logits".into())
                })?;
                let weights = tape.softmax_rows(logits)?; // [1, G]
                let col = tape.reshape(weights, vec![g, 1])?;
                let mut acc: Option<Var> = None;
                for (i, &b) in branches.iter().enumerate() {
                    let wi = tape.slice0(col, i)?; // [1]
                    let scaled = tape.mul(b, wi)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, scaled)?,
                        None => scaled,
                    });
                }
                Ok(acc.expect("graph_subset nonempty"))
            }
            Fusion::Sum | Fusion::Mean => {
                let mut acc = branches[0];
                for &b in &branches[1..] {
                    acc = tape.add(acc, b)?;
                }
                if self.config.fusion == Fusion::Mean {
                    acc = tape.scale(acc, 1.0 / g as f64);
                }
                Ok(acc)
            }
            Fusion::Max => {
                let mut acc = branches[0];
                for &b in &branches[1..] {
                    acc = tape.maximum(acc, b)?;
                }
                Ok(acc)
            }
            Fusion::Min => {
                let mut acc = branches[0];
                for &b in &branches[1..] {
                    acc = tape.minimum(acc, b)?;
                }
                Ok(acc)
            }
        }
    }

    fn apply_dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let p = self.config.dropout;
        let Some(rng) = dropout_rng else { return x };
        if p <= 0.0 {
            return x;
        }
        let shape = tape.value(x).shape().to_vec();
        let numel: usize = shape.iter().product();
        let keep = 1.0 - p;
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                use rand::Rng;
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(shape, data).expect("static shape"));
        tape.mul(x, mask).expect("same shape")
    }

    /// Mean absolute error of a recorded prediction against a normalized
    /// target, as a scalar on the tape.
    pub fn mae_loss(&self, tape: &mut Tape, pred: Var, y_norm: &Array2<f64>) -> Result<Var> {
        let (n, h) = y_norm.dim();
        let target =
            tape.constant(Tensor::new(vec![n, h], y_norm.iter().copied().collect())?);
        let neg_t = tape.neg(target);
        let diff = tape.add(pred, neg_t)?;
        let absd = tape.abs(diff);
        let s = tape.sum(absd);
        Ok(tape.scale(s, 1.0 / (n * h) as f64))
    }

    /// Evaluation-mode forward returning the normalized prediction array.
    pub fn predict_normalized(
        &self,
        bundle: &GraphBundle,
        x_norm: &Array2<f64>,
        tfeat: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let (pred, _) = self.forward_tape(&mut tape, bundle, x_norm, tfeat, None)?;
        let t = tape.value(pred);
        Ok(Array2::from_shape_vec((self.n_nodes, self.horizon()), t.data().to_vec())
            .expect("shape [N,H]"))
    }
}

/// Strictly-future mask: entry `(i, j)` is `-inf` for `j > i`, else 0, so
/// position `i` only attends to `j <= i`.
pub fn causal_mask(m: usize) -> Tensor {
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            data[i * m + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![m, m], data).expect("static shape")
}

/// Scaled dot-product self-attention over one node's `[M, d]` slab with the
/// additive causal mask applied before scaling.
pub fn masked_attention(
    tape: &mut Tape,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    mask: Var,
) -> crate::diffcore::Result<Var> {
    let d_k = tape.value(w_k).shape()[1];
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let masked = tape.add(scores, mask)?;
    let scaled = tape.scale(masked, 1.0 / (d_k as f64).sqrt());
    let att = tape.softmax_rows(scaled)?;
    tape.matmul(att, v)
}

#[cfg(test)]
mod tests;
