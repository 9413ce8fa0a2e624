//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers with explicit shapes. Differentiable
//! programs are built by pushing operations onto a [`Tape`]; each op records
//! its operands so [`Tape::backward`] can replay the tape in reverse and
//! accumulate gradients via the chain rule.
//!
//! The engine is deliberately small: dense only, `f64` only, broadcasting
//! restricted to stretching size-1 axes. One tape is single-threaded;
//! independent tapes over read-only parameter snapshots may run on separate
//! threads.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("softmax_rows: row {row} has no finite entries")]
    DegenerateRow { row: usize },
    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major tensor. The only non-finite value a tensor may hold is the
/// `-inf` attention-mask sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(DiffError::InvalidTensor(format!(
                "dims must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::InvalidTensor(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn from_array2(a: &ndarray::Array2<f64>) -> Self {
        let (r, c) = a.dim();
        let data: Vec<f64> = a.iter().copied().collect();
        Tensor { shape: vec![r, c], data, requires_grad: false }
    }

    pub fn to_array2(&self) -> Result<ndarray::Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(DiffError::InvalidTensor(format!(
                "to_array2 on shape {:?}",
                self.shape
            )));
        }
        Ok(ndarray::Array2::from_shape_vec(
            (self.shape[0], self.shape[1]),
            self.data.clone(),
        )
        .expect("shape validated"))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Neg(Var),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    DilatedConv { x: Var, kernel: Var, dilation: usize, left_pad: usize },
    Sum(Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Slice0 { x: Var, index: usize },
    Stack0(Vec<Var>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records primitive applications in topological order (inputs always precede
/// consumers) and replays them in reverse for gradient accumulation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by the [`Var`]s of the tape that
/// produced them. Accumulators are freshly zero-initialized per pass, so
/// repeated passes over one tape yield identical results.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a leaf. Gradient is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(Op::Leaf, t, rg)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a, b), Tensor { shape: vec![m, n], data: out, requires_grad: rg }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Elementwise minimum, via `min(a,b) = -max(-a,-b)`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.neg(a);
        let nb = self.neg(b);
        let m = self.maximum(na, nb)?;
        Ok(self.neg(m))
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| DiffError::ShapeMismatch {
            op: name,
            detail: format!("{sa:?} vs {sb:?}"),
        })?;
        let out = broadcast_apply(
            self.value(a).data(),
            &sa,
            self.value(b).data(),
            &sb,
            &shape,
            f,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor { shape, data: out, requires_grad: rg }, rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
            requires_grad: v.requires_grad,
        };
        let rg = self.rg(a);
        self.push(op, out, rg)
    }

    /// Row-wise softmax with max-subtraction. `-inf` entries map to exactly 0;
    /// a row with no finite entry is an error.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_rows",
                detail: format!("want rank 2, got {:?}", v.shape),
            });
        }
        let (m, n) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v.data[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(DiffError::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = if row[j] == f64::NEG_INFINITY { 0.0 } else { (row[j] - mx).exp() };
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::SoftmaxRows(a),
            Tensor { shape: vec![m, n], data: out, requires_grad: rg },
            rg,
        ))
    }

    /// Causal dilated 1-d convolution over a `[time, channels]` input.
    ///
    /// Kernel tap `j` multiplies the sample `j * dilation` steps in the past,
    /// with `left_pad` zeros prepended, so `left_pad = (taps-1)*dilation`
    /// preserves length and output `t` depends only on inputs at times `<= t`.
    ///
    /// Kernel shapes: `[taps]` applies the same taps to every channel;
    /// `[taps, in_ch, out_ch]` additionally mixes channels.
    pub fn dilated_conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        dilation: usize,
        left_pad: usize,
    ) -> Result<Var> {
        if dilation == 0 {
            return Err(DiffError::ShapeMismatch { op: "dilated_conv1d", detail: "dilation must be >= 1".into() });
        }
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "dilated_conv1d",
                detail: format!("input must be [time, channels], got {xs:?}"),
            });
        }
        let (t_in, in_ch) = (xs[0], xs[1]);
        let (taps, out_ch) = match ks.as_slice() {
            [taps] => (*taps, in_ch),
            [taps, ki, ko] => {
                if *ki != in_ch {
                    return Err(DiffError::ShapeMismatch {
                        op: "dilated_conv1d",
                        detail: format!("kernel in_ch {ki} != input channels {in_ch}"),
                    });
                }
                (*taps, *ko)
            }
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "dilated_conv1d",
                    detail: format!("kernel must be [taps] or [taps,in,out], got {ks:?}"),
                })
            }
        };
        let span = (taps - 1) * dilation;
        let padded = t_in + left_pad;
        if padded <= span {
            return Err(DiffError::ShapeMismatch {
                op: "dilated_conv1d",
                detail: format!("kernel span {span} exceeds padded length {padded}"),
            });
        }
        let t_out = padded - span;
        // Output index t reads original input index t - left_pad + span - j*dilation.
        let offset = span as isize - left_pad as isize;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; t_out * out_ch];
        for t in 0..t_out {
            for j in 0..taps {
                let src = t as isize + offset - (j * dilation) as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let src = src as usize;
                if ks.len() == 1 {
                    let w = kv[j];
                    for c in 0..in_ch {
                        out[t * out_ch + c] += w * xv[src * in_ch + c];
                    }
                } else {
                    for c in 0..in_ch {
                        let xc = xv[src * in_ch + c];
                        let krow = &kv[(j * in_ch + c) * out_ch..(j * in_ch + c + 1) * out_ch];
                        let orow = &mut out[t * out_ch..(t + 1) * out_ch];
                        for o in 0..out_ch {
                            orow[o] += krow[o] * xc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Op::DilatedConv { x, kernel, dilation, left_pad },
            Tensor { shape: vec![t_out, out_ch], data: out, requires_grad: rg },
            rg,
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor { shape: vec![1], data: vec![s], requires_grad: rg }, rg)
    }

    /// Multiply every element by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| c * x).collect(),
            requires_grad: v.requires_grad,
        };
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("want rank 2, got {:?}", v.shape),
            });
        }
        let (m, n) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Tensor { shape: vec![n, m], data: out, requires_grad: rg }, rg))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != v.numel() || shape.iter().any(|&d| d == 0) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", v.shape),
            });
        }
        let out = Tensor { shape, data: v.data.clone(), requires_grad: v.requires_grad };
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Take subtensor `index` along axis 0. Rank-1 input yields shape `[1]`.
    pub fn slice0(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "slice0",
                detail: format!("index {index} out of {}", v.shape[0]),
            });
        }
        let inner: usize = v.shape[1..].iter().product();
        let shape = if v.shape.len() == 1 { vec![1] } else { v.shape[1..].to_vec() };
        let data = v.data[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Slice0 { x: a, index }, Tensor { shape, data, requires_grad: rg }, rg))
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::ShapeMismatch { op: "stack0", detail: "no parts".into() });
        }
        let inner_shape = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).numel());
        let mut rg = false;
        for &p in parts {
            if self.value(p).shape() != inner_shape.as_slice() {
                return Err(DiffError::ShapeMismatch {
                    op: "stack0",
                    detail: format!("{:?} vs {:?}", self.value(p).shape(), inner_shape),
                });
            }
            data.extend_from_slice(self.value(p).data());
            rg |= self.rg(p);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner_shape);
        Ok(self.push(Op::Stack0(parts.to_vec()), Tensor { shape, data, requires_grad: rg }, rg))
    }

    /// Reverse pass from a scalar root. Returns one gradient buffer per node
    /// that participates in the root's differentiable closure.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(DiffError::NonScalarRoot { shape: rv.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, update: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (gi, ui) in g.iter_mut().zip(update) {
                    *gi += ui;
                }
            }
            None => *slot = Some(update.to_vec()),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                if self.rg(*a) {
                    // dA[i,l] = dot(dC row i, B row l)
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let brow = &bv.data[l * n..(l + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + l] = acc;
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB[l,:] += A[i,l] * dC[i,:]
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let a_il = av.data[i * k + l];
                            if a_il == 0.0 {
                                continue;
                            }
                            let brow = &mut db[l * n..(l + 1) * n];
                            for j in 0..n {
                                brow[j] += a_il * grow[j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                let out_shape = node.value.shape.clone();
                for (v, _other) in [(a, b), (b, a)] {
                    if self.rg(*v) {
                        let reduced = reduce_to_shape(g, &out_shape, self.value(*v).shape());
                        self.accumulate(grads, *v, &reduced);
                    }
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape.clone();
                if self.rg(*a) {
                    let other = broadcast_to(self.value(*b).data(), self.value(*b).shape(), &out_shape);
                    let prod: Vec<f64> = g.iter().zip(&other).map(|(gi, oi)| gi * oi).collect();
                    let reduced = reduce_to_shape(&prod, &out_shape, self.value(*a).shape());
                    self.accumulate(grads, *a, &reduced);
                }
                if self.rg(*b) {
                    let other = broadcast_to(self.value(*a).data(), self.value(*a).shape(), &out_shape);
                    let prod: Vec<f64> = g.iter().zip(&other).map(|(gi, oi)| gi * oi).collect();
                    let reduced = reduce_to_shape(&prod, &out_shape, self.value(*b).shape());
                    self.accumulate(grads, *b, &reduced);
                }
            }
            Op::Maximum(a, b) => {
                let out_shape = node.value.shape.clone();
                let av = broadcast_to(self.value(*a).data(), self.value(*a).shape(), &out_shape);
                let bv = broadcast_to(self.value(*b).data(), self.value(*b).shape(), &out_shape);
                if self.rg(*a) {
                    let sel: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(gi, (x, y))| if x >= y { *gi } else { 0.0 })
                        .collect();
                    let reduced = reduce_to_shape(&sel, &out_shape, self.value(*a).shape());
                    self.accumulate(grads, *a, &reduced);
                }
                if self.rg(*b) {
                    let sel: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(gi, (x, y))| if y > x { *gi } else { 0.0 })
                        .collect();
                    let reduced = reduce_to_shape(&sel, &out_shape, self.value(*b).shape());
                    self.accumulate(grads, *b, &reduced);
                }
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                let da: Vec<f64> = g
                    .iter()
                    .zip(&av.data)
                    .map(|(gi, &x)| gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                let da: Vec<f64> = g.iter().zip(y).map(|(gi, &t)| gi * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                let da: Vec<f64> = g.iter().zip(y).map(|(gi, &s)| gi * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                let da: Vec<f64> = g.iter().zip(x).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value.data;
                let (m, n) = (node.value.shape[0], node.value.shape[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        da[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::DilatedConv { x, kernel, dilation, left_pad } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (t_in, in_ch) = (xv.shape[0], xv.shape[1]);
                let out_ch = node.value.shape[1];
                let t_out = node.value.shape[0];
                let taps = kv.shape[0];
                let span = (taps - 1) * dilation;
                let offset = span as isize - *left_pad as isize;
                let per_channel = kv.shape.len() == 1;
                let mut dx = vec![0.0; t_in * in_ch];
                let mut dk = vec![0.0; kv.numel()];
                for t in 0..t_out {
                    for j in 0..taps {
                        let src = t as isize + offset - (j * dilation) as isize;
                        if src < 0 || src >= t_in as isize {
                            continue;
                        }
                        let src = src as usize;
                        if per_channel {
                            let w = kv.data[j];
                            for c in 0..in_ch {
                                dx[src * in_ch + c] += w * g[t * out_ch + c];
                                dk[j] += xv.data[src * in_ch + c] * g[t * out_ch + c];
                            }
                        } else {
                            for c in 0..in_ch {
                                let xc = xv.data[src * in_ch + c];
                                let base = (j * in_ch + c) * out_ch;
                                let mut acc = 0.0;
                                for o in 0..out_ch {
                                    let go = g[t * out_ch + o];
                                    acc += kv.data[base + o] * go;
                                    dk[base + o] += xc * go;
                                }
                                dx[src * in_ch + c] += acc;
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    self.accumulate(grads, *x, &dx);
                }
                if self.rg(*kernel) {
                    self.accumulate(grads, *kernel, &dk);
                }
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &da);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape[0], node.value.shape[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g);
            }
            Op::Slice0 { x, index } => {
                let xv = self.value(*x);
                let inner: usize = xv.shape[1..].iter().product();
                let mut dx = vec![0.0; xv.numel()];
                dx[index * inner..(index + 1) * inner].copy_from_slice(g);
                self.accumulate(grads, *x, &dx);
            }
            Op::Stack0(parts) => {
                let inner = self.value(parts[0]).numel();
                for (i, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        self.accumulate(grads, p, &g[i * inner..(i + 1) * inner]);
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += a_il * brow[j];
            }
        }
    }
    out
}

/// Right-aligned broadcast of two shapes; only size-1 axes may stretch.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` embedded in `out_shape`, with stretched axes stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = strides_for(shape);
    let pad = out_shape.len() - shape.len();
    let mut s = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 && out_shape[pad + i] != 1 { 0 } else { base[i] };
    }
    s
}

fn broadcast_apply(
    a: &[f64],
    sa: &[usize],
    b: &[f64],
    sb: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if sa == out_shape && sb == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let stra = broadcast_strides(sa, out_shape);
    let strb = broadcast_strides(sb, out_shape);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a[off_a], b[off_b]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off_a += stra[ax];
            off_b += strb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off_a -= stra[ax] * out_shape[ax];
            off_b -= strb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn broadcast_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    broadcast_apply(data, shape, &[0.0], &[1], out_shape, |x, _| x)
}

/// Sum `grad` (laid out as `out_shape`) over the axes that were stretched to
/// reach `out_shape` from `shape`.
fn reduce_to_shape(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return grad.to_vec();
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    let str_small = broadcast_strides(shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += str_small[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= str_small[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
