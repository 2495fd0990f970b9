//! Minimal reverse-mode automatic differentiation over `f64` buffers.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Operations are coarse (fused attention, im2col
//! convolution, soft-target cross entropy) so a whole network step is a few
//! dozen nodes. Matrix products go through `matrixmultiply::dgemm`, which is
//! single-threaded and therefore bit-reproducible.

use std::fmt;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2-D convolution with square kernel and symmetric padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, n: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, dim: usize, probs: Vec<f64> },
    SelectStep { x: Var, batch: usize, seq: usize, dim: usize, step: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    GlobalAvgPool { x: Var, batch: usize, ch: usize, area: usize },
    Rows { x: Var, start: usize, count: usize, width: usize },
    SoftCrossEntropy { logits: Var, rows: usize, classes: usize, grad: Vec<f64> },
    SquaredDistance { a: Var, b: Var, rows: usize },
    DistanceToPoint { a: Var, rows: usize, point: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// Probability floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.len())
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided index
    // touched by an (m x k) * (k x n) product with the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
        );
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of a `(rows, classes)` buffer.
pub fn softmax_rows(values: &[f64], classes: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_exact_mut(classes) {
        softmax_row(row);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(128) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        self.push(value, shape.to_vec(), false, Op::Leaf)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        self.push(value, shape.to_vec(), true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        let cols = *shape.last().expect("tensor must have at least one dimension");
        (self.nodes[v.0].value.len() / cols, cols)
    }

    /// `(m, k) x (k, n)`; leading dimensions of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let bs = self.shape(b).to_vec();
        assert_eq!(bs.len(), 2, "matmul rhs must be 2-D");
        assert_eq!(bs[0], k, "matmul inner dimensions differ: {k} vs {}", bs[0]);
        let n = bs[1];
        let mut out = vec![0.0; m * n];
        gemm(
            m, k, n,
            self.value(a), (k as isize, 1),
            self.value(b), (n as isize, 1),
            0.0, &mut out, (n as isize, 1),
        );
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, shape, ng, Op::MatMul { a, b, m, k, n })
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, n) = self.rows_cols(x);
        assert_eq!(self.value(bias).len(), n, "bias length");
        let mut out = self.value(x).to_vec();
        let b = self.value(bias);
        for row in out.chunks_exact_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, shape, ng, Op::AddBias { x, bias, n })
    }

    /// `x W + b` for `x` of shape `(.., in)`, `W` of shape `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add length");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, shape, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "sub length");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, shape, ng, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(out, shape, ng, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(out, shape, ng, Op::Relu(a))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (rows, n) = self.rows_cols(x);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; rows * n];
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, shape, ng, Op::LayerNorm { x, gamma, beta, n, xhat, inv_std })
    }

    /// Multi-head self-attention on a packed `(batch * seq, 3 * dim)` tensor
    /// holding queries, keys and values side by side. Returns `(batch * seq, dim)`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (rows, width) = self.rows_cols(qkv);
        assert_eq!(rows, batch * seq, "attention rows");
        assert_eq!(width % 3, 0, "attention input must pack q, k, v");
        let dim = width / 3;
        assert_eq!(dim % heads, 0, "model width must divide into heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        let rs = width as isize;
        for bi in 0..batch {
            for h in 0..heads {
                let base = bi * seq * width;
                let q = &src[base + h * dh..];
                let k = &src[base + dim + h * dh..];
                let v = &src[base + 2 * dim + h * dh..];
                let p = &mut probs[(bi * heads + h) * seq * seq..(bi * heads + h + 1) * seq * seq];
                // scores = Q K^T
                gemm(seq, dh, seq, q, (rs, 1), k, (1, rs), 0.0, p, (seq as isize, 1));
                for row in p.chunks_exact_mut(seq) {
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    softmax_row(row);
                }
                let o = &mut out[bi * seq * dim + h * dh..];
                gemm(seq, seq, dh, p, (seq as isize, 1), v, (rs, 1), 0.0, o, (dim as isize, 1));
            }
        }
        let mut shape = self.shape(qkv).to_vec();
        *shape.last_mut().unwrap() = dim;
        let ng = self.needs(qkv);
        self.push(out, shape, ng, Op::Attention { qkv, batch, seq, heads, dim, probs })
    }

    /// Pick time step `step` from a `(batch * seq, dim)` tensor -> `(batch, dim)`.
    pub fn select_step(&mut self, x: Var, batch: usize, seq: usize, step: usize) -> Var {
        let (rows, dim) = self.rows_cols(x);
        assert_eq!(rows, batch * seq);
        assert!(step < seq);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            let r = b * seq + step;
            out.extend_from_slice(&xv[r * dim..(r + 1) * dim]);
        }
        let ng = self.needs(x);
        self.push(out, vec![batch, dim], ng, Op::SelectStep { x, batch, seq, dim, step })
    }

    /// Rows `start .. start + count` of a 2-D view of `x`.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let (rows, width) = self.rows_cols(x);
        assert!(start + count <= rows, "row slice out of range");
        let out = self.value(x)[start * width..(start + count) * width].to_vec();
        let ng = self.needs(x);
        self.push(out, vec![count, width], ng, Op::Rows { x, start, count, width })
    }

    /// Convolution of `x` `(B, Cin, H, W)` with `w` `(Cout, Cin, k, k)` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be (B, C, H, W)");
        assert_eq!(ws.len(), 4, "conv2d weight must be (Cout, Cin, k, k)");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad: (ws[2] - 1) / 2,
        };
        let (rows_c, area) = (geom.col_rows(), geom.out_area());
        let mut cols = vec![0.0; geom.batch * rows_c * area];
        let xv = self.value(x);
        let in_area = geom.height * geom.width;
        for bi in 0..geom.batch {
            im2col(&xv[bi * geom.in_ch * in_area..(bi + 1) * geom.in_ch * in_area], &geom, &mut cols[bi * rows_c * area..(bi + 1) * rows_c * area]);
        }
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; geom.batch * geom.out_ch * area];
        for bi in 0..geom.batch {
            let o = &mut out[bi * geom.out_ch * area..(bi + 1) * geom.out_ch * area];
            for (c, row) in o.chunks_exact_mut(area).enumerate() {
                row.fill(bv[c]);
            }
            gemm(
                geom.out_ch, rows_c, area,
                wv, (rows_c as isize, 1),
                &cols[bi * rows_c * area..], (area as isize, 1),
                1.0, o, (area as isize, 1),
            );
        }
        let shape = vec![geom.batch, geom.out_ch, geom.out_height(), geom.out_width()];
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, shape, ng, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Mean over the spatial axes of `(B, C, H, W)` -> `(B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (batch, ch, area) = (xs[0], xs[1], xs[2] * xs[3]);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        let ng = self.needs(x);
        self.push(out, vec![batch, ch], ng, Op::GlobalAvgPool { x, batch, ch, area })
    }

    /// Mean over rows of `-sum_c target_c * log(max(softmax(logits)_c, floor))`.
    /// Targets are constants.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Var {
        let (rows, classes) = self.rows_cols(logits);
        assert_eq!(targets.len(), rows * classes, "target shape");
        let probs = softmax_rows(self.value(logits), classes);
        let log_floor = PROB_FLOOR.ln();
        let inv_rows = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; rows * classes];
        for r in 0..rows {
            let p = &probs[r * classes..(r + 1) * classes];
            let t = &targets[r * classes..(r + 1) * classes];
            let z = &self.value(logits)[r * classes..(r + 1) * classes];
            // log-softmax computed directly for accuracy
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut active_mass = 0.0;
            for c in 0..classes {
                let lp = z[c] - lse;
                if lp >= log_floor {
                    loss -= t[c] * lp;
                    active_mass += t[c];
                } else {
                    loss -= t[c] * log_floor;
                }
            }
            let g = &mut grad[r * classes..(r + 1) * classes];
            for c in 0..classes {
                let active = z[c] - lse >= log_floor;
                g[c] = inv_rows * (p[c] * active_mass - if active { t[c] } else { 0.0 });
            }
        }
        let ng = self.needs(logits);
        self.push(vec![loss * inv_rows], vec![1], ng, Op::SoftCrossEntropy { logits, rows, classes, grad })
    }

    /// Mean over rows of `||a_r - b_r||^2`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Var {
        let (rows, _) = self.rows_cols(a);
        assert_eq!(self.value(a).len(), self.value(b).len(), "squared_distance shapes");
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![s / rows as f64], vec![1], ng, Op::SquaredDistance { a, b, rows })
    }

    /// Mean over rows of `||a_r - point||^2` for a constant point.
    pub fn distance_to_point(&mut self, a: Var, point: &[f64]) -> Var {
        let (rows, width) = self.rows_cols(a);
        assert_eq!(point.len(), width, "point dimension");
        let mut s = 0.0;
        for row in self.value(a).chunks_exact(width) {
            for (x, p) in row.iter().zip(point) {
                s += (x - p) * (x - p);
            }
        }
        let ng = self.needs(a);
        self.push(vec![s / rows as f64], vec![1], ng, Op::DistanceToPoint { a, rows, point: point.to_vec() })
    }

    /// `sum_i w_i * v_i` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let n = self.value(terms[0].0).len();
        let mut out = vec![0.0; n];
        for (v, w) in terms {
            assert_eq!(self.value(*v).len(), n);
            for (o, x) in out.iter_mut().zip(self.value(*v)) {
                *o += w * x;
            }
        }
        let shape = self.shape(terms[0].0).to_vec();
        let ng = terms.iter().any(|(v, _)| self.needs(*v));
        self.push(out, shape, ng, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, $len:expr) => {
                grad_slot(nodes, grads, $v, $len)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = acc!(*a, m * k) {
                    // dA += dC B^T
                    gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), 1.0, ga, (k as isize, 1));
                }
                if let Some(gb) = acc!(*b, k * n) {
                    // dB += A^T dC
                    gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), 1.0, gb, (n as isize, 1));
                }
            }
            Op::AddBias { x, bias, n } => {
                if let Some(gx) = acc!(*x, g.len()) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if let Some(gb) = acc!(*bias, *n) {
                    for row in g.chunks_exact(*n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = acc!(*v, g.len()) {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a, g.len()) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if let Some(gb) = acc!(*b, g.len()) {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc!(*a, g.len()) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += s * x;
                    }
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc!(*a, g.len()) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, n, xhat, inv_std } => {
                let n = *n;
                let gv = &nodes[gamma.0].value;
                if let Some(gg) = acc!(*gamma, n) {
                    for (row_g, row_h) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta, n) {
                    for row_g in g.chunks_exact(n) {
                        for j in 0..n {
                            gb[j] += row_g[j];
                        }
                    }
                }
                if let Some(gx) = acc!(*x, g.len()) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (row_g, row_h)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = row_g[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * row_h[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += inv_std[r] * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention { qkv, batch, seq, heads, dim, probs } => {
                let (batch, seq, heads, dim) = (*batch, *seq, *heads, *dim);
                let dh = dim / heads;
                let width = 3 * dim;
                let scale = 1.0 / (dh as f64).sqrt();
                let src = &nodes[qkv.0].value;
                let Some(gq) = acc!(*qkv, batch * seq * width) else { return };
                let rs = width as isize;
                let mut dp = vec![0.0; seq * seq];
                for bi in 0..batch {
                    for h in 0..heads {
                        let base = bi * seq * width;
                        let p = &probs[(bi * heads + h) * seq * seq..(bi * heads + h + 1) * seq * seq];
                        let go = &g[bi * seq * dim + h * dh..];
                        // dV += P^T dO
                        gemm(seq, seq, dh, p, (1, seq as isize), go, (dim as isize, 1), 1.0, &mut gq[base + 2 * dim + h * dh..], (rs, 1));
                        // dP = dO V^T
                        let v = &src[base + 2 * dim + h * dh..];
                        gemm(seq, dh, seq, go, (dim as isize, 1), v, (1, rs), 0.0, &mut dp, (seq as isize, 1));
                        // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale
                        for (prow, drow) in p.chunks_exact(seq).zip(dp.chunks_exact_mut(seq)) {
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (d, pv) in drow.iter_mut().zip(prow) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        let q = &src[base + h * dh..];
                        let k = &src[base + dim + h * dh..];
                        // dQ += dS K ; dK += dS^T Q
                        gemm(seq, seq, dh, &dp, (seq as isize, 1), k, (rs, 1), 1.0, &mut gq[base + h * dh..], (rs, 1));
                        gemm(seq, seq, dh, &dp, (1, seq as isize), q, (rs, 1), 1.0, &mut gq[base + dim + h * dh..], (rs, 1));
                    }
                }
            }
            Op::SelectStep { x, batch, seq, dim, step } => {
                if let Some(gx) = acc!(*x, batch * seq * dim) {
                    for b in 0..*batch {
                        let r = b * seq + step;
                        for j in 0..*dim {
                            gx[r * dim + j] += g[b * dim + j];
                        }
                    }
                }
            }
            Op::Rows { x, start, count, width } => {
                let total = nodes[x.0].value.len();
                if let Some(gx) = acc!(*x, total) {
                    let dst = &mut gx[start * width..(start + count) * width];
                    for (o, v) in dst.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows_c, area) = (geom.col_rows(), geom.out_area());
                let oc = geom.out_ch;
                if let Some(gb) = acc!(*b, oc) {
                    for bi in 0..geom.batch {
                        for c in 0..oc {
                            let off = (bi * oc + c) * area;
                            gb[c] += g[off..off + area].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = acc!(*w, oc * rows_c) {
                    for bi in 0..geom.batch {
                        // dW += dOut_b cols_b^T
                        gemm(
                            oc, area, rows_c,
                            &g[bi * oc * area..], (area as isize, 1),
                            &cols[bi * rows_c * area..], (1, area as isize),
                            1.0, gw, (rows_c as isize, 1),
                        );
                    }
                }
                let in_len = geom.batch * geom.in_ch * geom.height * geom.width;
                let wv = &nodes[w.0].value;
                if let Some(gx) = acc!(*x, in_len) {
                    let mut dcols = vec![0.0; rows_c * area];
                    let in_area = geom.in_ch * geom.height * geom.width;
                    for bi in 0..geom.batch {
                        // dcols = W^T dOut_b
                        gemm(
                            rows_c, oc, area,
                            wv, (1, rows_c as isize),
                            &g[bi * oc * area..], (area as isize, 1),
                            0.0, &mut dcols, (area as isize, 1),
                        );
                        col2im(&dcols, geom, &mut gx[bi * in_area..(bi + 1) * in_area]);
                    }
                }
            }
            Op::GlobalAvgPool { x, batch, ch, area } => {
                if let Some(gx) = acc!(*x, batch * ch * area) {
                    let inv = 1.0 / *area as f64;
                    for (i, chunk) in gx.chunks_exact_mut(*area).enumerate() {
                        let v = g[i] * inv;
                        for o in chunk.iter_mut() {
                            *o += v;
                        }
                    }
                }
            }
            Op::SoftCrossEntropy { logits, rows, classes, grad } => {
                if let Some(gl) = acc!(*logits, rows * classes) {
                    for (o, v) in gl.iter_mut().zip(grad) {
                        *o += g[0] * v;
                    }
                }
            }
            Op::SquaredDistance { a, b, rows } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let f = 2.0 * g[0] / *rows as f64;
                if let Some(ga) = acc!(*a, av.len()) {
                    for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += f * (x - y);
                    }
                }
                if let Some(gb) = acc!(*b, bv.len()) {
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= f * (x - y);
                    }
                }
            }
            Op::DistanceToPoint { a, rows, point } => {
                let av = &nodes[a.0].value;
                let f = 2.0 * g[0] / *rows as f64;
                let width = point.len();
                if let Some(ga) = acc!(*a, av.len()) {
                    for (orow, xrow) in ga.chunks_exact_mut(width).zip(av.chunks_exact(width)) {
                        for j in 0..width {
                            orow[j] += f * (xrow[j] - point[j]);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    if let Some(gv) = acc!(*v, g.len()) {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn im2col(x: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (h, w, k, s, p) = (geom.height as isize, geom.width as isize, geom.kernel, geom.stride as isize, geom.pad as isize);
    let area = oh * ow;
    for c in 0..geom.in_ch {
        let plane = &x[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * area..((c * k + ki) * k + kj + 1) * area];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *d = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (h, w, k, s, p) = (geom.height as isize, geom.width as isize, geom.kernel, geom.stride as isize, geom.pad as isize);
    let area = oh * ow;
    for c in 0..geom.in_ch {
        let plane = &mut dx[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * area..((c * k + ki) * k + kj + 1) * area];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                    for ox in 0..ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v` (zeros when `v` does not
    /// influence the root).
    pub fn of(&self, v: Var, len: usize) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; len])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks d(root)/d(input) against central differences for every entry.
    fn check<F>(inputs: Vec<(Vec<f64>, Vec<usize>)>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(v, s)| tape.leaf(v.clone(), s)).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let eval = |inputs: &[(Vec<f64>, Vec<usize>)]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|(v, s)| t.leaf(v.clone(), s)).collect();
            let r = build(&mut t, &vs);
            t.scalar(r)
        };
        let h = 1e-6;
        for (i, (vals, _)) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[i], vals.len());
            for j in 0..vals.len() {
                let mut plus = inputs.clone();
                plus[i].0[j] += h;
                let mut minus = inputs.clone();
                minus[i].0[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} entry {j}: analytic {} numeric {numeric}", analytic[j]);
            }
        }
    }

    /// Random projection to a scalar so every output entry matters.
    fn probe(t: &mut Tape, x: Var, seed: u64) -> Var {
        let n = t.value(x).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_vec(&mut rng, n);
        let wv = t.constant(w, &[n, 1]);
        t.matmul_flat(x, wv)
    }

    impl Tape {
        /// Treat `x` as one row vector and multiply by `(n, 1)` weights.
        fn matmul_flat(&mut self, x: Var, w: Var) -> Var {
            let n = self.value(x).len();
            let saved = self.nodes[x.0].shape.clone();
            self.nodes[x.0].shape = vec![1, n];
            let y = self.matmul(x, w);
            self.nodes[x.0].shape = saved;
            self.nodes[y.0].shape = vec![1];
            y
        }
    }

    #[test]
    fn matmul_bias_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![(rand_vec(&mut rng, 12), vec![3, 4]), (rand_vec(&mut rng, 20), vec![4, 5]), (rand_vec(&mut rng, 5), vec![5])],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]);
                let r = t.relu(y);
                probe(t, r, 9)
            },
        );
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![(rand_vec(&mut rng, 12), vec![2, 6]), (rand_vec(&mut rng, 6), vec![6]), (rand_vec(&mut rng, 6), vec![6])],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                probe(t, y, 3)
            },
        );
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, s, d) = (2, 4, 6);
        check(vec![(rand_vec(&mut rng, b * s * 3 * d), vec![b * s, 3 * d])], |t, v| {
            let y = t.attention(v[0], b, s, 2);
            probe(t, y, 4)
        });
    }

    #[test]
    fn conv_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, kern) in [(1, 3), (2, 3), (2, 1)] {
            check(
                vec![
                    (rand_vec(&mut rng, 2 * 3 * 5 * 6), vec![2, 3, 5, 6]),
                    (rand_vec(&mut rng, 4 * 3 * kern * kern), vec![4, 3, kern, kern]),
                    (rand_vec(&mut rng, 4), vec![4]),
                ],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride);
                    let p = t.global_avg_pool(y);
                    let q = t.relu(y);
                    let a = probe(t, p, 5);
                    let b = probe(t, q, 6);
                    t.weighted_sum(&[(a, 1.0), (b, 0.5)])
                },
            );
        }
    }

    #[test]
    fn select_rows_and_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![(rand_vec(&mut rng, 3 * 4 * 2), vec![12, 2]), (rand_vec(&mut rng, 6), vec![3, 2])], |t, v| {
            let last = t.select_step(v[0], 3, 4, 3);
            let d = t.squared_distance(last, v[1]);
            let top = t.rows(v[0], 2, 5);
            let e = t.distance_to_point(top, &[0.3, -0.1]);
            let s = t.scale(e, 0.7);
            let diff = t.sub(last, v[1]);
            let sum = t.add(diff, last);
            let f = probe(t, sum, 8);
            t.weighted_sum(&[(d, 1.0), (s, 2.0), (f, 1.0)])
        });
    }

    #[test]
    fn soft_cross_entropy_grad_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_vec(&mut rng, 3 * 4);
        let mut targets = rand_vec(&mut rng, 12).iter().map(|v| v.abs()).collect::<Vec<_>>();
        for row in targets.chunks_exact_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let tg = targets.clone();
        check(vec![(logits.clone(), vec![3, 4])], move |t, v| t.soft_cross_entropy(v[0], &tg));

        let mut t = Tape::new();
        let l = t.constant(logits.clone(), &[3, 4]);
        let ce = t.soft_cross_entropy(l, &targets);
        let probs = softmax_rows(&logits, 4);
        let want: f64 = (0..12).map(|i| -targets[i] * probs[i].ln()).sum::<f64>() / 3.0;
        assert!((t.scalar(ce) - want).abs() < 1e-12);
    }

    #[test]
    fn floored_probabilities_carry_no_gradient() {
        let mut t = Tape::new();
        let l = t.leaf(vec![0.0, -40.0], &[1, 2]);
        let ce = t.soft_cross_entropy(l, &[0.0, 1.0]);
        assert!((t.scalar(ce) + PROB_FLOOR.ln()).abs() < 1e-12);
        let g = t.backward(ce).of(l, 2);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }
}
