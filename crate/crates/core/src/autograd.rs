//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes whose inputs do not
//! depend on any trainable leaf are marked as constants and skipped during the
//! backward sweep, so frozen sub-networks cost a forward pass only.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    PickCols(Var, Vec<usize>),
    LogClamp(Var, f64),
    RowSqNorm(Var),
    WeightedSum(Var, Vec<f64>),
    Lincomb(Vec<(Var, f64)>),
    AttnScores { query: Var, memory: Var, steps: usize },
    AttnContext { weights: Var, memory: Var, steps: usize },
    LstmCell { pre: Var, c_prev: Var, gates: Tensor, tanh_c: Tensor },
    GradReverse(Var, f64),
    EmbedRows(Var, Vec<usize>),
    TileRows(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    params_used: Vec<(ParamId, Var)>,
    trainable: Vec<bool>,
}

impl Graph {
    /// A graph in which every parameter is a constant.
    pub fn inference() -> Self {
        Self::with_trainable(Vec::new())
    }

    /// `trainable[id]` selects which parameters receive gradients.
    pub fn with_trainable(trainable: Vec<bool>) -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            param_vars: Vec::new(),
            params_used: Vec::new(),
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient regardless of parameter selection.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf for parameter `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if id.0 >= self.param_vars.len() {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.trainable.get(id.0).copied().unwrap_or(false);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.param_vars[id.0] = Some(v);
        if trainable {
            self.params_used.push((id, v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul {:?} x {:?}", va, vb);
        let out = va.matmul(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let vb = self.value(bias);
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), vb.cols(), "bias width");
        let bias_row = vb.data().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias_row) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row count");
            let w = v.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(v.row(r));
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column count");
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let va = self.value(a);
        assert!(start + width <= va.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows(), width);
        for r in 0..va.rows() {
            out.row_mut(r)
                .copy_from_slice(&va.row(r)[start..start + width]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let va = self.value(a);
        assert!(start + count <= va.rows(), "slice_rows out of range");
        let out = va.slice_rows(start, count);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Column `cols[r]` of every row `r`, as an `r x 1` tensor.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), cols.len(), "pick_cols index count");
        let data = cols.iter().enumerate().map(|(r, &c)| va.get(r, c)).collect();
        let out = Tensor::from_vec(cols.len(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::PickCols(a, cols.to_vec()), ng)
    }

    /// `ln(max(a, floor))` elementwise; the gradient is zero where clamped.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor).ln());
        let ng = self.ng(a);
        self.push(out, Op::LogClamp(a, floor), ng)
    }

    /// Squared L2 norm of every row, as an `r x 1` tensor.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows())
            .map(|r| va.row(r).iter().map(|v| v * v).sum())
            .collect();
        let out = Tensor::from_vec(va.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::RowSqNorm(a), ng)
    }

    /// `sum_r w[r] * sum_c a[r, c]` as a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), weights.len(), "weighted_sum weight count");
        let mut s = 0.0;
        for (r, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                s += w * va.row(r).iter().sum::<f64>();
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), ng)
    }

    /// `sum_k c_k * v_k` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let (r, c) = self.value(terms[0].0).shape();
        let mut out = Tensor::zeros(r, c);
        for &(v, k) in terms {
            out.add_scaled(self.value(v), k);
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(out, Op::Lincomb(terms.to_vec()), ng)
    }

    /// Dot-product scores `s[b, t] = query[b] . memory[t * B + b]`.
    pub fn attn_scores(&mut self, query: Var, memory: Var, steps: usize) -> Var {
        let q = self.value(query);
        let m = self.value(memory);
        let batch = q.rows();
        assert_eq!(m.rows(), steps * batch, "attention memory rows");
        assert_eq!(m.cols(), q.cols(), "attention width");
        let mut out = Tensor::zeros(batch, steps);
        for b in 0..batch {
            let qb = q.row(b);
            for t in 0..steps {
                out.set(b, t, dot(qb, m.row(t * batch + b)));
            }
        }
        let ng = self.ng(query) || self.ng(memory);
        self.push(
            out,
            Op::AttnScores {
                query,
                memory,
                steps,
            },
            ng,
        )
    }

    /// Context vectors `c[b] = sum_t w[b, t] * memory[t * B + b]`.
    pub fn attn_context(&mut self, weights: Var, memory: Var, steps: usize) -> Var {
        let w = self.value(weights);
        let m = self.value(memory);
        let batch = w.rows();
        assert_eq!(w.cols(), steps, "attention weight width");
        assert_eq!(m.rows(), steps * batch, "attention memory rows");
        let width = m.cols();
        let mut out = Tensor::zeros(batch, width);
        for b in 0..batch {
            for t in 0..steps {
                let a = w.get(b, t);
                if a == 0.0 {
                    continue;
                }
                let src = m.row(t * batch + b);
                for (o, s) in out.row_mut(b).iter_mut().zip(src) {
                    *o += a * s;
                }
            }
        }
        let ng = self.ng(weights) || self.ng(memory);
        self.push(
            out,
            Op::AttnContext {
                weights,
                memory,
                steps,
            },
            ng,
        )
    }

    /// LSTM cell on pre-activations (`B x 4H`, gate order i, f, g, o).
    /// Returns `[h | c]` as a `B x 2H` tensor.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Var {
        let p = self.value(pre);
        let cp = self.value(c_prev);
        let hidden = cp.cols();
        let batch = cp.rows();
        assert_eq!(p.shape(), (batch, 4 * hidden), "lstm pre-activation shape");
        let mut gates = Tensor::zeros(batch, 4 * hidden);
        let mut tanh_c = Tensor::zeros(batch, hidden);
        let mut out = Tensor::zeros(batch, 2 * hidden);
        for b in 0..batch {
            let pr = p.row(b);
            let g = gates.row_mut(b);
            for k in 0..hidden {
                g[k] = sigmoid(pr[k]);
                g[hidden + k] = sigmoid(pr[hidden + k]);
                g[2 * hidden + k] = pr[2 * hidden + k].tanh();
                g[3 * hidden + k] = sigmoid(pr[3 * hidden + k]);
            }
            let g = gates.row(b);
            let cpr = cp.row(b);
            let tc = tanh_c.row_mut(b);
            let o = out.row_mut(b);
            for k in 0..hidden {
                let c = g[hidden + k] * cpr[k] + g[k] * g[2 * hidden + k];
                let t = c.tanh();
                tc[k] = t;
                o[k] = g[3 * hidden + k] * t;
                o[hidden + k] = c;
            }
        }
        let ng = self.ng(pre) || self.ng(c_prev);
        self.push(
            out,
            Op::LstmCell {
                pre,
                c_prev,
                gates,
                tanh_c,
            },
            ng,
        )
    }

    /// Identity forward; multiplies the backward gradient by `-scale`.
    pub fn grad_reverse(&mut self, a: Var, scale: f64) -> Var {
        let out = self.value(a).clone();
        let ng = self.ng(a);
        self.push(out, Op::GradReverse(a, scale), ng)
    }

    /// Rows `ids[i]` of `table`.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::EmbedRows(table, ids.to_vec()), ng)
    }

    /// Stacks `times` copies of `a` along rows.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.len() * times);
        for _ in 0..times {
            data.extend_from_slice(va.data());
        }
        let out = Tensor::from_vec(va.rows() * times, va.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::TileRows(a, times), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let vb = self.value(*b);
                    let ga = slot(grads, *a, self);
                    gemm(g, false, vb, true, ga, 1.0);
                }
                if self.ng(*b) {
                    let va = self.value(*a);
                    let gb = slot(grads, *b, self);
                    gemm(va, true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g, 1.0);
                self.accum(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g, 1.0);
                self.accum(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let vb = self.value(*b);
                    let ga = slot(grads, *a, self);
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += x * y;
                    }
                }
                if self.ng(*b) {
                    let va = self.value(*a);
                    let gb = slot(grads, *b, self);
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                self.accum(grads, *a, g, 1.0);
                if self.ng(*bias) {
                    let gb = slot(grads, *bias, self);
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g, *s),
            Op::GradReverse(a, s) => self.accum(grads, *a, g, -*s),
            Op::Sigmoid(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let ga = slot(grads, *a, self);
                    for ((o, gy), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gy * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let ga = slot(grads, *a, self);
                    for ((o, gy), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gy * (1.0 - yv * yv);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let gp = slot(grads, p, self);
                        for r in 0..g.rows() {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w])
                            {
                                *o += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        let gp = slot(grads, p, self);
                        for (o, x) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let w = g.cols();
                    let ga = slot(grads, *a, self);
                    for r in 0..g.rows() {
                        for (o, x) in ga.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, self);
                    let off = start * g.cols();
                    for (o, x) in ga.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
            }
            Op::Softmax(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let ga = slot(grads, *a, self);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let ga = slot(grads, *a, self);
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(gr) {
                            *o += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::PickCols(a, cols) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, self);
                    for (r, &c) in cols.iter().enumerate() {
                        let v = ga.get(r, c) + g.get(r, 0);
                        ga.set(r, c, v);
                    }
                }
            }
            Op::LogClamp(a, floor) => {
                if self.ng(*a) {
                    let x = self.value(*a);
                    let ga = slot(grads, *a, self);
                    for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xv > *floor {
                            *o += gv / xv;
                        }
                    }
                }
            }
            Op::RowSqNorm(a) => {
                if self.ng(*a) {
                    let x = self.value(*a);
                    let ga = slot(grads, *a, self);
                    for r in 0..x.rows() {
                        let k = 2.0 * g.get(r, 0);
                        for (o, xv) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o += k * xv;
                        }
                    }
                }
            }
            Op::WeightedSum(a, weights) => {
                if self.ng(*a) {
                    let s = g.item();
                    let ga = slot(grads, *a, self);
                    for (r, w) in weights.iter().enumerate() {
                        if *w != 0.0 {
                            for o in ga.row_mut(r) {
                                *o += s * w;
                            }
                        }
                    }
                }
            }
            Op::Lincomb(terms) => {
                for &(v, k) in terms {
                    self.accum(grads, v, g, k);
                }
            }
            Op::AttnScores {
                query,
                memory,
                steps,
            } => {
                let batch = g.rows();
                if self.ng(*query) {
                    let m = self.value(*memory);
                    let gq = slot(grads, *query, self);
                    for b in 0..batch {
                        for t in 0..*steps {
                            let k = g.get(b, t);
                            for (o, mv) in gq.row_mut(b).iter_mut().zip(m.row(t * batch + b)) {
                                *o += k * mv;
                            }
                        }
                    }
                }
                if self.ng(*memory) {
                    let q = self.value(*query);
                    let gm = slot(grads, *memory, self);
                    for b in 0..batch {
                        for t in 0..*steps {
                            let k = g.get(b, t);
                            for (o, qv) in gm.row_mut(t * batch + b).iter_mut().zip(q.row(b)) {
                                *o += k * qv;
                            }
                        }
                    }
                }
            }
            Op::AttnContext {
                weights,
                memory,
                steps,
            } => {
                let batch = g.rows();
                if self.ng(*weights) {
                    let m = self.value(*memory);
                    let gw = slot(grads, *weights, self);
                    for b in 0..batch {
                        for t in 0..*steps {
                            let v = gw.get(b, t) + dot(g.row(b), m.row(t * batch + b));
                            gw.set(b, t, v);
                        }
                    }
                }
                if self.ng(*memory) {
                    let w = self.value(*weights);
                    let gm = slot(grads, *memory, self);
                    for b in 0..batch {
                        for t in 0..*steps {
                            let a = w.get(b, t);
                            for (o, gv) in gm.row_mut(t * batch + b).iter_mut().zip(g.row(b)) {
                                *o += a * gv;
                            }
                        }
                    }
                }
            }
            Op::LstmCell {
                pre,
                c_prev,
                gates,
                tanh_c,
            } => {
                let hidden = tanh_c.cols();
                let batch = tanh_c.rows();
                let cp = self.value(*c_prev);
                let mut dpre = Tensor::zeros(batch, 4 * hidden);
                let mut dcp = Tensor::zeros(batch, hidden);
                for b in 0..batch {
                    let gr = g.row(b);
                    let gt = gates.row(b);
                    let tc = tanh_c.row(b);
                    let cpr = cp.row(b);
                    let dp = dpre.row_mut(b);
                    for k in 0..hidden {
                        let (i, f, gg, o) =
                            (gt[k], gt[hidden + k], gt[2 * hidden + k], gt[3 * hidden + k]);
                        let gh = gr[k];
                        let dc = gr[hidden + k] + gh * o * (1.0 - tc[k] * tc[k]);
                        let d_o = gh * tc[k];
                        dp[k] = dc * gg * i * (1.0 - i);
                        dp[hidden + k] = dc * cpr[k] * f * (1.0 - f);
                        dp[2 * hidden + k] = dc * i * (1.0 - gg * gg);
                        dp[3 * hidden + k] = d_o * o * (1.0 - o);
                        dcp.row_mut(b)[k] = dc * f;
                    }
                }
                self.accum(grads, *pre, &dpre, 1.0);
                self.accum(grads, *c_prev, &dcp, 1.0);
            }
            Op::EmbedRows(table, ids) => {
                if self.ng(*table) {
                    let gt = slot(grads, *table, self);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::TileRows(a, times) => {
                if self.ng(*a) {
                    let ga = slot(grads, *a, self);
                    let n = ga.len();
                    for k in 0..*times {
                        for (o, x) in ga.data_mut().iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                            *o += x;
                        }
                    }
                }
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, k: f64) {
        if self.ng(v) {
            slot(grads, v, self).add_scaled(g, k);
        }
    }

    /// Parameters that took part in this graph and are trainable.
    pub fn trainable_params(&self) -> &[(ParamId, Var)] {
        &self.params_used
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, graph: &Graph) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| {
        let (r, c) = graph.value(v).shape();
        Tensor::zeros(r, c)
    })
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every trainable parameter used in `graph`; parameters the
    /// loss does not reach get zeros.
    pub fn for_params(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        graph
            .trainable_params()
            .iter()
            .map(|&(id, v)| {
                let g = self.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = graph.value(v).shape();
                    Tensor::zeros(r, c)
                });
                (id, g)
            })
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference checking used by the module tests.

    use super::*;

    /// Compares the analytic gradient of `f` at each input with central
    /// differences. `f` builds a scalar from the given input leaves.
    pub fn check<F>(inputs: &[Tensor], f: F, rel_tol: f64, abs_floor: f64) -> Result<(), String>
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |perturbed: &[Tensor]| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let h = 1e-5;
        let mut work = inputs.to_vec();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
            for idx in 0..inputs[k].len() {
                let orig = work[k].data()[idx];
                work[k].data_mut()[idx] = orig + h;
                let up = eval(&work);
                work[k].data_mut()[idx] = orig - h;
                let down = eval(&work);
                work[k].data_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs();
                if err > abs_floor && err > rel_tol * a.abs().max(numeric.abs()) {
                    return Err(format!(
                        "input {k} entry {idx}: analytic {a:.9e} vs numeric {numeric:.9e}"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn sum_all(g: &mut Graph, v: Var) -> Var {
        let rows = g.value(v).rows();
        g.weighted_sum(v, vec![1.0; rows])
    }

    /// Reduces with fixed random weights so every output entry matters.
    fn probe(g: &mut Graph, v: Var, seed: u64) -> Var {
        let (r, c) = g.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_t(&mut rng, r, c));
        let m = g.mul(v, w);
        sum_all(g, m)
    }

    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let a = rand_t(&mut rng, 3, 4);
            let b = rand_t(&mut rng, 4, 2);
            let c = rand_t(&mut rng, 3, 2);
            let bias = rand_t(&mut rng, 1, 2);
            check(
                &[a, b, c, bias],
                |g, v| {
                    let m = g.matmul(v[0], v[1]);
                    let s = g.sub(m, v[2]);
                    let p = g.mul(s, v[2]);
                    let q = g.add_bias(p, v[3]);
                    let t = g.tanh(q);
                    let sg = g.sigmoid(t);
                    let sc = g.scale(sg, 1.7);
                    let ad = g.add(sc, m);
                    probe(g, ad, trial)
                },
                TOL,
                FLOOR,
            )
            .unwrap();
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let a = rand_t(&mut rng, 4, 3);
            let b = rand_t(&mut rng, 4, 2);
            let table = rand_t(&mut rng, 5, 3);
            check(
                &[a, b, table],
                |g, v| {
                    let cc = g.concat_cols(&[v[0], v[1]]);
                    let sc = g.slice_cols(cc, 1, 3);
                    let sr = g.slice_rows(sc, 1, 2);
                    let e = g.embed_rows(v[2], &[4, 0, 4]);
                    let cr = g.concat_rows(&[sr, e]);
                    let tiled = g.tile_rows(cr, 2);
                    let n = g.row_sq_norm(tiled);
                    let ws = g.weighted_sum(n, vec![0.3, -0.5, 1.0, 2.0, 0.0, 1.5, -1.0, 0.25, 0.5, 0.1]);
                    let other = probe(g, cr, trial);
                    g.lincomb(&[(ws, 0.7), (other, -1.3)])
                },
                TOL,
                FLOOR,
            )
            .unwrap();
        }
    }

    #[test]
    fn softmax_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let a = rand_t(&mut rng, 3, 5);
            check(
                &[a],
                |g, v| {
                    let p = g.softmax(v[0]);
                    let pk = g.pick_cols(p, &[0, 4, 2]);
                    let l = g.log_clamp(pk, 1e-12);
                    let ls = g.log_softmax(v[0]);
                    let x = sum_all(g, l);
                    let y = probe(g, ls, trial);
                    g.lincomb(&[(x, 1.0), (y, 1.0)])
                },
                TOL,
                FLOOR,
            )
            .unwrap();
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_t(&mut rng, 1, 4);
        let mut g = Graph::inference();
        let x = g.input(logits.clone());
        let p = g.softmax(x);
        let pk = g.pick_cols(p, &[2]);
        let l = g.log_clamp(pk, 1e-12);
        let loss = g.scale(l, -1.0);
        let grads = g.backward(loss);
        let probs = softmax_rows(&logits);
        for c in 0..4 {
            let expect = probs.get(0, c) - if c == 2 { 1.0 } else { 0.0 };
            assert!((grads.get(x).unwrap().get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_and_lstm_cell_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let (batch, steps, width, hidden) = (2, 3, 4, 3);
            let q = rand_t(&mut rng, batch, width);
            let mem = rand_t(&mut rng, steps * batch, width);
            let pre = rand_t(&mut rng, batch, 4 * hidden).map(|v| 2.0 * v);
            let cp = rand_t(&mut rng, batch, hidden);
            check(
                &[q, mem, pre, cp],
                |g, v| {
                    let s = g.attn_scores(v[0], v[1], steps);
                    let a = g.softmax(s);
                    let ctx = g.attn_context(a, v[1], steps);
                    let cell = g.lstm_cell(v[2], v[3]);
                    let x = probe(g, ctx, trial);
                    let y = probe(g, cell, trial + 100);
                    g.lincomb(&[(x, 1.0), (y, 1.0)])
                },
                TOL,
                FLOOR,
            )
            .unwrap();
        }
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negated_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_t(&mut rng, 2, 3);
        let mut g = Graph::inference();
        let x = g.input(a.clone());
        let r = g.grad_reverse(x, 0.5);
        assert_eq!(g.value(r), &a);
        let loss = probe(&mut g, r, 9);
        let grads = g.backward(loss);
        let rev = grads.get(x).unwrap().clone();

        let mut g2 = Graph::inference();
        let x2 = g2.input(a);
        let loss2 = probe(&mut g2, x2, 9);
        let plain = g2.backward(loss2).get(x2).unwrap().clone();
        assert!(rev.max_abs_diff(&plain.map(|v| -0.5 * v)) < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::inference();
        let c = g.constant(Tensor::filled(2, 2, 1.0));
        let x = g.input(Tensor::filled(2, 2, 3.0));
        let m = g.mul(c, x);
        let loss = sum_all(&mut g, m);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &Tensor::filled(2, 2, 1.0));
    }
}
