//! Define-by-run tape. Every op records its inputs plus whatever forward
//! state its vector-Jacobian product needs; [`Tape::backward`] walks the
//! nodes in reverse creation order.

use crate::{Gradients, Matrix, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize },
    Embed { table: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    MaskRows { x: Var, fill: Var, mask: Vec<bool> },
    Dropout { x: Var, scale: Vec<f64> },
    LogSoftmax(Var),
    External { x: Var, grad: Matrix },
    WeightedSum(Vec<(Var, f64)>),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Const, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A parameter read as a constant: no gradient reaches it.
    pub fn param_detached(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, needs)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMulT(a, b), out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), out, needs)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width mismatch");
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % cols];
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(Op::AddBias(a, bias), out, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let needs = self.needs(a);
        self.push(Op::Scale(a, s), out, needs)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let needs = self.needs(a);
        self.push(Op::Gelu(a), out, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, out, needs)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. With `causal`, query `i` sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(heads >= 1 && d % heads == 0, "model width {d} not divisible by {heads} heads");
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(kv.rows(), vv.rows());
        if causal {
            assert!(qv.rows() <= kv.rows(), "causal attention needs at least as many keys as queries");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tq = qv.rows();
        let mut out = Matrix::zeros(tq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = column_block(qv, h * dh, dh);
            let kh = column_block(kv, h * dh, dh);
            let vh = column_block(vv, h * dh, dh);
            let mut s = qh.matmul_t(&kh);
            for i in 0..tq {
                let row = s.row_mut(i);
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if causal && j > i { f64::NEG_INFINITY } else { *x * scale };
                }
            }
            let p = s.softmax_rows();
            let oh = p.matmul(&vh);
            set_column_block(&mut out, &oh, h * dh);
            probs.push(p);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::Attention { q, k, v, heads, probs }, out, needs)
    }

    /// Unfolds `x` (T×C) into rows of `kernel` consecutive frames (zero
    /// padded by `pad` on both ends) taken every `stride` frames.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.shape();
        assert!(t + 2 * pad >= kernel, "sequence of {t} frames shorter than kernel {kernel}");
        let t_out = conv_out_len(t, kernel, stride, pad);
        let mut out = Matrix::zeros(t_out, kernel * c);
        for o in 0..t_out {
            let row = out.row_mut(o);
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    row[j * c..(j + 1) * c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::Im2Col { x, kernel, stride, pad }, out, needs)
    }

    /// Row lookup into `table`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "embedding id {id} out of range {}", tv.rows());
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let needs = self.needs(table);
        self.push(Op::Embed { table, ids: ids.to_vec() }, out, needs)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat_rows width mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a, b), out, needs)
    }

    /// Replaces every row `r` with `mask[r]` set by the `1×d` row `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Var {
        let (xv, fv) = (self.value(x), self.value(fill));
        assert_eq!(mask.len(), xv.rows(), "mask length mismatch");
        assert_eq!(fv.shape(), (1, xv.cols()), "fill must be 1x{}", xv.cols());
        let mut out = xv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(fv.data());
            }
        }
        let needs = self.needs(x) || self.needs(fill);
        self.push(Op::MaskRows { x, fill, mask: mask.to_vec() }, out, needs)
    }

    /// Elementwise multiply by a caller-drawn mask (`0` or `1/(1-p)` entries).
    pub fn dropout(&mut self, x: Var, scale: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(scale.len(), xv.len(), "dropout mask size mismatch");
        let mut out = xv.clone();
        for (o, s) in out.data_mut().iter_mut().zip(&scale) {
            *o *= s;
        }
        let needs = self.needs(x);
        self.push(Op::Dropout { x, scale }, out, needs)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).log_softmax_rows();
        let needs = self.needs(x);
        self.push(Op::LogSoftmax(x), out, needs)
    }

    /// A scalar computed outside the tape from `x`, together with its gradient wrt `x`.
    pub fn external_loss(&mut self, x: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape(), "external gradient shape mismatch");
        let needs = self.needs(x);
        self.push(Op::External { x, grad }, Matrix::scalar(value), needs)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Op::WeightedSum(terms.to_vec()), Matrix::scalar(total), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Op::SumAll(x), Matrix::scalar(total), needs)
    }

    /// Reverse pass from a scalar node. Only parameters that influence `loss` get an entry.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, delta: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, g.matmul_t(self.value(*b)));
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        send(*a, g.matmul(self.value(*b)));
                    }
                    if self.needs(*b) {
                        send(*b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::AddBias(a, bias) => {
                    if self.needs(*bias) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        send(*bias, db);
                    }
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        *dv *= gelu_grad(xv);
                    }
                    send(*a, d);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain).data();
                    let (rows, cols) = g.shape();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            let (gr, xr) = (g.row(r), xhat.row(r));
                            for c in 0..cols {
                                dg.data_mut()[c] += gr[c] * xr[c];
                                db.data_mut()[c] += gr[c];
                            }
                        }
                        send(*gain, dg);
                        send(*bias, db);
                    }
                    if self.needs(*x) {
                        let mut dx = Matrix::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let (gr, xr) = (g.row(r), xhat.row(r));
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                let d = gr[c] * gv[c];
                                mean_d += d;
                                mean_dx += d * xr[c];
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            let out = dx.row_mut(r);
                            for c in 0..cols {
                                let d = gr[c] * gv[c];
                                out[c] = inv_std[r] * (d - mean_d - xr[c] * mean_dx);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(qv.rows(), d);
                    let mut dk = Matrix::zeros(kv.rows(), d);
                    let mut dv = Matrix::zeros(vv.rows(), d);
                    for (h, p) in probs.iter().enumerate() {
                        let goh = column_block(&g, h * dh, dh);
                        let qh = column_block(qv, h * dh, dh);
                        let kh = column_block(kv, h * dh, dh);
                        let vh = column_block(vv, h * dh, dh);
                        set_column_block(&mut dv, &p.t_matmul(&goh), h * dh);
                        let dp = goh.matmul_t(&vh);
                        let mut ds = Matrix::zeros(p.rows(), p.cols());
                        for i in 0..p.rows() {
                            let (pr, dpr) = (p.row(i), dp.row(i));
                            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                            let out = ds.row_mut(i);
                            for j in 0..pr.len() {
                                out[j] = pr[j] * (dpr[j] - dot) * scale;
                            }
                        }
                        set_column_block(&mut dq, &ds.matmul(&kh), h * dh);
                        set_column_block(&mut dk, &ds.t_matmul(&qh), h * dh);
                    }
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::Im2Col { x, kernel, stride, pad } => {
                    let (t, c) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(t, c);
                    for o in 0..g.rows() {
                        let row = g.row(o);
                        for j in 0..*kernel {
                            let src = (o * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let dst = dx.row_mut(src as usize);
                                for (a, b) in dst.iter_mut().zip(&row[j * c..(j + 1) * c]) {
                                    *a += b;
                                }
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    send(*table, dt);
                }
                Op::ConcatRows(a, b) => {
                    let ar = self.value(*a).rows();
                    let cols = g.cols();
                    let ga = Matrix::from_vec(ar, cols, g.data()[..ar * cols].to_vec());
                    let gb = Matrix::from_vec(g.rows() - ar, cols, g.data()[ar * cols..].to_vec());
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::MaskRows { x, fill, mask } => {
                    let mut dfill = Matrix::zeros(1, g.cols());
                    let mut dx = g;
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (a, b) in dfill.data_mut().iter_mut().zip(dx.row(r)) {
                                *a += b;
                            }
                            dx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    send(*fill, dfill);
                    send(*x, dx);
                }
                Op::Dropout { x, scale } => {
                    let mut dx = g;
                    for (a, s) in dx.data_mut().iter_mut().zip(scale) {
                        *a *= s;
                    }
                    send(*x, dx);
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.as_ref().expect("log_softmax value");
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        let total: f64 = dx.row(r).iter().sum();
                        let yr = y.row(r);
                        for (a, &lp) in dx.row_mut(r).iter_mut().zip(yr) {
                            *a -= lp.exp() * total;
                        }
                    }
                    send(*x, dx);
                }
                Op::External { x, grad } => send(*x, grad.scale(g.item())),
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        send(v, Matrix::scalar(w * g.item()));
                    }
                }
                Op::SumAll(x) => {
                    let (r, c) = self.value(*x).shape();
                    send(*x, Matrix::filled(r, c, g.item()));
                }
            }
        }
        out
    }
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - kernel) / stride + 1
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn column_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn set_column_block(dst: &mut Matrix, src: &Matrix, start: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + src.cols()].copy_from_slice(src.row(r));
    }
}
