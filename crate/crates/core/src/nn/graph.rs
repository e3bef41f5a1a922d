//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in topological order, so `backward` walks the tape in reverse
//! and each node's gradient is complete by the time it is visited.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::param::{GradBuffer, ParamId, ParamStore};
use crate::real::{axpy, dot, gemm, Real};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Val<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<F>, rstd: Vec<F> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool, probs: Vec<F> },
    Im2Col { x: NodeId, kernel: usize, stride: usize, pad_left: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Pad { x: NodeId },
    Place { x: NodeId, positions: Vec<usize> },
    MeanRows(NodeId),
    Mix { a: NodeId, b: NodeId, gate: NodeId },
    Lin(Vec<(NodeId, F)>),
    Dot { x: NodeId, w: Vec<F> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<F> },
    Precomputed { x: NodeId, grad: Vec<F> },
    Mse { pred: NodeId, target: Tensor<F>, rows: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<F> },
}

struct Node<F> {
    val: Val<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<'s, F: Real = f32> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    train: bool,
    rng: Option<SeededRng>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct NodeGrads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> NodeGrads<F> {
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }
}

const LN_EPS: f64 = 1e-5;

impl<'s, F: Real> Graph<'s, F> {
    /// Evaluation-mode graph: dropout disabled.
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new(), train: false, rng: None, param_nodes: vec![None; store.len()] }
    }

    /// Training-mode graph: dropout masks drawn from `rng`.
    pub fn training(store: &'s ParamStore<F>, rng: SeededRng) -> Self {
        Self { store, nodes: Vec::new(), train: true, rng: Some(rng), param_nodes: vec![None; store.len()] }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        match &self.nodes[id.0].val {
            Val::Owned(t) => t,
            Val::Param(p) => self.store.value(*p),
        }
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.value(id).data()[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, t: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { val: Val::Owned(t), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Constant input; no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input that gradients are tracked for (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf referencing a stored parameter. Repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let rg = self.store.is_trainable(id);
        self.nodes.push(Node { val: Val::Param(id), op: Op::Leaf, requires_grad: rg });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.value(id).rows()
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.value(id).cols()
    }

    /// `a [m x k] * b [k x n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dim_err("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if self.value(b).numel() != n {
            return Err(dim_err("add_bias", format!("bias {} vs cols {n}", self.value(b).numel())));
        }
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(b).data();
        for i in 0..m {
            for (o, &bb) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).numel() != self.value(b).numel() || self.dims(a) != self.dims(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<F> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<F> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| gelu(v));
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(dim_err("layer_norm", format!("gain/bias vs cols {n}")));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| { let d = v.as_f64() - mean; d * d }).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[i] = F::of(r);
            for j in 0..n {
                let h = F::of((row[j].as_f64() - mean) * r);
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Scaled dot-product multi-head attention over `[T x D]` inputs.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        let (tv, dv) = self.dims(v);
        if d != dk || d != dv || tk != tv {
            return Err(dim_err("attention", format!("q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::HeadDivision { dim: d, heads });
        }
        if causal && tq != tk {
            return Err(dim_err("attention", format!("causal needs square, {tq} vs {tk}")));
        }
        let dh = d / heads;
        let scale = F::of(1.0 / libm::sqrt(dh as f64));
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let lim = if causal { i + 1 } else { tk };
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i) * tk + lim];
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut mx = F::neg_infinity();
                for (j, pj) in p.iter_mut().enumerate() {
                    let s = dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                    *pj = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut sum = 0.0f64;
                for pj in p.iter_mut() {
                    *pj = (*pj - mx).exp();
                    sum += pj.as_f64();
                }
                let inv = F::of(1.0 / sum);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj *= inv;
                    axpy(*pj, &vv[j * d + off..j * d + off + dh], orow);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::new(&[tq, d], out)?, Op::Attention { q, k, v, heads, causal, probs }, rg))
    }

    /// Unfold `x [T x C]` into overlapping windows `[T_out x kernel*C]`
    /// with `pad_left` zero rows before the input and zeros past the end.
    pub fn im2col(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        t_out: usize,
    ) -> Result<NodeId> {
        let (t, c) = self.dims(x);
        if kernel == 0 || stride == 0 {
            return Err(dim_err("im2col", format!("kernel {kernel} stride {stride}")));
        }
        let xv = self.value(x).data();
        let w = kernel * c;
        let mut out = vec![F::zero(); t_out * w];
        for o in 0..t_out {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    out[o * w + j * c..o * w + (j + 1) * c].copy_from_slice(&xv[s * c..(s + 1) * c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[t_out, w], out)?, Op::Im2Col { x, kernel, stride, pad_left }, rg))
    }

    /// Select rows of `table` by index (embedding lookup / row gather).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(table);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::Index { what: "gather table", index: i, size: r });
            }
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(&[ids.len(), c], out)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Stack inputs along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let c = parts.first().map_or(0, |&p| self.cols(p));
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != c {
                return Err(dim_err("concat_rows", format!("cols {} vs {c}", self.cols(p))));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[rows, c], out)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::Index { what: "slice_rows", index: start + len, size: r });
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[len, c], out)?, Op::Slice { x, start }, rg))
    }

    /// Append zero rows so the result has `total` rows.
    pub fn pad_rows(&mut self, x: NodeId, total: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if total < r {
            return Err(Error::Length { op: "pad_rows", got: total, need: r });
        }
        let mut out = self.value(x).data().to_vec();
        out.resize(total * c, F::zero());
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[total, c], out)?, Op::Pad { x }, rg))
    }

    /// Scatter row `i` of `x` to row `positions[i]` of a `total`-row zero
    /// tensor. Positions must be strictly increasing.
    pub fn place_rows(&mut self, x: NodeId, positions: &[usize], total: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if positions.len() != r {
            return Err(dim_err("place_rows", format!("{} positions for {r} rows", positions.len())));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition("place_rows positions must increase".into()));
        }
        if let Some(&last) = positions.last() {
            if last >= total {
                return Err(Error::Index { what: "place_rows", index: last, size: total });
            }
        }
        let mut out = vec![F::zero(); total * c];
        let xv = self.value(x).data();
        for (i, &p) in positions.iter().enumerate() {
            out[p * c..(p + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[total, c], out)?, Op::Place { x, positions: positions.to_vec() }, rg))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if r == 0 {
            return Err(Error::Length { op: "mean_rows", got: 0, need: 1 });
        }
        let out = self.value(x).mean_rows();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::MeanRows(x), rg))
    }

    /// `a * (1 - g) + b * g` with a single-element gate `g`.
    pub fn mix(&mut self, a: NodeId, b: NodeId, gate: NodeId) -> Result<NodeId> {
        self.same_shape("mix", a, b)?;
        if self.value(gate).numel() != 1 {
            return Err(dim_err("mix", format!("gate has {} values", self.value(gate).numel())));
        }
        let g = self.scalar(gate);
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * (F::one() - g) + y * g)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b, gate]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mix { a, b, gate }, rg))
    }

    /// Weighted sum of single-element nodes.
    pub fn lin(&mut self, terms: &[(NodeId, F)]) -> Result<NodeId> {
        let mut s = F::zero();
        for &(n, c) in terms {
            if self.value(n).numel() != 1 {
                return Err(dim_err("lin", format!("term has {} values", self.value(n).numel())));
            }
            s += c * self.scalar(n);
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::scalar(s), Op::Lin(terms.to_vec()), rg))
    }

    /// Scalar `sum(w * x)` over all elements.
    pub fn dot_const(&mut self, x: NodeId, w: Vec<F>) -> Result<NodeId> {
        if w.len() != self.value(x).numel() {
            return Err(dim_err("dot_const", format!("{} weights vs {}", w.len(), self.value(x).numel())));
        }
        let s = dot(self.value(x).data(), &w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        self.dot_const(x, vec![F::one(); n])
    }

    /// Mean softmax cross-entropy of each row against its target index.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, v) = self.dims(logits);
        if targets.len() != m {
            return Err(dim_err("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if m == 0 {
            return Err(Error::DegenerateLoss);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); m * v];
        let mut loss = 0.0f64;
        let mut row64 = vec![0.0f64; v];
        for i in 0..m {
            if targets[i] >= v {
                return Err(Error::Index { what: "cross_entropy target", index: targets[i], size: v });
            }
            for (r, &x) in row64.iter_mut().zip(&lv[i * v..(i + 1) * v]) {
                *r = x.as_f64();
            }
            let lse = crate::real::log_sum_exp(&row64);
            loss += lse - row64[targets[i]];
            for j in 0..v {
                probs[i * v + j] = F::of(libm::exp(row64[j] - lse));
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(F::of(loss / m as f64)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Scalar node whose value and gradient w.r.t. `x` were computed
    /// elsewhere (CTC).
    pub fn precomputed_loss(&mut self, x: NodeId, value: F, grad: Vec<F>) -> Result<NodeId> {
        if grad.len() != self.value(x).numel() {
            return Err(dim_err("precomputed_loss", format!("grad {} vs {}", grad.len(), self.value(x).numel())));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { x, grad }, rg))
    }

    /// Mean squared error over the selected rows.
    pub fn mse_rows(&mut self, pred: NodeId, target: Tensor<F>, rows: &[usize]) -> Result<NodeId> {
        let (m, c) = self.dims(pred);
        if target.rows() != m || target.cols() != c {
            return Err(dim_err("mse_rows", format!("pred {m}x{c} vs target {}x{}", target.rows(), target.cols())));
        }
        if rows.is_empty() {
            return Err(Error::DegenerateLoss);
        }
        let pv = self.value(pred);
        let mut s = 0.0f64;
        for &r in rows {
            if r >= m {
                return Err(Error::Index { what: "mse row", index: r, size: m });
            }
            for (a, b) in pv.row(r).iter().zip(target.row(r)) {
                let d = a.as_f64() - b.as_f64();
                s += d * d;
            }
        }
        let v = s / (rows.len() * c) as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(F::of(v)), Op::Mse { pred, target, rows: rows.to_vec() }, rg))
    }

    /// Inverted dropout; identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let keep = F::of(1.0 / (1.0 - rate));
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let mask: Vec<F> = (0..n).map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect();
        let t = Tensor::new(
            self.value(x).shape(),
            self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `buf`; per-node gradients are returned.
    pub fn backward(&self, loss: NodeId, buf: &mut GradBuffer<F>) -> Result<NodeGrads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err("backward", format!("loss has {} values", self.value(loss).numel())));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads)?;
            if let Val::Param(p) = node.val {
                buf.accumulate(p, &gy);
            }
            grads[idx] = Some(gy);
        }
        Ok(NodeGrads { grads })
    }

    fn backprop_node(&self, idx: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value(NodeId(idx));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.cols(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    gemm(m, n, k, gy, false, bv, true, self.grad_mut(grads, *a), true);
                }
                if self.requires_grad(*b) {
                    gemm(k, m, n, av, true, gy, false, self.grad_mut(grads, *b), true);
                }
            }
            Op::AddBias(x, b) => {
                let n = self.cols(*x);
                if self.requires_grad(*x) {
                    add_into(self.grad_mut(grads, *x), gy);
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_mut(grads, *b);
                    for row in gy.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.requires_grad(p) {
                        add_into(self.grad_mut(grads, p), gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga = self.grad_mut(grads, *a);
                    for ((g, &y), &o) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += y * o;
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_mut(grads, *b);
                    for ((g, &y), &o) in gb.iter_mut().zip(gy).zip(av) {
                        *g += y * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = self.grad_mut(grads, *x);
                for (g, &y) in gx.iter_mut().zip(gy) {
                    *g += y * *s;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = self.grad_mut(grads, *x);
                for ((g, &y), &xi) in gx.iter_mut().zip(gy).zip(xv) {
                    *g += y * gelu_grad(xi);
                }
            }
            Op::Sigmoid(x) => {
                let ov = out.data();
                let gx = self.grad_mut(grads, *x);
                for ((g, &y), &s) in gx.iter_mut().zip(gy).zip(ov) {
                    *g += y * s * (F::one() - s);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = self.grad_mut(grads, *gain);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gy[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = self.grad_mut(grads, *bias);
                    for row in gy.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if self.requires_grad(*x) {
                    let gx = self.grad_mut(grads, *x);
                    let inv_n = 1.0 / n as f64;
                    for i in 0..m {
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..n {
                            let dxh = (gy[i * n + j] * gv[j]).as_f64();
                            s1 += dxh;
                            s2 += dxh * xhat[i * n + j].as_f64();
                        }
                        let (m1, m2) = (s1 * inv_n, s2 * inv_n);
                        let r = rstd[i].as_f64();
                        for j in 0..n {
                            let dxh = (gy[i * n + j] * gv[j]).as_f64();
                            gx[i * n + j] += F::of(r * (dxh - m1 - xhat[i * n + j].as_f64() * m2));
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, causal, probs } => {
                self.attention_backward(*q, *k, *v, *heads, *causal, probs, gy, grads);
            }
            Op::Im2Col { x, kernel, stride, pad_left } => {
                let (t, c) = self.dims(*x);
                let w = kernel * c;
                let t_out = out.rows();
                let gx = self.grad_mut(grads, *x);
                for o in 0..t_out {
                    for j in 0..*kernel {
                        let src = (o * stride + j) as isize - *pad_left as isize;
                        if src >= 0 && (src as usize) < t {
                            let s = src as usize;
                            add_into(&mut gx[s * c..(s + 1) * c], &gy[o * w + j * c..o * w + (j + 1) * c]);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = self.cols(*table);
                let gt = self.grad_mut(grads, *table);
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * c..(i + 1) * c], &gy[r * c..(r + 1) * c]);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        add_into(self.grad_mut(grads, p), &gy[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let c = self.cols(*x);
                let gx = self.grad_mut(grads, *x);
                add_into(&mut gx[start * c..start * c + gy.len()], gy);
            }
            Op::Pad { x } => {
                let n = self.value(*x).numel();
                add_into(self.grad_mut(grads, *x), &gy[..n]);
            }
            Op::Place { x, positions } => {
                let c = self.cols(*x);
                let gx = self.grad_mut(grads, *x);
                for (i, &p) in positions.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &gy[p * c..(p + 1) * c]);
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                let inv = F::one() / F::of(r as f64);
                let gx = self.grad_mut(grads, *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += gy[j] * inv;
                    }
                }
            }
            Op::Mix { a, b, gate } => {
                let g = self.scalar(*gate);
                if self.requires_grad(*a) {
                    let ga = self.grad_mut(grads, *a);
                    for (d, &y) in ga.iter_mut().zip(gy) {
                        *d += y * (F::one() - g);
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_mut(grads, *b);
                    for (d, &y) in gb.iter_mut().zip(gy) {
                        *d += y * g;
                    }
                }
                if self.requires_grad(*gate) {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut s = 0.0f64;
                    for ((&y, &x), &z) in gy.iter().zip(av).zip(bv) {
                        s += (y * (z - x)).as_f64();
                    }
                    self.grad_mut(grads, *gate)[0] += F::of(s);
                }
            }
            Op::Lin(terms) => {
                for &(n, c) in terms {
                    if self.requires_grad(n) {
                        self.grad_mut(grads, n)[0] += gy[0] * c;
                    }
                }
            }
            Op::Dot { x, w } => {
                let gx = self.grad_mut(grads, *x);
                axpy(gy[0], w, gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.cols(*logits);
                let m = targets.len();
                let s = gy[0] / F::of(m as f64);
                let gl = self.grad_mut(grads, *logits);
                for i in 0..m {
                    for j in 0..v {
                        gl[i * v + j] += s * probs[i * v + j];
                    }
                    gl[i * v + targets[i]] -= s;
                }
            }
            Op::Precomputed { x, grad } => {
                let gx = self.grad_mut(grads, *x);
                axpy(gy[0], grad, gx);
            }
            Op::Mse { pred, target, rows } => {
                let c = self.cols(*pred);
                let pv = self.value(*pred);
                let s = gy[0] * F::of(2.0 / (rows.len() * c) as f64);
                let mut upd = vec![F::zero(); pv.numel()];
                for &r in rows {
                    for j in 0..c {
                        upd[r * c + j] += s * (pv.get(r, j) - target.get(r, j));
                    }
                }
                add_into(self.grad_mut(grads, *pred), &upd);
            }
            Op::Dropout { x, mask } => {
                let gx = self.grad_mut(grads, *x);
                for ((g, &y), &m) in gx.iter_mut().zip(gy).zip(mask) {
                    *g += y * m;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        probs: &[F],
        gy: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (tq, d) = self.dims(q);
        let tk = self.rows(k);
        let dh = d / heads;
        let scale = F::of(1.0 / libm::sqrt(dh as f64));
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut gq = vec![F::zero(); tq * d];
        let mut gk = vec![F::zero(); tk * d];
        let mut gv = vec![F::zero(); tk * d];
        let mut dp = vec![F::zero(); tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let lim = if causal { i + 1 } else { tk };
                let p = &probs[(h * tq + i) * tk..(h * tq + i) * tk + lim];
                let go = &gy[i * d + off..i * d + off + dh];
                let mut s = 0.0f64;
                for j in 0..lim {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = dot(go, vj);
                    s += (dp[j] * p[j]).as_f64();
                    axpy(p[j], go, &mut gv[j * d + off..j * d + off + dh]);
                }
                let s = F::of(s);
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..lim {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    axpy(ds, &kv[j * d + off..j * d + off + dh], &mut gq[i * d + off..i * d + off + dh]);
                    axpy(ds, qi, &mut gk[j * d + off..j * d + off + dh]);
                }
            }
        }
        for (node, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.requires_grad(node) {
                add_into(self.grad_mut(grads, node), &g);
            }
        }
    }

    fn grad_mut<'g>(&self, grads: &'g mut [Option<Vec<F>>], id: NodeId) -> &'g mut Vec<F> {
        let n = self.value(id).numel();
        grads[id.0].get_or_insert_with(|| vec![F::zero(); n])
    }
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    let t = libm::tanh(GELU_C * (xf + GELU_A * xf * xf * xf));
    F::of(0.5 * xf * (1.0 + t))
}

fn gelu_grad<F: Real>(x: F) -> F {
    let xf = x.as_f64();
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    F::of(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
}
