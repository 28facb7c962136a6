//! Reverse-mode differentiation over a flat tape of tensor operations.
//!
//! Every forward op appends a node recording its inputs and enough saved
//! state to run the backward rule. `backward` seeds a scalar root with 1 and
//! walks the tape in reverse, accumulating gradients per node.

use super::tensor::Tensor;

pub type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddScalar(Id),
    MulScalar(Id, f64),
    MatMul(Id, Id),
    /// a [N,A] times b [B,A] transposed -> [N,B]
    MatMulT(Id, Id),
    /// x [N,B] plus row vector [B], broadcast over rows
    AddRow(Id, Id),
    Sigmoid(Id),
    Tanh(Id),
    Relu(Id),
    Exp(Id),
    Log(Id),
    Clamp(Id, f64, f64),
    MinElem(Id, Id),
    /// Row-wise softmax; masked-out entries get probability exactly 0.
    /// Masked outputs are 0, so the standard softmax Jacobian already routes
    /// zero gradient through them and the mask need not be saved.
    Softmax(Id),
    /// Row-wise layer normalization with per-column gain and bias.
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
    },
    /// Same-padding stride-1 convolution: x [N,C,H,W], w [O,C,K,K], b [O].
    Conv2d {
        x: Id,
        w: Id,
        b: Id,
    },
    /// 2x2 stride-2 max pooling; argmax stores the flat input index chosen
    /// for each output element.
    MaxPool2d {
        x: Id,
        argmax: Vec<usize>,
    },
    /// Shape reinterpretation of the same flat buffer.
    Reshape(Id),
    ConcatCols(Vec<Id>),
    SliceCols {
        x: Id,
        start: usize,
        len: usize,
    },
    /// out[i, 0] = x[i, idx[i]]
    GatherCols {
        x: Id,
        idx: Vec<usize>,
    },
    SumAll(Id),
    Mean(Id),
}

struct Node {
    op: Op,
    value: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Id {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> Id {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id].value
    }

    fn zip_elementwise(&self, a: Id, b: Id, op: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "shape mismatch in {op}");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = self.zip_elementwise(a, b, "add", |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = self.zip_elementwise(a, b, "sub", |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = self.zip_elementwise(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn add_scalar(&mut self, a: Id, s: f64) -> Id {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x + s).collect());
        self.push(Op::AddScalar(a), v)
    }

    pub fn mul_scalar(&mut self, a: Id, s: f64) -> Id {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * s).collect());
        self.push(Op::MulScalar(a, s), v)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul inner dims");
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let x = ta.data()[i * k + l];
                if x == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out[i * m + j] += x * tb.data()[l * m + j];
                }
            }
        }
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out))
    }

    /// Like [`Tape::matmul`], but each output element sums its products in
    /// ascending value order, making the result invariant to permutations of
    /// the contraction axis. Used where bit-exact permutation equivariance
    /// across agents is required (attention weighted sums).
    pub fn matmul_sorted(&mut self, a: Id, b: Id) -> Id {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul inner dims");
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        let mut terms = Vec::with_capacity(k);
        for i in 0..n {
            for j in 0..m {
                terms.clear();
                for l in 0..k {
                    terms.push(ta.data()[i * k + l] * tb.data()[l * m + j]);
                }
                out[i * m + j] = sorted_sum(&mut terms);
            }
        }
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out))
    }

    /// a [N,A] x b [B,A]^T -> [N,B]
    pub fn matmul_t(&mut self, a: Id, b: Id) -> Id {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "matmul_t inner dims");
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += ta.data()[i * k + l] * tb.data()[j * k + l];
                }
                out[i * m + j] = acc;
            }
        }
        self.push(Op::MatMulT(a, b), Tensor::new(vec![n, m], out))
    }

    pub fn add_row(&mut self, x: Id, row: Id) -> Id {
        let (tx, tr) = (self.value(x), self.value(row));
        let cols = tx.cols();
        assert_eq!(tr.len(), cols, "add_row width");
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tr.data()[i % cols])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data);
        self.push(Op::AddRow(x, row), v)
    }

    fn map_unary(&mut self, a: Id, op: Op, f: impl Fn(f64) -> f64) -> Id {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(op, v)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        self.map_unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        self.map_unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Id) -> Id {
        self.map_unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Id) -> Id {
        self.map_unary(a, Op::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: Id, lo: f64, hi: f64) -> Id {
        self.map_unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn min_elem(&mut self, a: Id, b: Id) -> Id {
        let v = self.zip_elementwise(a, b, "min_elem", f64::min);
        self.push(Op::MinElem(a, b), v)
    }

    /// Row-wise softmax, numerically stabilized by max subtraction. If a mask
    /// is given (true = keep), masked logits are treated as -inf and their
    /// probability is exactly 0. Rows must keep at least one unmasked entry.
    pub fn softmax(&mut self, x: Id, mask: Option<&[bool]>) -> Id {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if let Some(mk) = mask {
            assert_eq!(mk.len(), n * m, "softmax mask length");
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let keep = |j: usize| mask.map_or(true, |mk| mk[i * m + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if keep(j) {
                    max = max.max(t.data()[i * m + j]);
                }
            }
            assert!(max.is_finite(), "softmax row {i} fully masked");
            // Sorted summation keeps the normalizer invariant to column
            // permutations, which attention equivariance relies on.
            let mut terms = Vec::with_capacity(m);
            for j in 0..m {
                if keep(j) {
                    let e = (t.data()[i * m + j] - max).exp();
                    out[i * m + j] = e;
                    terms.push(e);
                }
            }
            let sum = sorted_sum(&mut terms);
            for j in 0..m {
                out[i * m + j] /= sum;
            }
        }
        self.push(Op::Softmax(x), Tensor::new(vec![n, m], out))
    }

    pub fn layer_norm(&mut self, x: Id, gain: Id, bias: Id) -> Id {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (n, m) = (tx.rows(), tx.cols());
        assert_eq!(tg.len(), m, "layer_norm gain width");
        assert_eq!(tb.len(), m, "layer_norm bias width");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &tx.data()[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let s = (var + LAYER_NORM_EPS).sqrt();
            for j in 0..m {
                out[i * m + j] = tg.data()[j] * (row[j] - mean) / s + tb.data()[j];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias }, Tensor::new(vec![n, m], out))
    }

    pub fn conv2d_same(&mut self, x: Id, w: Id, b: Id) -> Id {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [n, c, h, wd] = tx.shape() else {
            panic!("conv2d input must be 4D, got {:?}", tx.shape())
        };
        let [o, ci, kh, kw] = tw.shape() else {
            panic!("conv2d weight must be 4D, got {:?}", tw.shape())
        };
        let (n, c, h, wd, o, ci, kh, kw) = (*n, *c, *h, *wd, *o, *ci, *kh, *kw);
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert_eq!(tb.len(), o, "conv2d bias length");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel must be odd");
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = vec![0.0; n * o * h * wd];
        for bi in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for x2 in 0..wd {
                        let mut acc = tb.data()[oc];
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let r = y as isize + i as isize - ph as isize;
                                    let cc = x2 as isize + j as isize - pw as isize;
                                    if r < 0 || cc < 0 || r >= h as isize || cc >= wd as isize {
                                        continue;
                                    }
                                    acc += tx.data()
                                        [((bi * c + ic) * h + r as usize) * wd + cc as usize]
                                        * tw.data()[((oc * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((bi * o + oc) * h + y) * wd + x2] = acc;
                    }
                }
            }
        }
        self.push(Op::Conv2d { x, w, b }, Tensor::new(vec![n, o, h, wd], out))
    }

    /// 2x2 stride-2 max pooling over [N,C,H,W]. Spatial dims must be >= 2;
    /// callers skip the pool entirely when the extent is too small.
    pub fn maxpool2d(&mut self, x: Id) -> Id {
        let tx = self.value(x);
        let [n, c, h, w] = tx.shape() else {
            panic!("maxpool2d input must be 4D, got {:?}", tx.shape())
        };
        let (n, c, h, w) = (*n, *c, *h, *w);
        assert!(h >= 2 && w >= 2, "maxpool2d needs spatial extent >= 2");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for bi in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x2 in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((bi * c + ch) * h + 2 * y + dy) * w + 2 * x2 + dx;
                                if tx.data()[idx] > best {
                                    best = tx.data()[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oidx = ((bi * c + ch) * oh + y) * ow + x2;
                        out[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                }
            }
        }
        self.push(Op::MaxPool2d { x, argmax }, Tensor::new(vec![n, c, oh, ow], out))
    }

    pub fn reshape(&mut self, x: Id, shape: Vec<usize>) -> Id {
        let t = self.value(x);
        assert_eq!(
            t.len(),
            shape.iter().product::<usize>(),
            "reshape must preserve element count"
        );
        let v = Tensor::new(shape, t.data().to_vec());
        self.push(Op::Reshape(x), v)
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            let c = t.cols();
            for i in 0..n {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![n, total], out))
    }

    pub fn slice_cols(&mut self, x: Id, start: usize, len: usize) -> Id {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        assert!(start + len <= m, "slice_cols out of range");
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&t.data()[i * m + start..i * m + start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, Tensor::new(vec![n, len], out))
    }

    pub fn gather_cols(&mut self, x: Id, idx: &[usize]) -> Id {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        assert_eq!(idx.len(), n, "gather_cols index length");
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| {
            assert!(j < m, "gather_cols index out of range");
            t.data()[i * m + j]
        }).collect();
        self.push(
            Op::GatherCols { x, idx: idx.to_vec() },
            Tensor::new(vec![n, 1], out),
        )
    }

    pub fn sum_all(&mut self, x: Id) -> Id {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Id) -> Id {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Runs reverse-mode accumulation from a scalar root. Returns one
    /// gradient tensor per tape node (zero where the node does not influence
    /// the root).
    pub fn backward(&self, root: Id) -> Vec<Tensor> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[root].data_mut()[0] = 1.0;

        for id in (0..=root).rev() {
            let g = grads[id].clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut grads[*a], 1.0, g.data());
                    axpy(&mut grads[*b], 1.0, g.data());
                }
                Op::Sub(a, b) => {
                    axpy(&mut grads[*a], 1.0, g.data());
                    axpy(&mut grads[*b], -1.0, g.data());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[*a].data_mut()[i] += gi * vb[i];
                    }
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[*b].data_mut()[i] += gi * va[i];
                    }
                }
                Op::AddScalar(a) => axpy(&mut grads[*a], 1.0, g.data()),
                Op::MulScalar(a, s) => axpy(&mut grads[*a], *s, g.data()),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    // ga = g . b^T
                    for i in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g.data()[i * m + j] * tb.data()[l * m + j];
                            }
                            grads[*a].data_mut()[i * k + l] += acc;
                        }
                    }
                    // gb = a^T . g
                    let ta_data = ta.data().to_vec();
                    for l in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += ta_data[i * k + l] * g.data()[i * m + j];
                            }
                            grads[*b].data_mut()[l * m + j] += acc;
                        }
                    }
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                    // out = a . b^T, so ga = g . b ; gb = g^T . a
                    let tb_data = tb.data().to_vec();
                    for i in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g.data()[i * m + j] * tb_data[j * k + l];
                            }
                            grads[*a].data_mut()[i * k + l] += acc;
                        }
                    }
                    let ta_data = ta.data().to_vec();
                    for j in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += g.data()[i * m + j] * ta_data[i * k + l];
                            }
                            grads[*b].data_mut()[j * k + l] += acc;
                        }
                    }
                }
                Op::AddRow(x, row) => {
                    let cols = self.value(*row).len();
                    axpy(&mut grads[*x], 1.0, g.data());
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[*row].data_mut()[i % cols] += gi;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[id].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[*a].data_mut()[i] += gi * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[id].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[*a].data_mut()[i] += gi * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        if x[i] > 0.0 {
                            grads[*a].data_mut()[i] += gi;
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = self.nodes[id].value.data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[*a].data_mut()[i] += gi * y[i];
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        grads[*a].data_mut()[i] += gi / x[i];
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a).data().to_vec();
                    for (i, gi) in g.data().iter().enumerate() {
                        if x[i] >= *lo && x[i] <= *hi {
                            grads[*a].data_mut()[i] += gi;
                        }
                    }
                }
                Op::MinElem(a, b) => {
                    let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                    for (i, gi) in g.data().iter().enumerate() {
                        if va[i] <= vb[i] {
                            grads[*a].data_mut()[i] += gi;
                        } else {
                            grads[*b].data_mut()[i] += gi;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = self.nodes[id].value.clone();
                    let (n, m) = (y.rows(), y.cols());
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += g.data()[i * m + j] * y.data()[i * m + j];
                        }
                        for j in 0..m {
                            grads[*x].data_mut()[i * m + j] +=
                                y.data()[i * m + j] * (g.data()[i * m + j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gain).data().to_vec();
                    let (n, m) = (tx.rows(), tx.cols());
                    for i in 0..n {
                        let row = &tx.data()[i * m..(i + 1) * m];
                        let mean = row.iter().sum::<f64>() / m as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                        let s = (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / s).collect();
                        let gy: Vec<f64> =
                            (0..m).map(|j| g.data()[i * m + j] * tg[j]).collect();
                        let mean_gy = gy.iter().sum::<f64>() / m as f64;
                        let mean_gy_xhat =
                            gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            grads[*x].data_mut()[i * m + j] +=
                                (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) / s;
                            grads[*gain].data_mut()[j] += g.data()[i * m + j] * xhat[j];
                            grads[*bias].data_mut()[j] += g.data()[i * m + j];
                        }
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let tx = self.value(*x).clone();
                    let tw = self.value(*w).clone();
                    let [n, c, h, wd] = tx.shape() else { unreachable!() };
                    let [o, _, kh, kw] = tw.shape() else { unreachable!() };
                    let (n, c, h, wd, o, kh, kw) = (*n, *c, *h, *wd, *o, *kh, *kw);
                    let (ph, pw) = (kh / 2, kw / 2);
                    for bi in 0..n {
                        for oc in 0..o {
                            for y in 0..h {
                                for x2 in 0..wd {
                                    let gi = g.data()[((bi * o + oc) * h + y) * wd + x2];
                                    if gi == 0.0 {
                                        continue;
                                    }
                                    grads[*b].data_mut()[oc] += gi;
                                    for ic in 0..c {
                                        for i in 0..kh {
                                            for j in 0..kw {
                                                let r = y as isize + i as isize - ph as isize;
                                                let cc = x2 as isize + j as isize - pw as isize;
                                                if r < 0
                                                    || cc < 0
                                                    || r >= h as isize
                                                    || cc >= wd as isize
                                                {
                                                    continue;
                                                }
                                                let xi = ((bi * c + ic) * h + r as usize) * wd
                                                    + cc as usize;
                                                let wi = ((oc * c + ic) * kh + i) * kw + j;
                                                grads[*x].data_mut()[xi] += gi * tw.data()[wi];
                                                grads[*w].data_mut()[wi] += gi * tx.data()[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    for (oidx, &iidx) in argmax.iter().enumerate() {
                        grads[*x].data_mut()[iidx] += g.data()[oidx];
                    }
                }
                Op::Reshape(x) => {
                    axpy(&mut grads[*x], 1.0, g.data());
                }
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        for i in 0..n {
                            for j in 0..c {
                                grads[p].data_mut()[i * c + j] +=
                                    g.data()[i * total + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let m = self.value(*x).cols();
                    let n = g.rows();
                    for i in 0..n {
                        for j in 0..*len {
                            grads[*x].data_mut()[i * m + start + j] += g.data()[i * len + j];
                        }
                    }
                }
                Op::GatherCols { x, idx } => {
                    let m = self.value(*x).cols();
                    for (i, &j) in idx.iter().enumerate() {
                        grads[*x].data_mut()[i * m + j] += g.data()[i];
                    }
                }
                Op::SumAll(x) => {
                    axpy_scalar(&mut grads[*x], g.data()[0]);
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len() as f64;
                    axpy_scalar(&mut grads[*x], g.data()[0] / len);
                }
            }
        }
        grads
    }
}

/// Sums values in ascending order, so the result does not depend on the
/// original ordering of the addends.
fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    terms.iter().sum()
}

fn axpy(acc: &mut Tensor, scale: f64, g: &[f64]) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g) {
        *a += scale * b;
    }
}

fn axpy_scalar(acc: &mut Tensor, v: f64) {
    for a in acc.data_mut() {
        *a += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_logits_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 4], vec![0.7; 8]));
        let y = tape.softmax(x, None);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let mask = vec![true, false, true, true, true, false];
        let y = tape.softmax(x, Some(&mask));
        let t = tape.value(y);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|j| t.at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(t.at2(0, 1), 0.0);
        assert_eq!(t.at2(1, 2), 0.0);
    }

    #[test]
    fn maxpool_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 2, 4, 4], 3.5));
        let y = tape.maxpool2d(x);
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn matmul_backward_simple() {
        // f = sum(a.b), a=[1,2;3,4], b=[1;1] -> grads are analytic.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]));
        let y = tape.matmul(a, b);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert_eq!(grads[a].data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads[b].data(), &[4.0, 6.0]);
    }
}
