//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built per forward pass. Parameters enter as leaves bound to
//! a [`ParamStore`]; frozen parameters enter without gradient tracking, so no
//! gradient is ever computed for them. After [`Graph::backward`] the gradient
//! of every trainable parameter touched by the pass is available through
//! [`Graph::param_grads`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    var_params: HashMap<Var, ParamId>,
    grads: Vec<Option<Tensor>>,
    training: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'s> Graph<'s> {
    /// Inference graph: running statistics are read, never updated.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            var_params: HashMap::new(),
            grads: Vec::new(),
            training: false,
            buffer_updates: Vec::new(),
            dropout: None,
        }
    }

    /// Enables [`Graph::dropout`] with drop probability `p`; masks are drawn
    /// from a stream seeded by `seed`.
    pub fn set_dropout(&mut self, p: f64, seed: u64) {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        self.dropout = (p > 0.0).then(|| (p, ChaCha8Rng::seed_from_u64(seed)));
    }

    /// Training graph: normalization layers queue running-statistic updates.
    pub fn training(store: &'s ParamStore) -> Self {
        let mut g = Self::new(store);
        g.training = true;
        g
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First non-finite value in any node, as `(node index, value)`.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.nodes
            .iter()
            .enumerate()
            .find_map(|(i, n)| n.value.data().iter().find(|v| !v.is_finite()).map(|&v| (i, v)))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by the gradient checker).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_vars.insert(id, v);
        self.var_params.insert(v, id);
        v
    }

    /// Queues a buffer overwrite, applied by [`Graph::take_buffer_updates`].
    pub fn queue_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// `[m, n] + [1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        let n = x.cols();
        assert_eq!(r.len(), n, "add_row width mismatch");
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, row]);
        self.push(t, Op::AddRow(a, row), rg)
    }

    /// `[m, n] * [1, n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        let n = x.cols();
        assert_eq!(r.len(), n, "mul_row width mismatch");
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v *= b;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, row]);
        self.push(t, Op::MulRow(a, row), rg)
    }

    /// Inverted dropout; the identity unless [`Graph::set_dropout`] was called.
    pub fn dropout(&mut self, a: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return a;
        };
        let keep = 1.0 / (1.0 - *p);
        let x = &self.nodes[a.0].value;
        let p = *p;
        let data = (0..x.len()).map(|_| if rng.gen_bool(p) { 0.0 } else { keep }).collect();
        let mask = Tensor::new(x.shape().to_vec(), data).unwrap();
        let m = self.constant(mask);
        self.mul(a, m)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v * k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v + k);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = (x.rows(), x.cols());
        let (k2, n) = (y.rows(), y.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul_raw(x.data(), y.data(), m, k, n);
        let t = Tensor::matrix(m, n, out).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = (x.rows(), x.cols());
        let (n, k2) = (y.rows(), y.cols());
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let (xd, yd) = (x.data(), y.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..n {
                let yr = &yd[j * k..(j + 1) * k];
                out[i * n + j] = xr.iter().zip(yr).map(|(p, q)| p * q).sum();
            }
        }
        let t = Tensor::matrix(m, n, out).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = transpose_raw(x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    // ---- reductions / normalizers ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p);
            assert_eq!(x.rows(), m, "concat_cols row mismatch");
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(x.row_slice(r));
            }
            off += w;
        }
        let t = Tensor::matrix(m, total, data).unwrap();
        let rg = self.rg(parts);
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&refs).expect("concat_rows column mismatch");
        let rg = self.rg(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.rows(), "slice_rows out of range");
        let t = x.slice_rows(start, end);
        let rg = self.rg(&[a]);
        self.push(t, Op::SliceRows(a, start), rg)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, r + 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        assert!(start <= end && end <= n, "slice_cols out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let t = Tensor::matrix(m, w, data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::SliceCols(a, start), rg)
    }

    /// Row lookup; indices may repeat or be empty.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            assert!(i < x.rows(), "gather index {i} out of {}", x.rows());
            data.extend_from_slice(x.row_slice(i));
        }
        let t = Tensor::matrix(indices.len(), n, data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::GatherRows(a, indices.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape.to_vec()).expect("reshape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// 2-D convolution of `[c_in, h, w]` by `[c_out, c_in, kh, kw]` with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let (ci, h, w) = dims3(x);
        let ws = wt.shape();
        assert_eq!(ws.len(), 4, "conv weight must be 4-D");
        let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ci2, "conv input channels");
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
        let (xd, wd, bd) = (x.data(), wt.data(), b.data());
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let base = o * ho * wo;
            for v in &mut out[base..base + ho * wo] {
                *v = bd[o];
            }
            for c in 0..ci {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wd[((o * ci + c) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for oi in 0..ho {
                            let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let xrow = (c * h + ii as usize) * w;
                            let orow = base + oi * wo;
                            for oj in 0..wo {
                                let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                out[orow + oj] += wv * xd[xrow + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![co, ho, wo], out).unwrap();
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Per-channel `(x - mean) * inv_std * gamma + beta` on `[c, h, w]`,
    /// with `mean`/`inv_std` treated as constants.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>) -> Var {
        let x = self.value(input);
        let (c, h, w) = dims3(x);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let plane = h * w;
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let k = inv_std[ch] * gd[ch];
            for v in &mut out[ch * plane..(ch + 1) * plane] {
                *v = (*v - mean[ch]) * k + bd[ch];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[input, gamma, beta]);
        self.push(
            t,
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise layer normalization of `[m, n]`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(input);
        let (m, n) = (x.rows(), x.cols());
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = x.row_slice(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[input, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    // ---- backward ----

    /// Back-propagates from a scalar output.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar");
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return;
        }
        self.grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter that was reached.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(b), |p, q| p * q);
                let gb = zip_map(g, self.value(a), |p, q| p * q);
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut gr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (o, v) in gr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                let rs = self.value(row).shape().to_vec();
                self.acc(a, g.clone());
                self.acc(row, Tensor::new(rs, gr).unwrap());
            }
            Op::MulRow(a, row) => {
                let n = g.cols();
                let x = self.value(a);
                let r = self.value(row);
                let mut ga = g.data().to_vec();
                let mut gr = vec![0.0; n];
                for (gv, xv) in ga.chunks_mut(n).zip(x.data().chunks(n)) {
                    for j in 0..n {
                        gr[j] += gv[j] * xv[j];
                        gv[j] *= r.data()[j];
                    }
                }
                let (xs, rs) = (x.shape().to_vec(), r.shape().to_vec());
                self.acc(a, Tensor::new(xs, ga).unwrap());
                self.acc(row, Tensor::new(rs, gr).unwrap());
            }
            Op::Scale(a, k) => self.acc(a, g.map(|v| v * k)),
            Op::AddScalar(a) => self.acc(a, g.clone()),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                // dA = G Bᵀ, dB = Aᵀ G
                let ga = if self.nodes[a.0].requires_grad {
                    Some(matmul_bt(g.data(), y.data(), m, n, k))
                } else {
                    None
                };
                let gb = if self.nodes[b.0].requires_grad {
                    Some(matmul_at(x.data(), g.data(), m, k, n))
                } else {
                    None
                };
                let (xs, ys) = (x.shape().to_vec(), y.shape().to_vec());
                if let Some(ga) = ga {
                    self.acc(a, Tensor::new(xs, ga).unwrap());
                }
                if let Some(gb) = gb {
                    self.acc(b, Tensor::new(ys, gb).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ; dA = G B, dB = Gᵀ A
                let (x, y) = (self.value(a), self.value(b));
                let (m, k, n) = (x.rows(), x.cols(), y.rows());
                let ga = if self.nodes[a.0].requires_grad {
                    Some(matmul_raw(g.data(), y.data(), m, n, k))
                } else {
                    None
                };
                let gb = if self.nodes[b.0].requires_grad {
                    Some(matmul_at(g.data(), x.data(), m, n, k))
                } else {
                    None
                };
                let (xs, ys) = (x.shape().to_vec(), y.shape().to_vec());
                if let Some(ga) = ga {
                    self.acc(a, Tensor::new(xs, ga).unwrap());
                }
                if let Some(gb) = gb {
                    self.acc(b, Tensor::new(ys, gb).unwrap());
                }
            }
            Op::Transpose(a) => {
                let t = transpose_raw(g);
                let s = self.value(a).shape().to_vec();
                self.acc(a, t.reshape(s).unwrap());
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let ga = zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv));
                self.acc(a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let ga = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.acc(a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.acc(a, ga);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let ga = zip_map(g, y, |gv, yv| gv * yv);
                self.acc(a, ga);
            }
            Op::Abs(a) => {
                let ga = zip_map(g, self.value(a), |gv, xv| gv * sign(xv));
                self.acc(a, ga);
            }
            Op::Square(a) => {
                let ga = zip_map(g, self.value(a), |gv, xv| 2.0 * gv * xv);
                self.acc(a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let n = y.cols();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                let s = y.shape().to_vec();
                self.acc(a, Tensor::new(s, ga).unwrap());
            }
            Op::SumAll(a) => {
                let s = self.value(a).shape().to_vec();
                self.acc(a, Tensor::full(&s, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let x = self.value(a);
                let s = x.shape().to_vec();
                let k = g.data()[0] / x.len().max(1) as f64;
                self.acc(a, Tensor::full(&s, k));
            }
            Op::MeanRows(a) => {
                let x = self.value(a);
                let (m, n) = (x.rows(), x.cols());
                let s = x.shape().to_vec();
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend(g.data().iter().map(|v| v / m as f64));
                }
                self.acc(a, Tensor::new(s, ga).unwrap());
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let m = g.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        let s = self.value(p).shape().to_vec();
                        self.acc(p, Tensor::new(s, d).unwrap());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        let s = self.value(p).shape().to_vec();
                        let d = g.slice_rows(start, start + rows).into_data();
                        self.acc(p, Tensor::new(s, d).unwrap());
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(a);
                let s = x.shape().to_vec();
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.acc(a, Tensor::new(s, d).unwrap());
            }
            Op::SliceCols(a, start) => {
                let x = self.value(a);
                let s = x.shape().to_vec();
                let (m, n) = (x.rows(), x.cols());
                let w = g.cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                }
                self.acc(a, Tensor::new(s, d).unwrap());
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(a);
                let s = x.shape().to_vec();
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[r * n + j] += g.data()[k * n + j];
                    }
                }
                self.acc(a, Tensor::new(s, d).unwrap());
            }
            Op::Reshape(a) => {
                let s = self.value(a).shape().to_vec();
                self.acc(a, g.clone().reshape(s).unwrap());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(g, input, weight, bias, stride, pad),
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let x = self.value(input);
                let (c, h, w) = dims3(x);
                let plane = h * w;
                let gd = self.value(gamma).data();
                let mut gx = vec![0.0; x.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let k = inv_std[ch] * gd[ch];
                    for p in ch * plane..(ch + 1) * plane {
                        let gv = g.data()[p];
                        gx[p] = gv * k;
                        gg[ch] += gv * (x.data()[p] - mean[ch]) * inv_std[ch];
                        gb[ch] += gv;
                    }
                }
                let (xs, gs, bs) = (
                    x.shape().to_vec(),
                    self.value(gamma).shape().to_vec(),
                    self.value(beta).shape().to_vec(),
                );
                self.acc(input, Tensor::new(xs, gx).unwrap());
                self.acc(gamma, Tensor::new(gs, gg).unwrap());
                self.acc(beta, Tensor::new(bs, gb).unwrap());
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let x = self.value(input);
                let (m, n) = (x.rows(), x.cols());
                let gd = self.value(gamma).data();
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let gv = g.data()[r * n + j];
                        let xh = xhat[r * n + j];
                        gg[j] += gv * xh;
                        gb[j] += gv;
                        let d = gv * gd[j];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    for j in 0..n {
                        let d = g.data()[r * n + j] * gd[j];
                        let xh = xhat[r * n + j];
                        gx[r * n + j] = inv_std[r] / n as f64 * (n as f64 * d - sum_d - xh * sum_dx);
                    }
                }
                let (xs, gs, bs) = (
                    x.shape().to_vec(),
                    self.value(gamma).shape().to_vec(),
                    self.value(beta).shape().to_vec(),
                );
                self.acc(input, Tensor::new(xs, gx).unwrap());
                self.acc(gamma, Tensor::new(gs, gg).unwrap());
                self.acc(beta, Tensor::new(bs, gb).unwrap());
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) {
        let x = self.value(input);
        let wt = self.value(weight);
        let (ci, h, w) = dims3(x);
        let ws = wt.shape();
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (_, ho, wo) = dims3(g);
        let need_x = self.nodes[input.0].requires_grad;
        let need_w = self.nodes[weight.0].requires_grad;
        let (xd, wd, gd) = (x.data(), wt.data(), g.data());
        let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
        let mut gb = vec![0.0; co];
        for o in 0..co {
            let base = o * ho * wo;
            gb[o] = gd[base..base + ho * wo].iter().sum();
            for c in 0..ci {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let widx = ((o * ci + c) * kh + ki) * kw + kj;
                        let wv = wd[widx];
                        let mut acc_w = 0.0;
                        for oi in 0..ho {
                            let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let xrow = (c * h + ii as usize) * w;
                            let grow = base + oi * wo;
                            for oj in 0..wo {
                                let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let gv = gd[grow + oj];
                                let xi = xrow + jj as usize;
                                if need_w {
                                    acc_w += gv * xd[xi];
                                }
                                if need_x {
                                    gx[xi] += gv * wv;
                                }
                            }
                        }
                        if need_w {
                            gw[widx] += acc_w;
                        }
                    }
                }
            }
        }
        let (xs, wss, bs) = (
            x.shape().to_vec(),
            wt.shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if need_x {
            self.acc(input, Tensor::new(xs, gx).unwrap());
        }
        if need_w {
            self.acc(weight, Tensor::new(wss, gw).unwrap());
        }
        self.acc(bias, Tensor::new(bs, gb).unwrap());
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a 3-D tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// `[m, k] · [k, n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `G[m, n] · B[k, n]ᵀ -> [m, k]`.
fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A[m, k]ᵀ · G[m, n] -> [k, n]`.
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose_raw(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            data[c * m + r] = x.data()[r * n + c];
        }
    }
    Tensor::matrix(n, m, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_forward_matches_hand_product() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
        let bt = g.transpose(b);
        let c2 = g.matmul_t(a, bt);
        assert_eq!(g.value(c2).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![2.0]));
        let f = store.add("f", Tensor::row(vec![3.0]));
        store.set_trainable_prefix("f", false);
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let fv = g.param(f);
        let p = g.mul(wv, fv);
        let s = g.sum_all(p);
        g.backward(s);
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, w);
        assert_eq!(grads[0].1.data(), &[3.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.5]));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        g.backward(s);
        assert_eq!(g.param_grads()[0].1.data(), &[3.0]);
    }

    #[test]
    fn conv_output_size_uses_ceil() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = store.add("b", Tensor::zeros(&[1]));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[1, 5, 4], 1.0));
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.conv2d(x, wv, bv, (2, 2), (1, 1));
        assert_eq!(g.shape(y), &[1, 3, 2]);
        // top-left output sees a 2x2 valid patch
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn dropout_is_identity_until_enabled() {
        let store = ParamStore::new();
        let mut g = Graph::training(&store);
        let x = g.input(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        assert_eq!(g.dropout(x), x);
    }

    #[test]
    fn dropout_masks_scale_and_route_gradients() {
        let store = ParamStore::new();
        let run = |seed: u64| {
            let mut g = Graph::training(&store);
            g.set_dropout(0.5, seed);
            let x = g.input(Tensor::matrix(4, 8, vec![1.5; 32]).unwrap());
            let y = g.dropout(x);
            let s = g.sum_all(y);
            g.backward(s);
            (g.value(y).clone(), g.grad(x).unwrap().clone())
        };
        let (y, dx) = run(3);
        for (v, d) in y.data().iter().zip(dx.data()) {
            assert!(*v == 0.0 || *v == 3.0, "{v}");
            assert_eq!(*d, v / 1.5);
        }
        assert!(y.data().contains(&0.0) && y.data().contains(&3.0));
        assert_eq!(run(3).0, y);
        assert_ne!(run(4).0, y);
    }
}
