//! Differentiable layers built on [`Graph`].
//!
//! Every layer owns only [`ParamId`]s; values live in a [`ParamStore`] so that
//! freezing, checkpointing and optimizer steps work uniformly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{orthogonal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    #[default]
    None,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::None => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Gru,
    Bigru,
    Embedding,
    ScaledDotAttention,
    MultiheadAttention,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Linear,
        LayerKind::Conv2d,
        LayerKind::Gru,
        LayerKind::Bigru,
        LayerKind::Embedding,
        LayerKind::ScaledDotAttention,
        LayerKind::MultiheadAttention,
    ];
}

/// Declarative description of a layer's sizes.
///
/// `dims` meaning per kind: linear `[d_in, d_out]`; conv2d `[c_in, c_out, kernel, stride]`;
/// gru/bigru `[d_in, d_hidden]`; embedding `[vocab, d]`; scaled_dot_attention `[d, d_v]`;
/// multihead_attention `[d_model, heads]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, dims: &[usize], activation: Activation) -> Self {
        Self {
            kind,
            dims: dims.to_vec(),
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.kind {
            LayerKind::Conv2d => 4,
            _ => 2,
        };
        if self.dims.len() != want {
            return Err(Error::Invalid(format!(
                "{:?} expects {want} dims, got {:?}",
                self.kind, self.dims
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "{:?} dims must be positive: {:?}",
                self.kind, self.dims
            )));
        }
        if self.kind == LayerKind::MultiheadAttention && !self.dims[0].is_multiple_of(self.dims[1]) {
            return Err(Error::Invalid(format!(
                "{} heads do not divide width {}",
                self.dims[1], self.dims[0]
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[1, d_out], d_in, rng);
        Self {
            w,
            b,
            d_in,
            d_out,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(
            g.value(x).cols(),
            self.d_in,
            "linear expects trailing dim {}",
            self.d_in
        );
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        let y = g.add_row(y, b);
        self.activation.apply(g, y)
    }
}

/// Checked affine map for callers holding raw arrays.
pub fn linear(g: &mut Graph, layer: &Linear, input: Var) -> Result<Var> {
    if g.value(input).cols() != layer.d_in {
        return Err(Error::Shape(format!(
            "linear: trailing dim {} != d_in {}",
            g.value(input).cols(),
            layer.d_in
        )));
    }
    Ok(layer.forward(g, input))
}

// ---------------------------------------------------------------- embedding

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut data = Vec::with_capacity(vocab * dim);
        for _ in 0..vocab * dim {
            data.push(crate::params::gaussian(rng) * 0.3);
        }
        let table = store.add(format!("{name}.table"), Tensor::matrix(vocab, dim, data).unwrap());
        Self { table, vocab, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Invalid(format!(
                "embedding id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let t = g.param(self.table);
        Ok(g.gather_rows(t, ids))
    }
}

// ---------------------------------------------------------------- GRU

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Single-layer GRU with gate order (reset, update, candidate):
///
/// r = σ(x W_r + b_r + h U_r + c_r), z = σ(x W_z + b_z + h U_z + c_z),
/// n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n)), h' = (1 − z) ⊙ n + z ⊙ h.
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[d_in, 3 * d_h], d_h, rng);
        // one orthogonal block per gate
        let mut hh = Vec::with_capacity(d_h * 3 * d_h);
        let blocks: Vec<Tensor> = (0..3).map(|_| orthogonal(d_h, d_h, rng)).collect();
        for r in 0..d_h {
            for b in &blocks {
                hh.extend_from_slice(b.row_slice(r));
            }
        }
        let w_hh = store.add(format!("{name}.w_hh"), Tensor::matrix(d_h, 3 * d_h, hh).unwrap());
        let b_ih = store.add_uniform(format!("{name}.b_ih"), &[1, 3 * d_h], d_h, rng);
        let b_hh = store.add_uniform(format!("{name}.b_hh"), &[1, 3 * d_h], d_h, rng);
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            d_in,
            d_h,
        }
    }

    /// Input projections for every time step at once: `[t, 3h]`.
    fn project_inputs(&self, g: &mut Graph, inputs: Var) -> Var {
        let w = g.param(self.w_ih);
        let b = g.param(self.b_ih);
        let xp = g.matmul(inputs, w);
        g.add_row(xp, b)
    }

    fn cell(&self, g: &mut Graph, xp: Var, h: Var) -> Var {
        let d = self.d_h;
        let u = g.param(self.w_hh);
        let c = g.param(self.b_hh);
        let hp = g.matmul(h, u);
        let hp = g.add_row(hp, c);
        let xr = g.slice_cols(xp, 0, d);
        let xz = g.slice_cols(xp, d, 2 * d);
        let xn = g.slice_cols(xp, 2 * d, 3 * d);
        let hr = g.slice_cols(hp, 0, d);
        let hz = g.slice_cols(hp, d, 2 * d);
        let hn = g.slice_cols(hp, 2 * d, 3 * d);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(xn, rn);
        let n = g.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }

    /// One recurrent step on a `[1, d_in]` input.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let xp = self.project_inputs(g, x);
        self.cell(g, xp, h)
    }

    /// States `[t, d_h]` in input time order.
    pub fn forward(&self, g: &mut Graph, inputs: Var, h0: Var, dir: Direction) -> Result<Var> {
        let t = g.value(inputs).rows();
        if t == 0 {
            return Err(Error::Empty("gru input sequence".into()));
        }
        if g.value(inputs).cols() != self.d_in {
            return Err(Error::Shape(format!(
                "gru expects input width {}, got {}",
                self.d_in,
                g.value(inputs).cols()
            )));
        }
        let xp = self.project_inputs(g, inputs);
        let mut h = h0;
        let mut states = vec![h0; t];
        let order: Vec<usize> = match dir {
            Direction::Forward => (0..t).collect(),
            Direction::Backward => (0..t).rev().collect(),
        };
        for i in order {
            let xi = g.row(xp, i);
            h = self.cell(g, xi, h);
            states[i] = h;
        }
        Ok(g.concat_rows(&states))
    }

    /// Final state after consuming the whole sequence forward.
    pub fn last_state(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        let t = g.value(inputs).rows();
        let h0 = g.constant(Tensor::zeros(&[1, self.d_h]));
        let states = self.forward(g, inputs, h0, Direction::Forward)?;
        Ok(g.row(states, t - 1))
    }
}

/// Bidirectional GRU; output `[t, 2·d_h]` (forward ‖ backward).
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fwd: Gru::new(store, &format!("{name}.fwd"), d_in, d_h, rng),
            bwd: Gru::new(store, &format!("{name}.bwd"), d_in, d_h, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.d_h
    }

    pub fn forward(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        let h0 = g.constant(Tensor::zeros(&[1, self.fwd.d_h]));
        let f = self.fwd.forward(g, inputs, h0, Direction::Forward)?;
        let b = self.bwd.forward(g, inputs, h0, Direction::Backward)?;
        Ok(g.concat_cols(&[f, b]))
    }
}

// ---------------------------------------------------------------- attention

/// `softmax(q·Kᵀ/√d)` weights `[1, n]` and context `weights · V` `[1, d_v]`.
pub fn scaled_dot_attention(g: &mut Graph, query: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
    let n = g.value(keys).rows();
    if n == 0 {
        return Err(Error::Empty("attention over zero keys".into()));
    }
    let d = g.value(keys).cols();
    if g.value(query).cols() != d || g.value(query).rows() != 1 {
        return Err(Error::Shape(format!("query {:?} vs key width {d}", g.shape(query))));
    }
    if g.value(values).rows() != n {
        return Err(Error::Shape("keys and values differ in length".into()));
    }
    let logits = g.matmul_t(query, keys);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(logits);
    let context = g.matmul(weights, values);
    Ok((context, weights))
}

/// Attention pooling with one learnable query; keys = values = the sequence.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub query: ParamId,
    pub dim: usize,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let query = store.add_uniform(format!("{name}.query"), &[1, dim], dim, rng);
        Self { query, dim }
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<(Var, Var)> {
        let q = g.param(self.query);
        scaled_dot_attention(g, q, seq, seq)
    }

    /// Same with `shift` (`[1, dim]`) added to the learned query.
    pub fn forward_shifted(&self, g: &mut Graph, seq: Var, shift: Var) -> Result<(Var, Var)> {
        let q = g.param(self.query);
        let q = g.add(q, shift);
        scaled_dot_attention(g, q, seq, seq)
    }
}

/// Multi-head attention with learned Q/K/V projections and no output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_key: usize,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "heads must divide d_model");
        Self {
            wq: Linear::new(store, &format!("{name}.q"), d_query, d_model, Activation::None, rng),
            wk: Linear::new(store, &format!("{name}.k"), d_key, d_model, Activation::None, rng),
            wv: Linear::new(store, &format!("{name}.v"), d_key, d_model, Activation::None, rng),
            heads,
            d_model,
        }
    }

    /// Returns output `[m, d_model]` and per-head weights `[m, n]`.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var) -> (Var, Vec<Var>) {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys);
        let v = self.wv.forward(g, keys);
        let dh = self.d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
            let w = g.softmax_rows(logits);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let out = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (out, weights)
    }
}

// ---------------------------------------------------------------- conv stack

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStackConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Momentum of the running-statistics update.
    pub norm_momentum: f64,
}

impl Default for ConvStackConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 32, 64, 64, 128, 128],
            kernel: 3,
            stride: 2,
            norm_momentum: 0.1,
        }
    }
}

impl ConvStackConfig {
    /// Output width of each time step for `bins` input bins.
    pub fn out_width(&self, bins: usize) -> usize {
        let mut w = bins;
        for _ in &self.channels {
            w = (w + 2 * (self.kernel / 2) - self.kernel) / self.stride + 1;
        }
        self.channels.last().copied().unwrap_or(1) * w
    }

    pub fn out_frames(&self, frames: usize) -> usize {
        let mut h = frames.max(1);
        for _ in &self.channels {
            h = (h + 2 * (self.kernel / 2) - self.kernel) / self.stride + 1;
        }
        h
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    prefix: String,
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

/// Conv → running-statistics normalization → ReLU, repeated.
#[derive(Debug, Clone)]
pub struct ConvStack {
    layers: Vec<ConvLayer>,
    cfg: ConvStackConfig,
    bins: usize,
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ConvStackConfig, bins: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut c_in = 1;
        let k = cfg.kernel;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let prefix = format!("{name}.conv{i}");
            let fan_in = c_in * k * k;
            let w = store.add_uniform(format!("{prefix}.w"), &[c_out, c_in, k, k], fan_in, rng);
            let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
            let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(&[c_out], 1.0));
            let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[c_out]));
            let mean = store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c_out]));
            let var = store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[c_out], 1.0));
            layers.push(ConvLayer {
                prefix,
                w,
                b,
                gamma,
                beta,
                mean,
                var,
            });
            c_in = c_out;
        }
        Self {
            layers,
            cfg: cfg.clone(),
            bins,
        }
    }

    pub fn out_width(&self) -> usize {
        self.cfg.out_width(self.bins)
    }

    /// `[frames, bins]` → `[frames', channels·bins']`. Empty input becomes one zero frame.
    pub fn forward(&self, g: &mut Graph, mel: Var) -> Result<Var> {
        let (frames, bins) = (g.value(mel).rows(), g.value(mel).cols());
        if bins != self.bins {
            return Err(Error::Shape(format!(
                "conv stack built for {} bins, got {bins}",
                self.bins
            )));
        }
        let x = if frames == 0 {
            g.constant(Tensor::zeros(&[1, 1, bins]))
        } else {
            g.reshape(mel, &[1, frames, bins])
        };
        let mut x = x;
        let eps = 1e-5;
        let pad = self.cfg.kernel / 2;
        let stride = self.cfg.stride;
        for layer in &self.layers {
            let w = g.param(layer.w);
            let b = g.param(layer.b);
            let y = g.conv2d(x, w, b, (stride, stride), (pad, pad));
            let mean = g.store().value(layer.mean).data().to_vec();
            let var = g.store().value(layer.var).data().to_vec();
            if g.is_training() && g.store().prefix_trainable(&layer.prefix) {
                let (bm, bv) = channel_stats(g.value(y));
                let m = self.cfg.norm_momentum;
                let nm: Vec<f64> = mean.iter().zip(&bm).map(|(o, n)| (1.0 - m) * o + m * n).collect();
                let nv: Vec<f64> = var.iter().zip(&bv).map(|(o, n)| (1.0 - m) * o + m * n).collect();
                let c = nm.len();
                g.queue_buffer_update(layer.mean, Tensor::new(vec![c], nm).unwrap());
                g.queue_buffer_update(layer.var, Tensor::new(vec![c], nv).unwrap());
            }
            let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let gamma = g.param(layer.gamma);
            let beta = g.param(layer.beta);
            let y = g.channel_affine(y, gamma, beta, mean, inv_std);
            x = g.relu(y);
        }
        // [c, h, w] → [h, c·w]
        let s = g.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut idx = Vec::with_capacity(c * h * w);
        for t in 0..h {
            for ch in 0..c {
                for f in 0..w {
                    idx.push((ch * h + t) * w + f);
                }
            }
        }
        let flat = g.reshape(x, &[c * h * w, 1]);
        let gathered = g.gather_rows(flat, &idx);
        Ok(g.reshape(gathered, &[h, c * w]))
    }
}

fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = &t.data()[ch * plane..(ch + 1) * plane];
        let m = xs.iter().sum::<f64>() / plane as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / plane as f64;
        means.push(m);
        vars.push(v);
    }
    (means, vars)
}

// ---------------------------------------------------------------- transformer

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt, 1e-5)
    }
}

/// Self-attention + position-wise feed-forward, post-norm residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    attn: MultiHeadAttention,
    out: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, d_model, d_model, heads, rng),
            out: Linear::new(
                store,
                &format!("{name}.attn_out"),
                d_model,
                d_model,
                Activation::None,
                rng,
            ),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, Activation::Relu, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, Activation::None, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (a, _) = self.attn.forward(g, x, x);
        let a = self.out.forward(g, a);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, x);
        let f = self.ff1.forward(g, x);
        let f = self.ff2.forward(g, f);
        let x = g.add(x, f);
        self.ln2.forward(g, x)
    }
}

/// Sinusoidal position table `[n, d]`.
pub fn sinusoid_table(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(n, d, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let mut s = ParamStore::new();
        let l = Linear::new(&mut s, "l", 3, 3, Activation::None, &mut rng());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        s.get_mut(l.w).value = Tensor::matrix(3, 3, eye).unwrap();
        s.get_mut(l.b).value = Tensor::zeros(&[1, 3]);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0., 7.]).unwrap());
        let y = l.forward(&mut g, x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn linear_zero_weights_gives_tanh_bias() {
        let mut s = ParamStore::new();
        let l = Linear::new(&mut s, "l", 2, 2, Activation::Tanh, &mut rng());
        s.get_mut(l.w).value = Tensor::zeros(&[2, 2]);
        s.get_mut(l.b).value = Tensor::row(vec![0.3, -1.2]);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![5.0, -9.0]));
        let y = l.forward(&mut g, x);
        assert_eq!(g.value(y).data(), &[0.3f64.tanh(), (-1.2f64).tanh()]);
    }

    #[test]
    fn linear_random_3x4_matches_dot_products() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let l = Linear::new(&mut s, "l", 4, 2, Activation::None, &mut r);
        let mut g = Graph::new(&s);
        let xs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(Tensor::matrix(3, 4, xs.clone()).unwrap());
        let y = linear(&mut g, &l, x).unwrap();
        let w = s.value(l.w);
        let b = s.value(l.b);
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += xs[i * 4 + k] * w.get2(k, j);
                }
                assert!((g.value(y).get2(i, j) - acc).abs() < 1e-14);
            }
        }
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(linear(&mut g, &l, bad).is_err());
    }

    #[test]
    fn attention_single_key_returns_value() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(Tensor::row(vec![0.4, -0.2]));
        let k = g.constant(Tensor::row(vec![1.0, 2.0]));
        let v = g.constant(Tensor::row(vec![7.0, 8.0, 9.0]));
        let (c, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(c).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn attention_identical_keys_uniform() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(Tensor::row(vec![0.4, -0.2]));
        let k = g.constant(Tensor::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap());
        let (_, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for &x in g.value(w).data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_closed_form_quarter_three_quarters() {
        // q·k = [0, ln 3] after the 1/sqrt(d) scaling with d = 1
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(Tensor::row(vec![1.0]));
        let k = g.constant(Tensor::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let (c, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert!((g.value(w).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(w).data()[1] - 0.75).abs() < 1e-15);
        assert!((g.value(c).data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_empty_keys() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(Tensor::row(vec![1.0]));
        let k = g.constant(Tensor::zeros(&[0, 1]));
        let v = g.constant(Tensor::zeros(&[0, 1]));
        assert!(scaled_dot_attention(&mut g, q, k, v).is_err());
    }

    #[test]
    fn gru_zero_weights_single_step_is_zero() {
        let mut s = ParamStore::new();
        let gru = Gru::new(&mut s, "g", 3, 4, &mut rng());
        for id in [gru.w_ih, gru.w_hh, gru.b_ih, gru.b_hh] {
            let shape = s.value(id).shape().to_vec();
            s.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![1.0, -1.0, 2.0]));
        let out = gru.last_state(&mut g, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn gru_two_steps_match_scalar_recurrence() {
        let mut s = ParamStore::new();
        let gru = Gru::new(&mut s, "g", 1, 1, &mut rng());
        let p = |id| s.value(id).data().to_vec();
        let (wi, wh, bi, bh) = (p(gru.w_ih), p(gru.w_hh), p(gru.b_ih), p(gru.b_hh));
        let xs = [0.7, -1.3];
        let mut h = 0.0f64;
        let mut want = vec![];
        for &x in &xs {
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let r = sig(x * wi[0] + bi[0] + h * wh[0] + bh[0]);
            let z = sig(x * wi[1] + bi[1] + h * wh[1] + bh[1]);
            let n = (x * wi[2] + bi[2] + r * (h * wh[2] + bh[2])).tanh();
            h = (1.0 - z) * n + z * h;
            want.push(h);
        }
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::matrix(2, 1, xs.to_vec()).unwrap());
        let h0 = g.constant(Tensor::zeros(&[1, 1]));
        let st = gru.forward(&mut g, x, h0, Direction::Forward).unwrap();
        for (a, b) in g.value(st).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn bigru_width_is_twice_hidden() {
        let mut s = ParamStore::new();
        let bi = BiGru::new(&mut s, "b", 2, 5, &mut rng());
        for t in [1, 4] {
            let mut g = Graph::new(&s);
            let x = g.constant(Tensor::full(&[t, 2], 0.3));
            let y = bi.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[t, 10]);
        }
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros(&[0, 2]));
        assert!(bi.forward(&mut g, x).is_err());
    }

    #[test]
    fn conv_stack_shapes() {
        let mut s = ParamStore::new();
        let cfg = ConvStackConfig {
            channels: vec![2, 2, 3, 3, 4, 4],
            ..Default::default()
        };
        let stack = ConvStack::new(&mut s, "ref", &cfg, 8, &mut rng());
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::full(&[64, 8], 0.1));
        let y = stack.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, stack.out_width()]);
        let one = g.constant(Tensor::full(&[1, 8], 0.1));
        let y1 = stack.forward(&mut g, one).unwrap();
        assert_eq!(g.value(y1).rows(), 1);
        let empty = g.constant(Tensor::zeros(&[0, 8]));
        let y0 = stack.forward(&mut g, empty).unwrap();
        assert_eq!(g.value(y0).rows(), 1);
        assert_eq!(cfg.out_frames(64), 1);
        assert_eq!(cfg.out_frames(65), 2);
    }

    #[test]
    fn conv_stack_zero_input_zero_bias_gives_zero() {
        let mut s = ParamStore::new();
        let cfg = ConvStackConfig {
            channels: vec![2, 3],
            ..Default::default()
        };
        let stack = ConvStack::new(&mut s, "ref", &cfg, 6, &mut rng());
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros(&[9, 6]));
        let y = stack.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_update_only_when_trainable() {
        let mut s = ParamStore::new();
        let cfg = ConvStackConfig {
            channels: vec![2],
            ..Default::default()
        };
        let stack = ConvStack::new(&mut s, "enc", &cfg, 4, &mut rng());
        let x = Tensor::full(&[5, 4], 1.0);
        {
            let mut g = Graph::training(&s);
            let xv = g.constant(x.clone());
            stack.forward(&mut g, xv).unwrap();
            assert_eq!(g.take_buffer_updates().len(), 2);
        }
        s.set_trainable_prefix("enc", false);
        let mut g = Graph::training(&s);
        let xv = g.constant(x);
        stack.forward(&mut g, xv).unwrap();
        assert!(g.take_buffer_updates().is_empty());
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::new(LayerKind::MultiheadAttention, &[8, 3], Activation::None)
            .validate()
            .is_err());
        assert!(LayerSpec::new(LayerKind::MultiheadAttention, &[8, 4], Activation::None)
            .validate()
            .is_ok());
        assert!(LayerSpec::new(LayerKind::Linear, &[0, 4], Activation::Tanh)
            .validate()
            .is_err());
        assert!(LayerSpec::new(LayerKind::Conv2d, &[1, 4], Activation::Relu)
            .validate()
            .is_err());
    }
}
