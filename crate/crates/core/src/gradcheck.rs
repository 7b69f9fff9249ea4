//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{AcousticConfig, AcousticModel, Mode, Targets};
use crate::autograd::{Graph, Var};
use crate::context::{ContextEncoder, ContextEncoderConfig, SentenceQuery};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, StyleTokenLayer};
use crate::nn::{
    scaled_dot_attention, Activation, BiGru, ConvStack, ConvStackConfig, Direction, Embedding, Gru, LayerKind,
    LayerSpec, Linear, MultiHeadAttention,
};
use crate::params::{gaussian, ParamStore};
use crate::predictor::{PredictorConfig, StyleNodes, StylePredictor};
use crate::tensor::Tensor;

type LossFn = dyn Fn(&mut Graph) -> Result<Var>;

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(param name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients of the scalar `f` against central differences
/// for every trainable parameter element in `store`.
///
/// `f` must build its graph from `store` only and be deterministic. The
/// forward passes run in inference mode, so running statistics stay fixed.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        check_scalar(&g, out)?;
        g.backward(out);
        g.param_grads()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        tol,
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        check_scalar(&g, out)
    };
    for (id, grad) in analytic {
        for k in 0..grad.len() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[k];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}

// ---- the standard suite ----

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| gaussian(rng)).collect()).expect("shape")
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element carries a
/// distinct weight.
fn project(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|_| gaussian(rng)).collect()).expect("shape");
    let r = g.constant(r);
    let p = g.mul(y, r);
    g.sum_all(p)
}

fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Gradient check of one layer built from its spec with random parameters
/// and inputs. Conv2d with `c_in > 1` gets a lifting layer from the single
/// mel channel first, since the stack always starts from one channel.
pub fn check_layer(spec: &LayerSpec, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = &spec.dims;
    let rows = 3;
    let f: Box<LossFn> = match spec.kind {
        LayerKind::Linear => {
            let l = Linear::new(&mut store, "linear", d[0], d[1], spec.activation, &mut rng);
            let x = random(rows, d[0], &mut rng);
            let r = rng.gen();
            Box::new(move |g| {
                let x = g.constant(x.clone());
                let y = l.forward(g, x);
                Ok(project(g, y, &mut ChaCha8Rng::seed_from_u64(r)))
            })
        }
        LayerKind::Conv2d => {
            let channels = if d[0] == 1 { vec![d[1]] } else { vec![d[0], d[1]] };
            let cfg = ConvStackConfig {
                channels,
                kernel: d[2],
                stride: d[3],
                ..ConvStackConfig::default()
            };
            let bins = 6;
            let c = ConvStack::new(&mut store, "conv", &cfg, bins, &mut rng);
            let x = random(5, bins, &mut rng);
            let r = rng.gen();
            Box::new(move |g| {
                let x = g.constant(x.clone());
                let y = c.forward(g, x)?;
                Ok(project(g, y, &mut ChaCha8Rng::seed_from_u64(r)))
            })
        }
        LayerKind::Gru => {
            let gru = Gru::new(&mut store, "gru", d[0], d[1], &mut rng);
            let x = random(rows, d[0], &mut rng);
            let h0 = random(1, d[1], &mut rng);
            let r = rng.gen();
            Box::new(move |g| {
                let x = g.constant(x.clone());
                let h = g.constant(h0.clone());
                let y = gru.forward(g, x, h, Direction::Forward)?;
                Ok(project(g, y, &mut ChaCha8Rng::seed_from_u64(r)))
            })
        }
        LayerKind::Bigru => {
            let gru = BiGru::new(&mut store, "bigru", d[0], d[1], &mut rng);
            let x = random(rows, d[0], &mut rng);
            let r = rng.gen();
            Box::new(move |g| {
                let x = g.constant(x.clone());
                let y = gru.forward(g, x)?;
                Ok(project(g, y, &mut ChaCha8Rng::seed_from_u64(r)))
            })
        }
        LayerKind::Embedding => {
            let e = Embedding::new(&mut store, "embedding", d[0], d[1], &mut rng);
            let ids: Vec<usize> = (0..rows + 1).map(|_| rng.gen_range(0..d[0])).collect();
            let r = rng.gen();
            Box::new(move |g| {
                let y = e.forward(g, &ids)?;
                Ok(project(g, y, &mut ChaCha8Rng::seed_from_u64(r)))
            })
        }
        LayerKind::ScaledDotAttention => {
            let q = store.add("attention.query", random(1, d[0], &mut rng));
            let k = store.add("attention.keys", random(rows + 1, d[0], &mut rng));
            let v = store.add("attention.values", random(rows + 1, d[1], &mut rng));
            let r = rng.gen();
            Box::new(move |g| {
                let (q, k, v) = (g.param(q), g.param(k), g.param(v));
                let (ctx, _) = scaled_dot_attention(g, q, k, v)?;
                Ok(project(g, ctx, &mut ChaCha8Rng::seed_from_u64(r)))
            })
        }
        LayerKind::MultiheadAttention => {
            let m = MultiHeadAttention::new(&mut store, "mha", d[0], d[0], d[0], d[1], &mut rng);
            let q = random(2, d[0], &mut rng);
            let k = random(rows + 1, d[0], &mut rng);
            let r = rng.gen();
            Box::new(move |g| {
                let (q, k) = (g.constant(q.clone()), g.constant(k.clone()));
                let (y, _) = m.forward(g, q, k);
                Ok(project(g, y, &mut ChaCha8Rng::seed_from_u64(r)))
            })
        }
    };
    grad_check(&mut store, f, eps, tol)
}

/// Small dims used for each layer kind in the suite.
pub fn default_layer_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(LayerKind::Linear, &[4, 3], Activation::Tanh),
        LayerSpec::new(LayerKind::Linear, &[3, 2], Activation::None),
        LayerSpec::new(LayerKind::Conv2d, &[1, 2, 3, 2], Activation::Relu),
        LayerSpec::new(LayerKind::Conv2d, &[2, 2, 3, 2], Activation::Relu),
        LayerSpec::new(LayerKind::Gru, &[3, 4], Activation::None),
        LayerSpec::new(LayerKind::Bigru, &[3, 2], Activation::None),
        LayerSpec::new(LayerKind::Embedding, &[5, 3], Activation::None),
        LayerSpec::new(LayerKind::ScaledDotAttention, &[4, 3], Activation::None),
        LayerSpec::new(LayerKind::MultiheadAttention, &[4, 2], Activation::None),
    ]
}

fn check_token_layer(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ExtractorConfig {
        d_style: 4,
        tokens: 3,
        heads: 2,
        ..ExtractorConfig::default()
    };
    let layer = StyleTokenLayer::new(&mut store, "tokens", &cfg, &mut rng);
    let residual = random(2, 4, &mut rng);
    let r = rng.gen();
    grad_check(
        &mut store,
        |g| {
            let x = g.constant(residual.clone());
            let (y, _) = layer.forward(g, x);
            Ok(project(g, y, &mut ChaCha8Rng::seed_from_u64(r)))
        },
        eps,
        tol,
    )
}

fn check_predictor_stack(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_sem, d_ctx, d_style) = (3, 4, 4);
    let enc = ContextEncoder::new(
        &mut store,
        ContextEncoderConfig {
            d_sem,
            d_ctx,
            sentence_query: SentenceQuery::Current,
        },
        &mut rng,
    );
    let pred = StylePredictor::new(&mut store, PredictorConfig { d_ctx, d_style }, &mut rng);
    let sem = random(5, d_sem, &mut rng);
    let target = random(1, d_style, &mut rng).map(|v| 0.5 * v.tanh());
    let target_w = random(3, d_style, &mut rng).map(|v| 0.5 * v.tanh());
    grad_check(
        &mut store,
        |g| {
            let x = g.constant(sem.clone());
            let ctx = enc.encode_context(g, x, &[(0, 2), (2, 3)], 1)?;
            let s = pred.predict_hierarchical(g, &ctx)?;
            let t = g.constant(target.clone());
            let tw = g.constant(target_w.clone());
            let a = mse(g, s.s_g, t);
            let b = mse(g, s.s_s, t);
            let c = mse(g, s.s_w, tw);
            let ab = g.add(a, b);
            Ok(g.add(ab, c))
        },
        eps,
        tol,
    )
}

fn check_acoustic_mel_loss(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AcousticConfig {
        d_model: 4,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        d_ff: 6,
        mel_bins: 5,
        variance_bins: 8,
        pitch_range_hz: [0.0, 600.0],
        energy_range: [0.0, 2.0],
        inventory: ["AA", "B", "K", "S"].iter().map(|s| s.to_string()).collect(),
        pitch_stats: [150.0, 50.0],
        energy_stats: [1.0, 0.5],
    };
    let m = AcousticModel::new(&mut store, &cfg, &mut rng);
    let target = random(5, 5, &mut rng);
    let sw = random(2, 4, &mut rng);
    let sg = random(1, 4, &mut rng);
    let ss = random(1, 4, &mut rng);
    grad_check(
        &mut store,
        |g| {
            let s = StyleNodes {
                s_g: g.constant(sg.clone()),
                s_s: g.constant(ss.clone()),
                s_w: g.constant(sw.clone()),
            };
            let t = Targets {
                durations: &[2, 1, 2],
                pitch: &[110.0, 0.0, 230.0],
                energy: &[0.7, 0.3, 1.2],
            };
            let v = m.synthesize(g, &[0, 2, 1], &[0, 1, 1], Some(&s), Mode::TeacherForced(&t))?;
            let tg = g.constant(target.clone());
            Ok(mse(g, v.mel, tg))
        },
        eps,
        tol,
    )
}

/// Every layer kind, the style token layer, the context encoder plus
/// hierarchical predictor, and the teacher-forced acoustic mel loss.
pub fn standard_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (i, spec) in default_layer_specs().iter().enumerate() {
        let name = format!("{:?} {:?}", spec.kind, spec.dims).to_lowercase();
        out.push((name, check_layer(spec, seed + i as u64, eps, tol)?));
    }
    out.push(("style token layer".into(), check_token_layer(seed, eps, tol)?));
    out.push((
        "context encoder + predictor".into(),
        check_predictor_stack(seed, eps, tol)?,
    ));
    out.push(("acoustic mel loss".into(), check_acoustic_mel_loss(seed, eps, tol)?));
    Ok(out)
}

fn check_scalar(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar output, got {:?}",
            v.shape()
        )));
    }
    if let Some((index, value)) = g.first_non_finite() {
        return Err(Error::NonFinite { index, value });
    }
    Ok(v.data()[0])
}
