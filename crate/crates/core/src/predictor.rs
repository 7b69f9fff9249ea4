//! Style prediction from context embeddings: the hierarchical predictor
//! (global → sentence → subword, each conditioned on the coarser output) and
//! the autoregressive paragraph variant.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::context::ContextVars;
use crate::error::{Error, Result};
use crate::extractor::StyleEmbeddings;
use crate::nn::{Activation, Gru, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type PredictedStyles = StyleEmbeddings;

/// Graph nodes of a style triple: `[1, d]`, `[1, d]`, `[n, d]`.
#[derive(Debug, Clone, Copy)]
pub struct StyleNodes {
    pub s_g: Var,
    pub s_s: Var,
    pub s_w: Var,
}

impl StyleNodes {
    pub fn values(&self, g: &Graph) -> StyleEmbeddings {
        StyleEmbeddings {
            s_g: g.value(self.s_g).data().to_vec(),
            s_s: g.value(self.s_s).data().to_vec(),
            s_w: g.value(self.s_w).clone(),
        }
    }

    pub fn constant(g: &mut Graph, s: &StyleEmbeddings) -> Self {
        let d = s.d_style();
        Self {
            s_g: g.constant(Tensor::row(s.s_g.clone())),
            s_s: g.constant(Tensor::row(s.s_s.clone())),
            s_w: g.constant(if s.s_w.rows() == 0 {
                Tensor::zeros(&[0, d])
            } else {
                s.s_w.clone()
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub d_ctx: usize,
    pub d_style: usize,
}

#[derive(Debug, Clone)]
pub struct StylePredictor {
    pub f_g: Linear,
    pub f_s: Linear,
    pub f_w: Linear,
    pub ar_sentence: Gru,
    pub ar_sentence_out: Linear,
    pub ar_subword: Gru,
    pub ar_subword_out: Linear,
    pub cfg: PredictorConfig,
}

/// Previous-step inputs for the autoregressive predictor.
#[derive(Debug, Clone, Copy)]
pub enum PreviousStyles<'a> {
    /// Feed back the model's own predictions.
    Predicted,
    /// Feed back the given per-sentence styles (teacher forcing).
    Given(&'a [StyleNodes]),
}

impl StylePredictor {
    pub const PREFIX: &'static str = "predictor";

    pub fn new(store: &mut ParamStore, cfg: PredictorConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = Self::PREFIX;
        let (c, d) = (cfg.d_ctx, cfg.d_style);
        Self {
            f_g: Linear::new(store, &format!("{p}.global"), c, d, Activation::Tanh, rng),
            f_s: Linear::new(store, &format!("{p}.sentence"), c + d, d, Activation::Tanh, rng),
            f_w: Linear::new(store, &format!("{p}.subword"), c + d, d, Activation::Tanh, rng),
            ar_sentence: Gru::new(store, &format!("{p}.ar_sentence.gru"), c + 2 * d, d, rng),
            ar_sentence_out: Linear::new(store, &format!("{p}.ar_sentence.out"), d, d, Activation::Tanh, rng),
            ar_subword: Gru::new(store, &format!("{p}.ar_subword.gru"), c + 2 * d, d, rng),
            ar_subword_out: Linear::new(store, &format!("{p}.ar_subword.out"), d, d, Activation::Tanh, rng),
            cfg,
        }
    }

    /// Ŝ_g = f_g(C_g), Ŝ_s = f_s(C_s[cur], Ŝ_g), Ŝ_w[i] = f_w(C_w[cur][i], Ŝ_g + Ŝ_s).
    pub fn predict_hierarchical(&self, g: &mut Graph, ctx: &ContextVars) -> Result<StyleNodes> {
        if ctx.current >= ctx.c_w.len() {
            return Err(Error::Invalid("context has no current sentence".into()));
        }
        let s_g = self.f_g.forward(g, ctx.c_g);
        let c_s = ctx.current_c_s(g);
        let x = g.concat_cols(&[c_s, s_g]);
        let s_s = self.f_s.forward(g, x);
        let c_w = ctx.current_c_w();
        let n = g.value(c_w).rows();
        let cond = g.add(s_g, s_s);
        let cond = g.gather_rows(cond, &vec![0; n]);
        let x = g.concat_cols(&[c_w, cond]);
        let s_w = self.f_w.forward(g, x);
        Ok(StyleNodes { s_g, s_s, s_w })
    }

    /// Sentence-by-sentence prediction over one document. `ctx_seq[t]` is the
    /// encoded window of sentence `t`. Recurrent states start at zero and
    /// carry across sentences; the first previous-style inputs are zero.
    pub fn predict_paragraph_ar(
        &self,
        g: &mut Graph,
        ctx_seq: &[ContextVars],
        previous: PreviousStyles,
    ) -> Result<Vec<StyleNodes>> {
        if ctx_seq.is_empty() {
            return Err(Error::Empty("document without sentences".into()));
        }
        if let PreviousStyles::Given(given) = previous {
            if given.len() + 1 < ctx_seq.len() {
                return Err(Error::Shape(format!(
                    "{} teacher styles for {} sentences",
                    given.len(),
                    ctx_seq.len()
                )));
            }
        }
        let d = self.cfg.d_style;
        let zero = g.constant(Tensor::zeros(&[1, d]));
        let mut h_s = zero;
        let mut h_w = zero;
        let mut prev_s = zero;
        let mut prev_w = zero;
        let mut out = Vec::with_capacity(ctx_seq.len());
        for (t, ctx) in ctx_seq.iter().enumerate() {
            let s_g = self.f_g.forward(g, ctx.c_g);
            let c_s = ctx.current_c_s(g);
            let x = g.concat_cols(&[c_s, s_g, prev_s]);
            h_s = self.ar_sentence.step(g, x, h_s);
            let s_s = self.ar_sentence_out.forward(g, h_s);
            let cond = g.add(s_g, s_s);
            let c_w = ctx.current_c_w();
            let n = g.value(c_w).rows();
            let teacher_w = match previous {
                PreviousStyles::Given(given) if t < given.len() => Some(given[t].s_w),
                _ => None,
            };
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let cw = g.row(c_w, i);
                let x = g.concat_cols(&[cw, cond, prev_w]);
                h_w = self.ar_subword.step(g, x, h_w);
                let y = self.ar_subword_out.forward(g, h_w);
                rows.push(y);
                prev_w = match teacher_w {
                    Some(tw) => g.row(tw, i),
                    None => y,
                };
            }
            let s_w = g.concat_rows(&rows);
            prev_s = match previous {
                PreviousStyles::Given(given) if t < given.len() => given[t].s_s,
                _ => s_s,
            };
            out.push(StyleNodes { s_g, s_s, s_w });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{ContextEncoder, ContextEncoderConfig, SentenceQuery};
    use crate::gradcheck::grad_check;
    use crate::params::gaussian;
    use rand::SeedableRng;

    struct Fixture {
        store: ParamStore,
        enc: ContextEncoder,
        pred: StylePredictor,
        rng: ChaCha8Rng,
    }

    fn fixture(d_sem: usize, d_ctx: usize, d_style: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = ContextEncoder::new(
            &mut store,
            ContextEncoderConfig {
                d_sem,
                d_ctx,
                sentence_query: SentenceQuery::Learned,
            },
            &mut rng,
        );
        let pred = StylePredictor::new(&mut store, PredictorConfig { d_ctx, d_style }, &mut rng);
        Fixture { store, enc, pred, rng }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| gaussian(rng)).collect()).unwrap()
    }

    fn zero_prefix(store: &mut ParamStore, prefix: &str) {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn zero_parameters_give_zero_styles() {
        let mut f = fixture(4, 6, 5);
        zero_prefix(&mut f.store, "predictor");
        let mut g = Graph::new(&f.store);
        let x = g.constant(random(9, 4, &mut f.rng));
        let ctx = f.enc.encode_context(&mut g, x, &[(0, 3), (3, 6)], 1).unwrap();
        let s = f.pred.predict_hierarchical(&mut g, &ctx).unwrap().values(&g);
        assert!(s.s_g.iter().chain(&s.s_s).chain(s.s_w.data()).all(|&v| v == 0.0));
        assert_eq!(s.s_w.shape(), &[6, 5]);
    }

    #[test]
    fn outputs_are_tanh_bounded() {
        let mut f = fixture(4, 6, 5);
        let mut g = Graph::new(&f.store);
        let x = g.constant(random(4, 4, &mut f.rng).map(|v| v * 50.0));
        let ctx = f.enc.encode_context(&mut g, x, &[(0, 4)], 0).unwrap();
        let s = f.pred.predict_hierarchical(&mut g, &ctx).unwrap().values(&g);
        assert!(s.s_g.iter().chain(&s.s_s).chain(s.s_w.data()).all(|v| v.abs() < 1.0));
    }

    #[test]
    fn coarse_style_conditions_finer_levels() {
        let mut f = fixture(4, 6, 5);
        let sem = random(5, 4, &mut f.rng);
        let run = |store: &ParamStore, bump: f64| {
            let mut g = Graph::new(store);
            let x = g.constant(sem.clone());
            let mut ctx = f.enc.encode_context(&mut g, x, &[(0, 2), (2, 3)], 1).unwrap();
            let b = g.constant(Tensor::full(&[1, 6], bump));
            ctx.c_g = g.add(ctx.c_g, b);
            f.pred.predict_hierarchical(&mut g, &ctx).unwrap().values(&g)
        };
        let a = run(&f.store, 0.0);
        let b = run(&f.store, 0.3);
        assert_ne!(a.s_g, b.s_g);
        assert_ne!(a.s_s, b.s_s);
        assert_ne!(a.s_w, b.s_w);
    }

    #[test]
    fn conditioning_path_only() {
        // keep only the style-condition rows of f_s / f_w weights
        let mut f = fixture(4, 6, 5);
        for lin in [&f.pred.f_s, &f.pred.f_w] {
            let w = f.store.get_mut(lin.w).value.data_mut();
            for r in 0..6 {
                for c in 0..5 {
                    w[r * 5 + c] = 0.0;
                }
            }
        }
        let sem = random(5, 4, &mut f.rng);
        let mut other = sem.clone();
        other.data_mut()[10] += 1.0; // inside the current sentence
        let run = |sem: &Tensor, bump: f64| {
            let mut g = Graph::new(&f.store);
            let x = g.constant(sem.clone());
            let mut ctx = f.enc.encode_context(&mut g, x, &[(0, 2), (2, 3)], 1).unwrap();
            // hold Ŝ_g fixed by pinning C_g
            ctx.c_g = g.constant(Tensor::full(&[1, 6], bump));
            f.pred.predict_hierarchical(&mut g, &ctx).unwrap().values(&g)
        };
        let a = run(&sem, 0.1);
        let b = run(&other, 0.1);
        assert_eq!(a.s_s, b.s_s);
        assert_eq!(a.s_w, b.s_w);
        let c = run(&sem, 0.7);
        assert_ne!(a.s_s, c.s_s);
        assert_ne!(a.s_w, c.s_w);
    }

    fn encode_doc(
        f: &Fixture,
        g: &mut Graph,
        sems: &[Tensor],
        offsets: &[(usize, usize)],
        currents: &[usize],
    ) -> Vec<ContextVars> {
        sems.iter()
            .zip(currents)
            .map(|(s, &c)| {
                let x = g.constant(s.clone());
                f.enc.encode_context(g, x, offsets, c).unwrap()
            })
            .collect()
    }

    #[test]
    fn ar_single_sentence_matches_hierarchical_global() {
        let mut f = fixture(4, 6, 5);
        let sem = random(3, 4, &mut f.rng);
        let mut g = Graph::new(&f.store);
        let ctx = encode_doc(&f, &mut g, &[sem], &[(0, 3)], &[0]);
        let ar = f
            .pred
            .predict_paragraph_ar(&mut g, &ctx, PreviousStyles::Predicted)
            .unwrap();
        let h = f.pred.predict_hierarchical(&mut g, &ctx[0]).unwrap();
        assert_eq!(ar.len(), 1);
        assert_eq!(g.value(ar[0].s_g), g.value(h.s_g));
    }

    #[test]
    fn ar_carries_previous_sentence() {
        let mut f = fixture(4, 6, 5);
        let s0 = random(4, 4, &mut f.rng);
        let s1 = random(4, 4, &mut f.rng);
        let offsets = [(0, 2), (2, 2)];
        let run = |s0: &Tensor| {
            let mut g = Graph::new(&f.store);
            let ctx = encode_doc(&f, &mut g, &[s0.clone(), s1.clone()], &offsets, &[0, 1]);
            let out = f
                .pred
                .predict_paragraph_ar(&mut g, &ctx, PreviousStyles::Predicted)
                .unwrap();
            out.iter().map(|n| n.values(&g)).collect::<Vec<_>>()
        };
        let a = run(&s0);
        let mut p = s0.clone();
        p.data_mut()[0] += 0.5;
        let b = run(&p);
        assert_ne!(a[1].s_s, b[1].s_s);
        assert_eq!(a, run(&s0));
    }

    #[test]
    fn gradient_check_predictor_stack() {
        let mut f = fixture(3, 4, 4);
        let sem = random(5, 3, &mut f.rng);
        let target = random(1, 4, &mut f.rng).map(|v| 0.5 * v.tanh());
        let target_w = random(3, 4, &mut f.rng).map(|v| 0.5 * v.tanh());
        let (enc, pred) = (f.enc.clone(), f.pred.clone());
        let report = grad_check(
            &mut f.store,
            |g| {
                let x = g.constant(sem.clone());
                let ctx = enc.encode_context(g, x, &[(0, 2), (2, 3)], 1)?;
                let s = pred.predict_hierarchical(g, &ctx)?;
                let t = g.constant(target.clone());
                let tw = g.constant(target_w.clone());
                let dg = g.sub(s.s_g, t);
                let ds = g.sub(s.s_s, t);
                let dw = g.sub(s.s_w, tw);
                let parts: Vec<Var> = [dg, ds, dw]
                    .into_iter()
                    .map(|d| {
                        let sq = g.square(d);
                        g.mean_all(sq)
                    })
                    .collect();
                let a = g.add(parts[0], parts[1]);
                Ok(g.add(a, parts[2]))
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
