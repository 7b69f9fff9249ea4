//! Hierarchical context encoder: subword-level then sentence-level
//! bidirectional GRU with attention pooling.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, AttentionPool, BiGru, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEncoderConfig {
    pub d_sem: usize,
    pub d_ctx: usize,
    pub sentence_query: SentenceQuery,
}

/// Query of the inter-sentence attention that produces C_g.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceQuery {
    /// One learnable vector, the same for every window.
    Learned,
    /// Learnable vector plus a linear map of the current sentence's C_s row.
    #[default]
    Current,
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub input: Linear,
    pub subword_rnn: BiGru,
    pub subword_pool: AttentionPool,
    pub sentence_rnn: BiGru,
    pub sentence_pool: AttentionPool,
    pub current_query: Option<Linear>,
    pub cfg: ContextEncoderConfig,
}

/// Graph nodes of one encoded window.
#[derive(Debug, Clone)]
pub struct ContextVars {
    pub c_w: Vec<Var>,
    pub subword_weights: Vec<Var>,
    pub sentence_vectors: Var,
    pub c_s: Var,
    pub c_g: Var,
    pub inter_sentence_weights: Var,
    pub current: usize,
}

impl ContextVars {
    pub fn current_c_w(&self) -> Var {
        self.c_w[self.current]
    }

    pub fn current_c_s(&self, g: &mut Graph) -> Var {
        g.row(self.c_s, self.current)
    }

    pub fn to_embeddings(&self, g: &Graph) -> ContextEmbeddings {
        ContextEmbeddings {
            c_w: self.c_w.iter().map(|&v| g.value(v).clone()).collect(),
            sentence_vectors: g.value(self.sentence_vectors).clone(),
            c_s: g.value(self.c_s).clone(),
            c_g: g.value(self.c_g).data().to_vec(),
            inter_sentence_weights: g.value(self.inter_sentence_weights).data().to_vec(),
            current: self.current,
        }
    }
}

/// Plain-array view of [`ContextVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbeddings {
    pub c_w: Vec<Tensor>,
    pub sentence_vectors: Tensor,
    pub c_s: Tensor,
    pub c_g: Vec<f64>,
    pub inter_sentence_weights: Vec<f64>,
    pub current: usize,
}

impl ContextEncoder {
    pub const PREFIX: &'static str = "context";

    pub fn new(store: &mut ParamStore, cfg: ContextEncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.d_ctx.is_multiple_of(2), "d_ctx must be even");
        let p = Self::PREFIX;
        let h = cfg.d_ctx / 2;
        let input = Linear::new(
            store,
            &format!("{p}.input"),
            cfg.d_sem,
            cfg.d_ctx,
            Activation::None,
            rng,
        );
        let subword_rnn = BiGru::new(store, &format!("{p}.subword_rnn"), cfg.d_ctx, h, rng);
        let subword_pool = AttentionPool::new(store, &format!("{p}.subword_pool"), cfg.d_ctx, rng);
        let sentence_rnn = BiGru::new(store, &format!("{p}.sentence_rnn"), cfg.d_ctx, h, rng);
        let sentence_pool = AttentionPool::new(store, &format!("{p}.sentence_pool"), cfg.d_ctx, rng);
        let current_query = (cfg.sentence_query == SentenceQuery::Current).then(|| {
            Linear::new(
                store,
                &format!("{p}.sentence_query"),
                cfg.d_ctx,
                cfg.d_ctx,
                Activation::None,
                rng,
            )
        });
        Self {
            input,
            subword_rnn,
            subword_pool,
            sentence_rnn,
            sentence_pool,
            current_query,
            cfg,
        }
    }

    /// `[n, d_sem]` → (C_w `[n, d_ctx]`, sentence vector `[1, d_ctx]`, weights `[1, n]`).
    pub fn encode_subwords(&self, g: &mut Graph, sem: Var) -> Result<(Var, Var, Var)> {
        if g.value(sem).rows() == 0 {
            return Err(Error::Empty("sentence without subwords".into()));
        }
        let sem = g.dropout(sem);
        let x = self.input.forward(g, sem);
        let c_w = self.subword_rnn.forward(g, x)?;
        let (vec, w) = self.subword_pool.forward(g, c_w)?;
        Ok((c_w, vec, w))
    }

    /// `[m, d_ctx]` → (C_s `[m, d_ctx]`, C_g `[1, d_ctx]`, weights `[1, m]`).
    /// `current` indexes the sentence being predicted.
    pub fn encode_sentences(&self, g: &mut Graph, vectors: Var, current: usize) -> Result<(Var, Var, Var)> {
        let m = g.value(vectors).rows();
        if m == 0 {
            return Err(Error::Empty("window without sentences".into()));
        }
        if current >= m {
            return Err(Error::Shape(format!(
                "current sentence {current} outside a window of {m}"
            )));
        }
        let c_s = self.sentence_rnn.forward(g, vectors)?;
        let (c_g, w) = match &self.current_query {
            None => self.sentence_pool.forward(g, c_s)?,
            Some(proj) => {
                let row = g.row(c_s, current);
                let shift = proj.forward(g, row);
                self.sentence_pool.forward_shifted(g, c_s, shift)?
            }
        };
        Ok((c_s, c_g, w))
    }

    pub fn encode_context(
        &self,
        g: &mut Graph,
        sem: Var,
        offsets: &[(usize, usize)],
        current: usize,
    ) -> Result<ContextVars> {
        let total = g.value(sem).rows();
        let mut expect = 0;
        for &(start, len) in offsets {
            if start != expect || len == 0 {
                return Err(Error::Shape(format!(
                    "sentence offsets {offsets:?} do not partition {total} subwords"
                )));
            }
            expect += len;
        }
        if expect != total || current >= offsets.len() {
            return Err(Error::Shape(format!(
                "offsets {offsets:?} / current {current} inconsistent with {total} subwords"
            )));
        }
        let mut c_w = Vec::with_capacity(offsets.len());
        let mut weights = Vec::with_capacity(offsets.len());
        let mut vectors = Vec::with_capacity(offsets.len());
        for &(start, len) in offsets {
            let block = g.slice_rows(sem, start, start + len);
            let (cw, v, w) = self.encode_subwords(g, block)?;
            c_w.push(cw);
            vectors.push(v);
            weights.push(w);
        }
        let sentence_vectors = g.concat_rows(&vectors);
        let (c_s, c_g, inter) = self.encode_sentences(g, sentence_vectors, current)?;
        Ok(ContextVars {
            c_w,
            subword_weights: weights,
            sentence_vectors,
            c_s,
            c_g,
            inter_sentence_weights: inter,
            current,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::gaussian;
    use rand::SeedableRng;

    fn setup(d_sem: usize, d_ctx: usize) -> (ParamStore, ContextEncoder, ChaCha8Rng) {
        setup_with(d_sem, d_ctx, SentenceQuery::Learned)
    }

    fn setup_with(
        d_sem: usize,
        d_ctx: usize,
        sentence_query: SentenceQuery,
    ) -> (ParamStore, ContextEncoder, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ContextEncoderConfig {
            d_sem,
            d_ctx,
            sentence_query,
        };
        let enc = ContextEncoder::new(&mut store, cfg, &mut rng);
        (store, enc, rng)
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| gaussian(rng)).collect()).unwrap()
    }

    #[test]
    fn single_subword_pools_to_itself() {
        let (store, enc, mut rng) = setup(5, 8);
        let mut g = Graph::new(&store);
        let x = g.constant(random(1, 5, &mut rng));
        let (cw, v, w) = enc.encode_subwords(&mut g, x).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(v), g.value(cw));
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let (mut store, enc, mut rng) = setup(4, 6);
        // with every recurrent parameter zero the state never leaves 0
        for gru in [&enc.subword_rnn.fwd, &enc.subword_rnn.bwd] {
            for id in [gru.w_ih, gru.w_hh, gru.b_ih, gru.b_hh] {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).value = Tensor::zeros(&shape);
            }
        }
        let mut g = Graph::new(&store);
        let row = random(1, 4, &mut rng);
        let x = g.constant(Tensor::concat_rows(&[&row, &row, &row]).unwrap());
        let (_, _, w) = enc.encode_subwords(&mut g, x).unwrap();
        for &v in g.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes() {
        let (store, enc, mut rng) = setup(6, 16);
        let mut g = Graph::new(&store);
        let x = g.constant(random(7, 6, &mut rng));
        let (cw, v, _) = enc.encode_subwords(&mut g, x).unwrap();
        assert_eq!((g.shape(cw), g.shape(v)), (&[7usize, 16][..], &[1usize, 16][..]));
        let s = g.constant(random(5, 16, &mut rng));
        let (cs, _, w) = enc.encode_sentences(&mut g, s, 0).unwrap();
        assert_eq!((g.shape(cs), g.shape(w)), (&[5usize, 16][..], &[1usize, 5][..]));
        let one = g.constant(random(1, 16, &mut rng));
        let (cs, cg, w) = enc.encode_sentences(&mut g, one, 0).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(cg), g.value(cs));
    }

    #[test]
    fn sentence_order_matters() {
        let (store, enc, mut rng) = setup(4, 8);
        let s = random(4, 8, &mut rng);
        let rev: Vec<Vec<f64>> = (0..4).rev().map(|r| s.row_slice(r).to_vec()).collect();
        let mut g = Graph::new(&store);
        let a = g.constant(s);
        let b = g.constant(Tensor::from_rows(&rev).unwrap());
        let (ca, _, _) = enc.encode_sentences(&mut g, a, 0).unwrap();
        let (cb, _, _) = enc.encode_sentences(&mut g, b, 0).unwrap();
        // compare row i of the forward run with row 3-i of the reversed run
        let diff: f64 = (0..4)
            .map(|i| {
                let x = g.value(ca).row_slice(i);
                let y = g.value(cb).row_slice(3 - i);
                x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>()
            })
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn window_encoding_and_context_sensitivity() {
        let (store, enc, mut rng) = setup(4, 8);
        let sem = random(10, 4, &mut rng);
        let offsets = [(0, 2), (2, 3), (5, 1), (6, 2), (8, 2)];
        let mut g = Graph::new(&store);
        let x = g.constant(sem.clone());
        let cv = enc.encode_context(&mut g, x, &offsets, 2).unwrap();
        let e = cv.to_embeddings(&g);
        assert_eq!(e.c_w.len(), 5);
        assert_eq!(e.c_w.iter().map(Tensor::rows).sum::<usize>(), 10);
        assert_eq!(e.c_s.shape(), &[5, 8]);
        assert!((e.inter_sentence_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut perturbed = sem.clone();
        perturbed.data_mut()[0] += 0.5; // first (non-current) sentence
        let mut g2 = Graph::new(&store);
        let x2 = g2.constant(perturbed);
        let e2 = enc.encode_context(&mut g2, x2, &offsets, 2).unwrap().to_embeddings(&g2);
        assert_ne!(e.c_g, e2.c_g);
        assert!(e.c_s.max_abs_diff(&e2.c_s) > 0.0);

        let mut g3 = Graph::new(&store);
        let x3 = g3.constant(sem);
        let e3 = enc.encode_context(&mut g3, x3, &offsets, 2).unwrap().to_embeddings(&g3);
        assert_eq!(e, e3);

        let mut g4 = Graph::new(&store);
        let x4 = g4.constant(random(10, 4, &mut rng));
        assert!(enc.encode_context(&mut g4, x4, &[(0, 4), (5, 5)], 0).is_err());
    }

    #[test]
    fn single_sentence_window_global_equals_sentence() {
        let (store, enc, mut rng) = setup(3, 4);
        let mut g = Graph::new(&store);
        let x = g.constant(random(3, 3, &mut rng));
        let cv = enc.encode_context(&mut g, x, &[(0, 3)], 0).unwrap();
        assert_eq!(g.value(cv.c_g), g.value(cv.c_s));
    }

    #[test]
    fn gradient_check_on_global_context() {
        let (mut store, enc, mut rng) = setup(3, 4);
        let sem = random(5, 3, &mut rng);
        let report = grad_check(
            &mut store,
            |g| {
                let x = g.constant(sem.clone());
                let cv = enc.encode_context(g, x, &[(0, 2), (2, 3)], 1)?;
                let sq = g.square(cv.c_g);
                Ok(g.sum_all(sq))
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn current_query_depends_on_which_sentence_is_current() {
        let (store, enc, mut rng) = setup_with(4, 8, SentenceQuery::Current);
        assert!(store.iter().any(|(_, p)| p.name.starts_with("context.sentence_query")));
        let s = random(5, 8, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(s);
        let (_, ga, wa) = enc.encode_sentences(&mut g, x, 1).unwrap();
        let (_, gb, wb) = enc.encode_sentences(&mut g, x, 3).unwrap();
        for w in [wa, wb] {
            assert!((g.value(w).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(g.value(ga).max_abs_diff(g.value(gb)) > 1e-9);
        assert!(enc.encode_sentences(&mut g, x, 5).is_err());
    }

    #[test]
    fn learned_query_ignores_the_current_index() {
        let (store, enc, mut rng) = setup(4, 8);
        let mut g = Graph::new(&store);
        let x = g.constant(random(5, 8, &mut rng));
        let (_, ga, _) = enc.encode_sentences(&mut g, x, 1).unwrap();
        let (_, gb, _) = enc.encode_sentences(&mut g, x, 3).unwrap();
        assert_eq!(g.value(ga), g.value(gb));
    }

    #[test]
    fn gradient_check_with_current_query() {
        let (mut store, enc, mut rng) = setup_with(3, 4, SentenceQuery::Current);
        let sem = random(6, 3, &mut rng);
        let report = grad_check(
            &mut store,
            |g| {
                let x = g.constant(sem.clone());
                let cv = enc.encode_context(g, x, &[(0, 2), (2, 3), (5, 1)], 1)?;
                let sq = g.square(cv.c_g);
                Ok(g.sum_all(sq))
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
