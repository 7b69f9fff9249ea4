//! Multi-scale style extractor: three reference encoders over the window,
//! sentence and subword mel ranges, residual embeddings between levels, and
//! one style-token layer per level.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{subword_spans, ContextWindow};
use crate::error::{Error, Result};
use crate::nn::{ConvStack, ConvStackConfig, Gru, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Global,
    Sentence,
    Subword,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Global, Level::Sentence, Level::Subword];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Global => "global",
            Level::Sentence => "sentence",
            Level::Subword => "subword",
        }
    }

    /// Parameter-name prefix of this level's extractor modules.
    pub fn prefix(self) -> String {
        format!("{}.{}.", StyleExtractor::PREFIX, self.name())
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Reference and style width; equals the acoustic hidden width.
    pub d_style: usize,
    pub conv: ConvStackConfig,
    pub tokens: usize,
    pub heads: usize,
    /// Test hook: the sentence level reuses the global reference encoder.
    pub share_reference_encoders: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            d_style: 128,
            conv: ConvStackConfig::default(),
            tokens: 10,
            heads: 4,
            share_reference_encoders: false,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_style == 0 || self.tokens == 0 || self.heads == 0 {
            return Err(Error::config(
                "model.extractor",
                "d_style, tokens and heads must be positive",
            ));
        }
        if !self.d_style.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.extractor.heads",
                format!("{} heads do not divide d_style {}", self.heads, self.d_style),
            ));
        }
        if self.conv.channels.is_empty() || self.conv.kernel == 0 || self.conv.stride == 0 {
            return Err(Error::config(
                "model.extractor.conv",
                "need at least one layer, kernel and stride positive",
            ));
        }
        Ok(())
    }
}

/// Conv stack followed by a GRU whose final state is the embedding.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    pub conv: ConvStack,
    pub gru: Gru,
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ExtractorConfig, bins: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = ConvStack::new(store, &format!("{name}.conv"), &cfg.conv, bins, rng);
        let gru = Gru::new(store, &format!("{name}.gru"), conv.out_width(), cfg.d_style, rng);
        Self { conv, gru }
    }

    /// `[frames, bins]` (possibly zero frames) → `[1, d_style]`.
    pub fn forward(&self, g: &mut Graph, mel: Var) -> Result<Var> {
        let feats = self.conv.forward(g, mel)?;
        self.gru.last_state(g, feats)
    }
}

/// Learnable tokens attended by a residual query.
#[derive(Debug, Clone)]
pub struct StyleTokenLayer {
    pub tokens: crate::params::ParamId,
    pub attention: MultiHeadAttention,
    pub k: usize,
}

impl StyleTokenLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ExtractorConfig, rng: &mut ChaCha8Rng) -> Self {
        let d_token = cfg.d_style / cfg.heads;
        let data = (0..cfg.tokens * d_token)
            .map(|_| 0.5 * crate::params::gaussian(rng))
            .collect();
        let tokens = store.add(
            format!("{name}.tokens"),
            Tensor::matrix(cfg.tokens, d_token, data).unwrap(),
        );
        let attention = MultiHeadAttention::new(
            store,
            &format!("{name}.attn"),
            cfg.d_style,
            d_token,
            cfg.d_style,
            cfg.heads,
            rng,
        );
        Self {
            tokens,
            attention,
            k: cfg.tokens,
        }
    }

    /// `[n, d_style]` residuals → (`[n, d_style]` styles, per-head `[n, K]` weights).
    pub fn forward(&self, g: &mut Graph, residual: Var) -> (Var, Vec<Var>) {
        let t = g.param(self.tokens);
        let keys = g.tanh(t);
        self.attention.forward(g, residual, keys)
    }
}

#[derive(Debug, Clone)]
pub struct StyleExtractor {
    pub encoders: [ReferenceEncoder; 3],
    pub token_layers: [StyleTokenLayer; 3],
    pub cfg: ExtractorConfig,
}

/// Graph nodes of one extraction.
#[derive(Debug, Clone)]
pub struct StyleVars {
    pub e_g: Var,
    pub e_s: Var,
    pub e_w: Var,
    pub r_g: Var,
    pub r_s: Var,
    pub r_w: Var,
    pub s_g: Var,
    pub s_s: Var,
    pub s_w: Var,
    pub token_weights: [Vec<Var>; 3],
}

impl StyleVars {
    pub fn styles(&self, g: &Graph) -> StyleEmbeddings {
        StyleEmbeddings {
            s_g: g.value(self.s_g).data().to_vec(),
            s_s: g.value(self.s_s).data().to_vec(),
            s_w: g.value(self.s_w).clone(),
        }
    }

    pub fn references(&self, g: &Graph) -> ReferenceEmbeddings {
        ReferenceEmbeddings {
            e_g: g.value(self.e_g).data().to_vec(),
            e_s: g.value(self.e_s).data().to_vec(),
            e_w: g.value(self.e_w).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbeddings {
    pub e_g: Vec<f64>,
    pub e_s: Vec<f64>,
    pub e_w: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEmbeddings {
    pub r_g: Vec<f64>,
    pub r_s: Vec<f64>,
    pub r_w: Tensor,
}

/// Style triple at global, sentence and subword level.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbeddings {
    pub s_g: Vec<f64>,
    pub s_s: Vec<f64>,
    /// `[n_subwords, d_style]`.
    pub s_w: Tensor,
}

impl StyleEmbeddings {
    pub fn zeros(d: usize, n_subwords: usize) -> Self {
        Self {
            s_g: vec![0.0; d],
            s_s: vec![0.0; d],
            s_w: Tensor::zeros(&[n_subwords, d]),
        }
    }

    pub fn d_style(&self) -> usize {
        self.s_g.len()
    }
}

/// R_g = E_g, R_s = E_s − E_g, R_w[i] = E_w[i] − E_s.
pub fn compute_residuals(e: &ReferenceEmbeddings) -> Result<ResidualEmbeddings> {
    let d = e.e_g.len();
    if e.e_s.len() != d || (e.e_w.rows() > 0 && e.e_w.cols() != d) {
        return Err(Error::Shape(format!(
            "reference widths {} / {} / {:?}",
            d,
            e.e_s.len(),
            e.e_w.shape()
        )));
    }
    let r_s = e.e_s.iter().zip(&e.e_g).map(|(s, g)| s - g).collect();
    let mut r_w = e.e_w.clone();
    for row in r_w.data_mut().chunks_mut(d.max(1)) {
        for (v, s) in row.iter_mut().zip(&e.e_s) {
            *v -= s;
        }
    }
    Ok(ResidualEmbeddings {
        r_g: e.e_g.clone(),
        r_s,
        r_w,
    })
}

impl StyleExtractor {
    pub const PREFIX: &'static str = "extractor";

    pub fn new(store: &mut ParamStore, cfg: &ExtractorConfig, bins: usize, rng: &mut ChaCha8Rng) -> Self {
        let name = |l: Level| format!("{}.{}", Self::PREFIX, l.name());
        let global = ReferenceEncoder::new(store, &format!("{}.ref", name(Level::Global)), cfg, bins, rng);
        let sentence = if cfg.share_reference_encoders {
            global.clone()
        } else {
            ReferenceEncoder::new(store, &format!("{}.ref", name(Level::Sentence)), cfg, bins, rng)
        };
        let subword = ReferenceEncoder::new(store, &format!("{}.ref", name(Level::Subword)), cfg, bins, rng);
        let token_layers = Level::ALL.map(|l| StyleTokenLayer::new(store, &format!("{}.tokens", name(l)), cfg, rng));
        Self {
            encoders: [global, sentence, subword],
            token_layers,
            cfg: cfg.clone(),
        }
    }

    pub fn d_style(&self) -> usize {
        self.cfg.d_style
    }

    /// E_g over the time-concatenated window, E_s over the current sentence,
    /// E_w over each subword slice of the current sentence.
    pub fn extract_reference(&self, g: &mut Graph, window: &ContextWindow) -> Result<(Var, Var, Var)> {
        let cur = window.current();
        let mels: Vec<&Tensor> = window.sentences.iter().map(|u| &u.mel).collect();
        let all = Tensor::concat_rows(&mels)?;
        if all.rows() == 0 {
            return Err(Error::Empty("window has no mel frames".into()));
        }
        let all = g.constant(all);
        let e_g = self.encoders[0].forward(g, all)?;
        let mel = g.constant(cur.mel.clone());
        let e_s = self.encoders[1].forward(g, mel)?;
        let spans = subword_spans(&cur.durations, &cur.subword_phoneme_counts)?;
        let mut rows = Vec::with_capacity(spans.len());
        for s in spans {
            let slice = g.slice_rows(mel, s.start, s.end);
            rows.push(self.encoders[2].forward(g, slice)?);
        }
        let e_w = g.concat_rows(&rows);
        Ok((e_g, e_s, e_w))
    }

    pub fn extract_multiscale(&self, g: &mut Graph, window: &ContextWindow) -> Result<StyleVars> {
        let (e_g, e_s, e_w) = self.extract_reference(g, window)?;
        let n = g.value(e_w).rows();
        let r_g = e_g;
        let r_s = g.sub(e_s, e_g);
        let e_s_rep = g.gather_rows(e_s, &vec![0; n]);
        let r_w = g.sub(e_w, e_s_rep);
        let (s_g, wg) = self.token_layers[0].forward(g, r_g);
        let (s_s, ws) = self.token_layers[1].forward(g, r_s);
        let (s_w, ww) = self.token_layers[2].forward(g, r_w);
        Ok(StyleVars {
            e_g,
            e_s,
            e_w,
            r_g,
            r_s,
            r_w,
            s_g,
            s_s,
            s_w,
            token_weights: [wg, ws, ww],
        })
    }

    /// Convenience: inference-mode extraction to plain arrays.
    pub fn extract(&self, store: &ParamStore, window: &ContextWindow) -> Result<StyleEmbeddings> {
        let mut g = Graph::new(store);
        let v = self.extract_multiscale(&mut g, window)?;
        Ok(v.styles(&g))
    }
}
