//! The full system in one parameter store: semantic provider, context
//! encoder, style predictor, style extractor and acoustic model.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticConfig, AcousticModel};
use crate::autograd::Graph;
use crate::context::{ContextEncoder, ContextEncoderConfig, ContextVars, SentenceQuery};
use crate::corpus::{ContextWindow, Corpus};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, StyleEmbeddings, StyleExtractor, StyleVars};
use crate::nn::ConvStackConfig;
use crate::params::ParamStore;
use crate::predictor::{PredictorConfig, StyleNodes, StylePredictor};
use crate::semantic::{embed_context_var, HashEmbedder, PrecomputedStore, Provider, TrainableEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Hash { seed: u64, position_mixing: bool },
    Trainable,
    Precomputed { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    #[default]
    Hierarchical,
    Ar,
}

impl std::fmt::Display for PredictorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictorMode::Hierarchical => "hierarchical",
            PredictorMode::Ar => "ar",
        })
    }
}

/// User-facing model dimensions (the `[model]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_style: usize,
    pub d_sem: usize,
    pub d_ctx: usize,
    /// Sentences on each side of the current one.
    pub context_radius: usize,
    /// Window radius seen by the predictor when it differs from the
    /// extractor's (context ablations).
    pub predictor_radius: Option<usize>,
    pub provider: ProviderConfig,
    pub separator_token: bool,
    pub sentence_query: SentenceQuery,
    pub mode: PredictorMode,
    pub style_tokens: usize,
    pub style_heads: usize,
    pub conv_channels: Vec<usize>,
    pub acoustic_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub variance_bins: usize,
    pub pitch_range_hz: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_style: 16,
            d_sem: 16,
            d_ctx: 16,
            context_radius: 2,
            predictor_radius: None,
            provider: ProviderConfig::Hash {
                seed: 0,
                position_mixing: false,
            },
            separator_token: false,
            sentence_query: SentenceQuery::Current,
            mode: PredictorMode::Hierarchical,
            style_tokens: 6,
            style_heads: 2,
            conv_channels: vec![8, 8, 16, 16],
            acoustic_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            d_ff: 32,
            variance_bins: 64,
            pitch_range_hz: [0.0, 600.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_style", self.d_style),
            ("d_sem", self.d_sem),
            ("d_ctx", self.d_ctx),
            ("style_tokens", self.style_tokens),
            ("style_heads", self.style_heads),
            ("acoustic_heads", self.acoustic_heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if !self.d_ctx.is_multiple_of(2) {
            return Err(Error::config("model.d_ctx", "must be even (bidirectional halves)"));
        }
        if !self.d_style.is_multiple_of(self.acoustic_heads) {
            return Err(Error::config("model.acoustic_heads", "must divide d_style"));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::config("model.conv_channels", "need at least one layer"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild the parameter layout: user dimensions plus
/// the corpus-derived parts (inventory, vocabulary, normalization stats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub extractor: ExtractorConfig,
    pub acoustic: AcousticConfig,
    pub vocabulary: Vec<String>,
    pub init_seed: u64,
}

impl ModelSpec {
    /// Derives corpus-dependent fields from the training corpus.
    pub fn from_corpus(model: &ModelConfig, corpus: &Corpus, init_seed: u64) -> Result<Self> {
        model.validate()?;
        let mel_bins = corpus.feature_config.mel_bins;
        let extractor = ExtractorConfig {
            d_style: model.d_style,
            conv: ConvStackConfig {
                channels: model.conv_channels.clone(),
                ..ConvStackConfig::default()
            },
            tokens: model.style_tokens,
            heads: model.style_heads,
            share_reference_encoders: false,
        };
        extractor.validate()?;
        let (mut pitch, mut energy) = (Vec::new(), Vec::new());
        for u in corpus.utterances() {
            pitch.extend(u.phone_pitch());
            energy.extend(u.phone_energy());
        }
        if pitch.is_empty() {
            return Err(Error::Empty("corpus has no phonemes".into()));
        }
        let (elo, ehi) = corpus.phone_energy_range();
        let acoustic = AcousticConfig {
            d_model: model.d_style,
            heads: model.acoustic_heads,
            encoder_layers: model.encoder_layers,
            decoder_layers: model.decoder_layers,
            d_ff: model.d_ff,
            mel_bins,
            variance_bins: model.variance_bins,
            pitch_range_hz: model.pitch_range_hz,
            energy_range: if ehi > elo { [elo, ehi] } else { [elo, elo + 1.0] },
            inventory: corpus.phoneme_inventory(),
            pitch_stats: mean_std(&pitch),
            energy_stats: mean_std(&energy),
        };
        acoustic.validate()?;
        Ok(Self {
            model: model.clone(),
            extractor,
            acoustic,
            vocabulary: corpus.subword_vocabulary(),
            init_seed,
        })
    }
}

fn mean_std(v: &[f64]) -> [f64; 2] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    [mean, var.sqrt().max(1e-6)]
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub provider: Provider,
    pub context: ContextEncoder,
    pub predictor: StylePredictor,
    pub extractor: StyleExtractor,
    pub acoustic: AcousticModel,
}

impl Model {
    /// Builds with fresh parameters drawn from `spec.init_seed`. Parameter
    /// names and order depend only on the `ModelSpec`, so checkpoints load by name.
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let m = &spec.model;
        let provider = match &m.provider {
            ProviderConfig::Hash { seed, position_mixing } => Provider::Hash(HashEmbedder {
                seed: *seed,
                d_sem: m.d_sem,
                position_mixing: *position_mixing,
            }),
            ProviderConfig::Trainable => {
                Provider::Trainable(TrainableEmbedder::new(&mut store, &spec.vocabulary, m.d_sem, &mut rng))
            }
            ProviderConfig::Precomputed { dir } => {
                let p = PrecomputedStore::load(dir)?;
                if p.d_sem != m.d_sem {
                    return Err(Error::config(
                        "model.d_sem",
                        format!("precomputed store has width {}", p.d_sem),
                    ));
                }
                Provider::Precomputed(p)
            }
        };
        let context = ContextEncoder::new(
            &mut store,
            ContextEncoderConfig {
                d_sem: m.d_sem,
                d_ctx: m.d_ctx,
                sentence_query: m.sentence_query,
            },
            &mut rng,
        );
        let predictor = StylePredictor::new(
            &mut store,
            PredictorConfig {
                d_ctx: m.d_ctx,
                d_style: m.d_style,
            },
            &mut rng,
        );
        let extractor = StyleExtractor::new(&mut store, &spec.extractor, spec.acoustic.mel_bins, &mut rng);
        let acoustic = AcousticModel::new(&mut store, &spec.acoustic, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            store,
            provider,
            context,
            predictor,
            extractor,
            acoustic,
        })
    }

    pub fn mode(&self) -> PredictorMode {
        self.spec.model.mode
    }

    pub fn radius(&self) -> usize {
        self.spec.model.context_radius
    }

    pub fn predictor_radius(&self) -> usize {
        self.spec
            .model
            .predictor_radius
            .unwrap_or(self.spec.model.context_radius)
    }

    /// Same parameters, predictor window radius replaced.
    pub fn with_predictor_radius(mut self, radius: usize) -> Self {
        self.spec.model.predictor_radius = Some(radius);
        self
    }

    /// Semantic embedding + hierarchical context encoding of one window.
    pub fn encode_window(&self, g: &mut Graph, window: &ContextWindow) -> Result<ContextVars> {
        let (sem, offsets) = embed_context_var(g, window, &self.provider, self.spec.model.separator_token)?;
        self.context.encode_context(g, sem, &offsets, window.current_offset)
    }

    pub fn predict(&self, g: &mut Graph, window: &ContextWindow) -> Result<StyleNodes> {
        let ctx = self.encode_window(g, window)?;
        self.predictor.predict_hierarchical(g, &ctx)
    }

    pub fn extract(&self, g: &mut Graph, window: &ContextWindow) -> Result<StyleVars> {
        self.extractor.extract_multiscale(g, window)
    }

    pub fn extract_styles(&self, corpus: &Corpus, document_id: &str, sentence_index: usize) -> Result<StyleEmbeddings> {
        let w = corpus.build_context_window(document_id, sentence_index, self.radius())?;
        self.extractor.extract(&self.store, &w)
    }

    pub fn predict_styles(&self, corpus: &Corpus, document_id: &str, sentence_index: usize) -> Result<StyleEmbeddings> {
        let w = corpus.build_context_window(document_id, sentence_index, self.predictor_radius())?;
        let mut g = Graph::new(&self.store);
        let s = self.predict(&mut g, &w)?;
        Ok(s.values(&g))
    }

    /// Autoregressive predictions for every sentence of a document.
    pub fn predict_document_ar(&self, corpus: &Corpus, document_id: &str) -> Result<Vec<StyleEmbeddings>> {
        let doc = corpus.document(document_id)?;
        let mut g = Graph::new(&self.store);
        let mut ctx = Vec::with_capacity(doc.utterances.len());
        for pos in 0..doc.utterances.len() {
            let w = ContextWindow::around(&doc.utterances, pos, self.predictor_radius());
            ctx.push(self.encode_window(&mut g, &w)?);
        }
        let out = self
            .predictor
            .predict_paragraph_ar(&mut g, &ctx, crate::predictor::PreviousStyles::Predicted)?;
        Ok(out.iter().map(|n| n.values(&g)).collect())
    }

    /// Inter-sentence attention weights of the window around one sentence.
    pub fn inter_sentence_attention(&self, window: &ContextWindow) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let ctx = self.encode_window(&mut g, window)?;
        Ok(g.value(ctx.inter_sentence_weights).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    pub(crate) fn tiny_corpus(dir: &std::path::Path) -> Corpus {
        let cfg = SynthConfig {
            documents: 2,
            sentences_per_document: 3,
            ..SynthConfig::default()
        };
        let m = generate_synthetic_corpus(&cfg, 1, dir).unwrap();
        load_manifest(m).unwrap()
    }

    #[test]
    fn rebuild_gives_same_layout_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus(dir.path());
        let spec = ModelSpec::from_corpus(&ModelConfig::default(), &c, 3).unwrap();
        let a = Model::new(&spec).unwrap();
        let b = Model::new(&spec).unwrap();
        assert_eq!(a.store.snapshot(), b.store.snapshot());
        assert!(a.store.len() > 50);
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn predicted_and_extracted_shapes_agree() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus(dir.path());
        let spec = ModelSpec::from_corpus(&ModelConfig::default(), &c, 3).unwrap();
        let m = Model::new(&spec).unwrap();
        let u = c.utterances().nth(1).unwrap();
        let e = m.extract_styles(&c, &u.document_id, u.sentence_index).unwrap();
        let p = m.predict_styles(&c, &u.document_id, u.sentence_index).unwrap();
        assert_eq!(e.s_w.shape(), p.s_w.shape());
        assert_eq!(e.s_g.len(), p.s_g.len());
        let ar = m.predict_document_ar(&c, &u.document_id).unwrap();
        assert_eq!(ar.len(), 3);
    }

    #[test]
    fn odd_context_width_is_rejected() {
        let cfg = ModelConfig {
            d_ctx: 7,
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.d_ctx"), "{err}");
    }
}
