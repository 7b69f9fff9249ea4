//! Inference: style selection, sentence and paragraph synthesis, style export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustic::Mode;
use crate::autograd::Graph;
use crate::corpus::{AlignedUtterance, Corpus};
use crate::error::{Error, Result};
use crate::extractor::StyleEmbeddings;
use crate::model::{Model, PredictorMode};
use crate::predictor::StyleNodes;
use crate::tensor::{write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    /// Extractor over the ground-truth mel window (upper bound).
    Extracted,
    /// Predictor over the text window.
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub mel: Tensor,
    /// Phone-level predictions, pitch in Hz.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub log_duration: Vec<f64>,
    /// Frames per phoneme used by the length regulator.
    pub durations: Vec<usize>,
    pub styles: StyleEmbeddings,
}

impl Synthesis {
    /// Phone-level values repeated over their frames.
    pub fn frame_pitch(&self) -> Vec<f64> {
        expand(&self.pitch, &self.durations)
    }

    pub fn frame_energy(&self) -> Vec<f64> {
        expand(&self.energy, &self.durations)
    }
}

pub fn expand(values: &[f64], durations: &[usize]) -> Vec<f64> {
    values
        .iter()
        .zip(durations)
        .flat_map(|(&v, &d)| std::iter::repeat_n(v, d))
        .collect()
}

/// Free-running synthesis of one utterance's phonemes under given styles.
pub fn synthesize_with_styles(model: &Model, u: &AlignedUtterance, styles: &StyleEmbeddings) -> Result<Synthesis> {
    if styles.s_w.rows() != u.n_subwords() {
        return Err(Error::Shape(format!(
            "{} subword styles for {} subwords",
            styles.s_w.rows(),
            u.n_subwords()
        )));
    }
    let ids = model.spec.acoustic.phoneme_ids(&u.phonemes)?;
    let mut g = Graph::new(&model.store);
    let nodes = StyleNodes::constant(&mut g, styles);
    let v = model
        .acoustic
        .synthesize(&mut g, &ids, &u.subword_of(), Some(&nodes), Mode::FreeRunning)?;
    let (mel, var) = model.acoustic.predictions(&g, &v);
    Ok(Synthesis {
        mel: mel.mel,
        pitch: var.pitch,
        energy: var.energy,
        log_duration: var.log_duration,
        durations: mel.durations_rounded,
        styles: styles.clone(),
    })
}

/// Styles of one sentence. AR checkpoints predict the whole document and
/// pick the sentence, so its prediction sees the same history as in
/// paragraph synthesis.
pub fn styles_for(
    model: &Model,
    corpus: &Corpus,
    document_id: &str,
    sentence_index: usize,
    source: StyleSource,
) -> Result<StyleEmbeddings> {
    match (source, model.mode()) {
        (StyleSource::Extracted, _) => model.extract_styles(corpus, document_id, sentence_index),
        (StyleSource::Predicted, PredictorMode::Hierarchical) => {
            model.predict_styles(corpus, document_id, sentence_index)
        }
        (StyleSource::Predicted, PredictorMode::Ar) => {
            let (_, pos) = corpus.position(document_id, sentence_index)?;
            let mut all = model.predict_document_ar(corpus, document_id)?;
            Ok(all.swap_remove(pos))
        }
    }
}

pub fn synthesize_sentence(
    model: &Model,
    corpus: &Corpus,
    document_id: &str,
    sentence_index: usize,
    source: StyleSource,
) -> Result<Synthesis> {
    let u = corpus.utterance(document_id, sentence_index)?;
    let styles = styles_for(model, corpus, document_id, sentence_index, source)?;
    synthesize_with_styles(model, u, &styles)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paragraph {
    pub sentences: Vec<Synthesis>,
    /// Per-sentence mels concatenated in sentence order.
    pub mel: Tensor,
    /// True when an AR checkpoint produced the styles.
    pub autoregressive: bool,
}

/// Synthesizes every sentence of a document. AR checkpoints predict styles
/// sentence by sentence; hierarchical ones use the per-window predictor.
pub fn synthesize_paragraph(model: &Model, corpus: &Corpus, document_id: &str) -> Result<Paragraph> {
    let doc = corpus.document(document_id)?;
    let autoregressive = model.mode() == PredictorMode::Ar;
    let styles: Vec<StyleEmbeddings> = if autoregressive {
        model.predict_document_ar(corpus, document_id)?
    } else {
        doc.utterances
            .iter()
            .map(|u| model.predict_styles(corpus, document_id, u.sentence_index))
            .collect::<Result<_>>()?
    };
    let sentences = doc
        .utterances
        .iter()
        .zip(&styles)
        .map(|(u, s)| synthesize_with_styles(model, u, s))
        .collect::<Result<Vec<_>>>()?;
    let mels: Vec<&Tensor> = sentences.iter().map(|s| &s.mel).collect();
    let mel = Tensor::concat_rows(&mels)?;
    Ok(Paragraph {
        sentences,
        mel,
        autoregressive,
    })
}

/// Writes `s_g`, `s_s`, `s_w` TensorFiles for one utterance under
/// `dir/<document>/<index>.{global,sentence,subword}.msst`.
pub fn write_styles(dir: &Path, document_id: &str, sentence_index: usize, s: &StyleEmbeddings) -> Result<()> {
    let d = dir.join(document_id);
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    let stem = format!("{sentence_index:03}");
    write_tensor(d.join(format!("{stem}.global.msst")), &Tensor::vector(s.s_g.clone()))?;
    write_tensor(d.join(format!("{stem}.sentence.msst")), &Tensor::vector(s.s_s.clone()))?;
    write_tensor(d.join(format!("{stem}.subword.msst")), &s.s_w)?;
    Ok(())
}

/// Exports styles of every utterance; returns the number written.
pub fn export_styles(model: &Model, corpus: &Corpus, source: StyleSource, dir: &Path) -> Result<usize> {
    let mut n = 0;
    for u in corpus.utterances() {
        let s = styles_for(model, corpus, &u.document_id, u.sentence_index, source)?;
        write_styles(dir, &u.document_id, u.sentence_index, &s)?;
        n += 1;
    }
    Ok(n)
}
