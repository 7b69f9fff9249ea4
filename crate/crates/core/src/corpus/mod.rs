//! Aligned-utterance corpora: on-disk manifest, validation, context windows,
//! subword spans and phone-level averages.
//!
//! A manifest is a JSON-lines file. The first line is a header:
//!
//! ```text
//! {"kind":"header","version":1,"feature_config":{"mel_bins":20,"sample_rate_hz":24000,"frame_size_samples":1200,"hop_size_samples":240}}
//! ```
//!
//! Every following non-empty line is one utterance:
//!
//! ```text
//! {"kind":"utterance","document_id":"doc00","sentence_index":0,"text":"ka lo mi",
//!  "subwords":["ka","lo","mi"],"phonemes":["K","AA","L","OW","M","IY"],
//!  "subword_phoneme_counts":[2,2,2],"durations":[3,4,2,5,3,4],
//!  "mel":"doc00/000.mel.msst","pitch":"doc00/000.pitch.msst","energy":"doc00/000.energy.msst"}
//! ```
//!
//! Tensor paths are relative to the manifest's directory.

mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, Tensor};

pub use synth::{
    generate_synthetic_corpus, load_factors, DocumentFactors, PlantedFactors, SentenceFactors, SynthConfig,
    FACTORS_FILE, MANIFEST_FILE, SEMANTIC_DIR,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub mel_bins: usize,
    pub sample_rate_hz: u32,
    pub frame_size_samples: u32,
    pub hop_size_samples: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            mel_bins: 80,
            sample_rate_hz: 24_000,
            frame_size_samples: 1200,
            hop_size_samples: 240,
        }
    }
}

/// One sentence with its alignment and frame-level features.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedUtterance {
    pub document_id: String,
    pub sentence_index: usize,
    pub text: String,
    pub subwords: Vec<String>,
    pub phonemes: Vec<String>,
    pub subword_phoneme_counts: Vec<usize>,
    pub durations: Vec<usize>,
    /// `[frames, mel_bins]`, log amplitude.
    pub mel: Tensor,
    /// Hz, 0 for unvoiced frames.
    pub pitch_frame: Vec<f64>,
    pub energy_frame: Vec<f64>,
}

impl AlignedUtterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn n_subwords(&self) -> usize {
        self.subwords.len()
    }

    pub fn key(&self) -> String {
        format!("{}:{}", self.document_id, self.sentence_index)
    }

    /// Subword index of every phoneme.
    pub fn subword_of(&self) -> Vec<usize> {
        self.subword_phoneme_counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let key = self.key();
        let bad = |msg: String| Error::Manifest(format!("{key}: {msg}"));
        if self.subwords.is_empty() {
            return Err(bad("no subwords".into()));
        }
        if self.subword_phoneme_counts.len() != self.subwords.len() {
            return Err(bad(format!(
                "{} subword phoneme counts for {} subwords",
                self.subword_phoneme_counts.len(),
                self.subwords.len()
            )));
        }
        let counted: usize = self.subword_phoneme_counts.iter().sum();
        if counted != self.phonemes.len() {
            return Err(bad(format!(
                "subword phoneme counts sum to {counted}, {} phonemes",
                self.phonemes.len()
            )));
        }
        if self.durations.len() != self.phonemes.len() {
            return Err(bad(format!(
                "{} durations for {} phonemes",
                self.durations.len(),
                self.phonemes.len()
            )));
        }
        let frames = self.frames();
        if frames == 0 {
            return Err(bad("all durations are zero".into()));
        }
        if self.mel.shape().len() != 2 || self.mel.rows() != frames {
            return Err(bad(format!(
                "shape mismatch: durations sum to {frames}, mel has shape {:?}",
                self.mel.shape()
            )));
        }
        if self.pitch_frame.len() != frames || self.energy_frame.len() != frames {
            return Err(bad(format!(
                "shape mismatch: durations sum to {frames}, pitch has {}, energy has {}",
                self.pitch_frame.len(),
                self.energy_frame.len()
            )));
        }
        Ok(())
    }

    /// Per-phoneme mean pitch, unvoiced frames excluded.
    pub fn phone_pitch(&self) -> Vec<f64> {
        phone_level_average(&self.pitch_frame, &self.durations, true).expect("validated utterance")
    }

    pub fn phone_energy(&self) -> Vec<f64> {
        phone_level_average(&self.energy_frame, &self.durations, false).expect("validated utterance")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    /// Sorted by `sentence_index`.
    pub utterances: Vec<AlignedUtterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_config: FeatureConfig,
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Groups utterances by document (in first-seen order), sorts each group by
    /// sentence index, and validates every utterance.
    pub fn from_utterances(feature_config: FeatureConfig, utterances: Vec<AlignedUtterance>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<AlignedUtterance>> = BTreeMap::new();
        for u in utterances {
            u.validate()?;
            if u.mel.cols() != feature_config.mel_bins {
                return Err(Error::Manifest(format!(
                    "{}: mel has {} bins, feature config says {}",
                    u.key(),
                    u.mel.cols(),
                    feature_config.mel_bins
                )));
            }
            if !groups.contains_key(&u.document_id) {
                order.push(u.document_id.clone());
            }
            groups.entry(u.document_id.clone()).or_default().push(u);
        }
        let mut documents = Vec::with_capacity(order.len());
        for id in order {
            let mut utts = groups.remove(&id).unwrap_or_default();
            utts.sort_by_key(|u| u.sentence_index);
            for pair in utts.windows(2) {
                if pair[0].sentence_index == pair[1].sentence_index {
                    return Err(Error::Manifest(format!("duplicate utterance {}", pair[0].key())));
                }
            }
            documents.push(Document { id, utterances: utts });
        }
        Ok(Self {
            feature_config,
            documents,
        })
    }

    pub fn n_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn n_utterances(&self) -> usize {
        self.documents.iter().map(|d| d.utterances.len()).sum()
    }

    pub fn document(&self, id: &str) -> Result<&Document> {
        self.documents
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDocument(id.to_string()))
    }

    /// Position of an utterance within its document.
    pub fn position(&self, document_id: &str, sentence_index: usize) -> Result<(usize, usize)> {
        let unknown = || Error::UnknownUtterance {
            document_id: document_id.to_string(),
            sentence_index,
        };
        let d = self
            .documents
            .iter()
            .position(|d| d.id == document_id)
            .ok_or_else(unknown)?;
        let s = self.documents[d]
            .utterances
            .iter()
            .position(|u| u.sentence_index == sentence_index)
            .ok_or_else(unknown)?;
        Ok((d, s))
    }

    pub fn utterance(&self, document_id: &str, sentence_index: usize) -> Result<&AlignedUtterance> {
        let (d, s) = self.position(document_id, sentence_index)?;
        Ok(&self.documents[d].utterances[s])
    }

    pub fn utterances(&self) -> impl Iterator<Item = &AlignedUtterance> {
        self.documents.iter().flat_map(|d| d.utterances.iter())
    }

    /// Sorted phoneme inventory.
    pub fn phoneme_inventory(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .utterances()
            .flat_map(|u| u.phonemes.iter().map(String::as_str))
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Sorted subword vocabulary.
    pub fn subword_vocabulary(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .utterances()
            .flat_map(|u| u.subwords.iter().map(String::as_str))
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// `(min, max)` of phone-level energy over the corpus.
    pub fn phone_energy_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for u in self.utterances() {
            for (e, &d) in u.phone_energy().iter().zip(&u.durations) {
                if d > 0 {
                    lo = lo.min(*e);
                    hi = hi.max(*e);
                }
            }
        }
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    }

    pub fn build_context_window(
        &self,
        document_id: &str,
        sentence_index: usize,
        radius: usize,
    ) -> Result<ContextWindow<'_>> {
        let (d, s) = self.position(document_id, sentence_index)?;
        Ok(ContextWindow::around(&self.documents[d].utterances, s, radius))
    }
}

/// The current sentence plus up to `radius` neighbours on each side, clamped
/// to the document.
#[derive(Debug, Clone, Copy)]
pub struct ContextWindow<'a> {
    pub sentences: &'a [AlignedUtterance],
    pub current_offset: usize,
    pub radius: usize,
}

impl<'a> ContextWindow<'a> {
    /// Window around position `pos` of a document's sorted utterances.
    pub fn around(doc: &'a [AlignedUtterance], pos: usize, radius: usize) -> Self {
        let start = pos.saturating_sub(radius);
        let end = (pos + radius + 1).min(doc.len());
        Self {
            sentences: &doc[start..end],
            current_offset: pos - start,
            radius,
        }
    }

    pub fn current(&self) -> &'a AlignedUtterance {
        &self.sentences[self.current_offset]
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Frame span of one subword; `degenerate` when all its phonemes have zero
/// duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubwordSpan {
    pub start: usize,
    pub end: usize,
    pub degenerate: bool,
}

impl SubwordSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

pub fn subword_spans(durations: &[usize], subword_phoneme_counts: &[usize]) -> Result<Vec<SubwordSpan>> {
    let counted: usize = subword_phoneme_counts.iter().sum();
    if counted != durations.len() {
        return Err(Error::Shape(format!(
            "subword phoneme counts sum to {counted}, {} durations",
            durations.len()
        )));
    }
    let mut spans = Vec::with_capacity(subword_phoneme_counts.len());
    let (mut frame, mut phone) = (0, 0);
    for &c in subword_phoneme_counts {
        let len: usize = durations[phone..phone + c].iter().sum();
        spans.push(SubwordSpan {
            start: frame,
            end: frame + len,
            degenerate: len == 0,
        });
        frame += len;
        phone += c;
    }
    Ok(spans)
}

/// Mean of the frames in each phoneme's span. Zero-duration phonemes give 0.
/// With `exclude_unvoiced`, zero-valued frames are left out of the mean and an
/// all-zero phoneme gives 0.
pub fn phone_level_average(frame_values: &[f64], durations: &[usize], exclude_unvoiced: bool) -> Result<Vec<f64>> {
    let total: usize = durations.iter().sum();
    if total != frame_values.len() {
        return Err(Error::Shape(format!(
            "{} frame values for durations summing to {total}",
            frame_values.len()
        )));
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut start = 0;
    for &d in durations {
        let span = &frame_values[start..start + d];
        start += d;
        let (sum, n) = span
            .iter()
            .filter(|&&v| !(exclude_unvoiced && v == 0.0))
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        out.push(if n == 0 { 0.0 } else { sum / n as f64 });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header {
        version: u32,
        feature_config: FeatureConfig,
    },
    Utterance(ManifestEntry),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub document_id: String,
    pub sentence_index: usize,
    pub text: String,
    pub subwords: Vec<String>,
    pub phonemes: Vec<String>,
    pub subword_phoneme_counts: Vec<usize>,
    pub durations: Vec<usize>,
    pub mel: String,
    pub pitch: String,
    pub energy: String,
}

/// Serializes a manifest: header line then one line per entry.
pub fn manifest_text(feature_config: &FeatureConfig, entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    let header = ManifestLine::Header {
        version: MANIFEST_VERSION,
        feature_config: feature_config.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("serializable"));
    out.push('\n');
    for e in entries {
        let line = ManifestLine::Utterance(e.clone());
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Parses header and entries without touching tensor files.
pub fn parse_manifest(text: &str) -> Result<(FeatureConfig, Vec<ManifestEntry>)> {
    let mut feature_config = None;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(line).map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
        match parsed {
            ManifestLine::Header {
                version,
                feature_config: fc,
            } => {
                if version != MANIFEST_VERSION {
                    return Err(Error::Manifest(format!("unsupported manifest version {version}")));
                }
                if feature_config.is_some() {
                    return Err(Error::Manifest(format!("line {}: second header", n + 1)));
                }
                feature_config = Some(fc);
            }
            ManifestLine::Utterance(e) => entries.push(e),
        }
    }
    let fc = feature_config.ok_or_else(|| Error::Manifest("missing header line".into()))?;
    Ok((fc, entries))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (fc, entries) = parse_manifest(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
    let mut utts = Vec::with_capacity(entries.len());
    let mut seen = BTreeSet::new();
    for e in entries {
        if !seen.insert((e.document_id.clone(), e.sentence_index)) {
            return Err(Error::Manifest(format!(
                "duplicate utterance {}:{}",
                e.document_id, e.sentence_index
            )));
        }
        let mel = read_tensor(base.join(&e.mel))?;
        let pitch = read_tensor(base.join(&e.pitch))?;
        let energy = read_tensor(base.join(&e.energy))?;
        utts.push(AlignedUtterance {
            document_id: e.document_id,
            sentence_index: e.sentence_index,
            text: e.text,
            subwords: e.subwords,
            phonemes: e.phonemes,
            subword_phoneme_counts: e.subword_phoneme_counts,
            durations: e.durations,
            mel,
            pitch_frame: pitch.into_data(),
            energy_frame: energy.into_data(),
        });
    }
    Corpus::from_utterances(fc, utts)
}
