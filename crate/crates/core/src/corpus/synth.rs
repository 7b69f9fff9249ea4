//! Deterministic synthetic audiobook corpus with planted style factors.
//!
//! Every document carries a chapter-wide pitch offset, every sentence a
//! tempo/energy factor driven by cue words in itself and its neighbours, and
//! every subword a stress flag that raises pitch locally. The text carries
//! the evidence: mood words follow the chapter offset's sign, cue words set
//! the sentence factor, and stress is a property of the token.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{manifest_text, FeatureConfig, ManifestEntry};
use crate::error::{Error, Result};
use crate::params::gaussian;
use crate::semantic::PrecomputedStore;
use crate::tensor::{write_tensor, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FACTORS_FILE: &str = "factors.json";
/// Subdirectory holding the precomputed semantic store.
pub const SEMANTIC_DIR: &str = "semantic";

const VOICED: &[&str] = &[
    "AA", "AE", "AH", "AO", "EH", "ER", "IH", "IY", "OW", "UH", "UW", "AY", "B", "D", "G", "M", "N", "L", "R", "W",
];
const UNVOICED: &[&str] = &["K", "P", "T", "F", "S", "SH"];
const ONSETS: &[&str] = &["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub documents: usize,
    pub sentences_per_document: usize,
    /// Inclusive `[min, max]`.
    pub subwords_per_sentence: [usize; 2],
    /// Inclusive `[min, max]` phonemes per lexicon entry.
    pub phonemes_per_subword: [usize; 2],
    pub mel_bins: usize,
    pub sample_rate_hz: u32,
    pub frame_size_samples: u32,
    pub hop_size_samples: u32,
    /// Number of ordinary (non-cue, non-mood) tokens.
    pub vocab_size: usize,
    /// Cue tokens per polarity.
    pub cue_tokens: usize,
    /// Mood tokens per polarity.
    pub mood_tokens: usize,
    pub stressed_fraction: f64,
    /// Chapter offsets, assigned to documents cyclically.
    pub chapter_pitch_offsets_hz: Vec<f64>,
    pub base_pitch_hz: f64,
    pub stress_hz: f64,
    /// Log-domain spectral tilt across the mel axis, signed by the chapter
    /// offset. Only the spectrum shows it.
    pub chapter_tilt: f64,
    /// Log-domain boost of the middle mel bands on stressed subwords,
    /// peaking mid-subword. Symmetric, so it does not alias the tilt.
    pub stress_boost: f64,
    /// Pitch fall from the start to the end of a sentence.
    pub declination_hz: f64,
    pub pitch_jitter_hz: f64,
    /// Weight of the sentence's own cue in its style factor.
    pub self_weight: f64,
    /// Weight of the mean cue of the adjacent sentences.
    pub neighbor_weight: f64,
    pub tempo_depth: f64,
    pub energy_depth: f64,
    /// Inclusive `[min, max]` base frames per phoneme.
    pub base_frames: [usize; 2],
    pub duration_jitter: usize,
    /// Width of the precomputed semantic store written next to the
    /// manifest; 0 skips it.
    pub semantic_dim: usize,
    /// Length of the shared cue, mood and stress directions in the semantic
    /// vectors, relative to the per-token noise.
    pub semantic_signal: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let fc = FeatureConfig::default();
        Self {
            documents: 8,
            sentences_per_document: 12,
            subwords_per_sentence: [4, 8],
            phonemes_per_subword: [1, 3],
            mel_bins: 20,
            sample_rate_hz: fc.sample_rate_hz,
            frame_size_samples: fc.frame_size_samples,
            hop_size_samples: fc.hop_size_samples,
            vocab_size: 40,
            cue_tokens: 4,
            mood_tokens: 4,
            stressed_fraction: 0.3,
            chapter_pitch_offsets_hz: vec![-30.0, 30.0],
            base_pitch_hz: 170.0,
            stress_hz: 40.0,
            chapter_tilt: 1.8,
            stress_boost: 0.6,
            declination_hz: 20.0,
            pitch_jitter_hz: 0.0,
            self_weight: 1.0,
            neighbor_weight: 0.6,
            tempo_depth: 0.25,
            energy_depth: 0.35,
            base_frames: [3, 6],
            duration_jitter: 1,
            semantic_dim: 16,
            semantic_signal: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            mel_bins: self.mel_bins,
            sample_rate_hz: self.sample_rate_hz,
            frame_size_samples: self.frame_size_samples,
            hop_size_samples: self.hop_size_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("synth.{field}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("documents", self.documents)?;
        positive("sentences_per_document", self.sentences_per_document)?;
        positive("vocab_size", self.vocab_size)?;
        positive("cue_tokens", self.cue_tokens)?;
        positive("mood_tokens", self.mood_tokens)?;
        positive("sample_rate_hz", self.sample_rate_hz as usize)?;
        positive("hop_size_samples", self.hop_size_samples as usize)?;
        for (field, [lo, hi]) in [
            ("subwords_per_sentence", self.subwords_per_sentence),
            ("phonemes_per_subword", self.phonemes_per_subword),
            ("base_frames", self.base_frames),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(
                    format!("synth.{field}"),
                    format!("range [{lo}, {hi}] must satisfy 1 <= min <= max"),
                ));
            }
        }
        if self.mel_bins < 4 {
            return Err(Error::config("synth.mel_bins", "need at least 4 bins"));
        }
        if self.chapter_pitch_offsets_hz.is_empty() {
            return Err(Error::config(
                "synth.chapter_pitch_offsets_hz",
                "need at least one offset",
            ));
        }
        if !(0.0..=1.0).contains(&self.stressed_fraction) {
            return Err(Error::config("synth.stressed_fraction", "must lie in [0, 1]"));
        }
        let floats = [
            ("base_pitch_hz", self.base_pitch_hz),
            ("stress_hz", self.stress_hz),
            ("chapter_tilt", self.chapter_tilt),
            ("stress_boost", self.stress_boost),
            ("declination_hz", self.declination_hz),
            ("pitch_jitter_hz", self.pitch_jitter_hz),
            ("self_weight", self.self_weight),
            ("neighbor_weight", self.neighbor_weight),
            ("tempo_depth", self.tempo_depth),
            ("energy_depth", self.energy_depth),
            ("semantic_signal", self.semantic_signal),
        ];
        for (field, v) in floats {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    format!("synth.{field}"),
                    "must be finite and non-negative",
                ));
            }
        }
        if self.chapter_pitch_offsets_hz.iter().any(|o| !o.is_finite()) {
            return Err(Error::config("synth.chapter_pitch_offsets_hz", "must be finite"));
        }
        if self.base_pitch_hz <= 0.0 {
            return Err(Error::config("synth.base_pitch_hz", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceFactors {
    pub sentence_index: usize,
    /// Cue polarity expressed by the sentence's cue word.
    pub cue: f64,
    /// `self_weight · cue + neighbor_weight · mean(neighbour cues)`.
    pub sentence_factor: f64,
    pub tempo: f64,
    pub energy_scale: f64,
    pub subword_stress: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentFactors {
    pub document_id: String,
    /// Index into the configured offset list.
    pub chapter_class: usize,
    pub chapter_offset_hz: f64,
    pub sentences: Vec<SentenceFactors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFactors {
    pub seed: u64,
    pub chapter_pitch_offsets_hz: Vec<f64>,
    pub documents: Vec<DocumentFactors>,
}

impl PlantedFactors {
    pub fn document(&self, id: &str) -> Option<&DocumentFactors> {
        self.documents.iter().find(|d| d.document_id == id)
    }

    pub fn sentence(&self, id: &str, sentence_index: usize) -> Option<&SentenceFactors> {
        self.document(id)?
            .sentences
            .iter()
            .find(|s| s.sentence_index == sentence_index)
    }
}

pub fn load_factors(path: impl AsRef<Path>) -> Result<PlantedFactors> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

struct Phone {
    symbol: &'static str,
    voiced: bool,
    base_frames: usize,
    loudness: f64,
    envelope: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Plain,
    CuePos,
    CueNeg,
    MoodPos,
    MoodNeg,
}

struct Token {
    name: String,
    phones: Vec<usize>,
    stressed: bool,
    class: TokenClass,
}

struct Lexicon {
    phones: Vec<Phone>,
    tokens: Vec<Token>,
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp()
}

fn build_lexicon(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Lexicon {
    let bins = cfg.mel_bins as f64;
    let mut phones = Vec::new();
    for (&symbol, voiced) in VOICED
        .iter()
        .map(|s| (s, true))
        .chain(UNVOICED.iter().map(|s| (s, false)))
    {
        let f1 = rng.gen_range(0.15..0.45) * bins;
        let f2 = rng.gen_range(0.5..0.9) * bins;
        let a1 = rng.gen_range(0.6..1.4);
        let a2 = rng.gen_range(0.3..0.9);
        let envelope = (0..cfg.mel_bins)
            .map(|b| {
                let b = b as f64;
                if voiced {
                    0.15 + a1 * gauss(b, f1, 1.5) + a2 * gauss(b, f2, 2.0)
                } else {
                    0.1 + a1 / (1.0 + (-(b - 0.6 * bins) / 1.5).exp())
                }
            })
            .collect();
        phones.push(Phone {
            symbol,
            voiced,
            base_frames: rng.gen_range(cfg.base_frames[0]..=cfg.base_frames[1]),
            loudness: if voiced {
                rng.gen_range(0.8..1.2)
            } else {
                rng.gen_range(0.4..0.7)
            },
            envelope,
        });
    }

    let mut syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| NUCLEI.iter().map(move |n| format!("{o}{n}")))
        .collect();
    syllables.shuffle(rng);
    let mut names = Vec::new();
    'outer: for a in &syllables {
        for b in &syllables {
            names.push(format!("{a}{b}"));
            if names.len() == cfg.vocab_size {
                break 'outer;
            }
        }
    }
    let random_phones = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(cfg.phonemes_per_subword[0]..=cfg.phonemes_per_subword[1]);
        (0..n).map(|_| rng.gen_range(0..phones.len())).collect::<Vec<_>>()
    };
    let mut tokens = Vec::new();
    for name in names {
        let phones = random_phones(rng);
        let stressed = rng.gen_bool(cfg.stressed_fraction);
        tokens.push(Token {
            name,
            phones,
            stressed,
            class: TokenClass::Plain,
        });
    }
    for (prefix, class, count) in [
        ("hi", TokenClass::CuePos, cfg.cue_tokens),
        ("lo", TokenClass::CueNeg, cfg.cue_tokens),
        ("sun", TokenClass::MoodPos, cfg.mood_tokens),
        ("fog", TokenClass::MoodNeg, cfg.mood_tokens),
    ] {
        for i in 0..count {
            let phones = random_phones(rng);
            tokens.push(Token {
                name: format!("{prefix}{i}"),
                phones,
                stressed: false,
                class,
            });
        }
    }
    Lexicon { phones, tokens }
}

fn pitch_bin(cfg: &SynthConfig, f0: f64) -> f64 {
    let lo = 60.0;
    let hi = 420.0;
    1.0 + (f0 - lo) / (hi - lo) * (cfg.mel_bins as f64 - 3.0)
}

struct Sentence {
    tokens: Vec<usize>,
    cue: f64,
}

/// Writes `manifest.jsonl`, `factors.json` and `tensors/` under `out`.
/// Returns the manifest path.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = build_lexicon(cfg, &mut rng);
    let by_class = |class: TokenClass| -> Vec<usize> {
        (0..lex.tokens.len())
            .filter(|&i| lex.tokens[i].class == class)
            .collect()
    };
    let plain = by_class(TokenClass::Plain);
    let (cue_pos, cue_neg) = (by_class(TokenClass::CuePos), by_class(TokenClass::CueNeg));
    let (mood_pos, mood_neg) = (by_class(TokenClass::MoodPos), by_class(TokenClass::MoodNeg));

    let mut entries = Vec::new();
    let mut doc_factors = Vec::new();
    let mut sentences_by_doc = Vec::new();
    for d in 0..cfg.documents {
        let document_id = format!("doc{d:02}");
        let chapter_class = d % cfg.chapter_pitch_offsets_hz.len();
        let offset = cfg.chapter_pitch_offsets_hz[chapter_class];

        let mut sentences = Vec::with_capacity(cfg.sentences_per_document);
        for _ in 0..cfg.sentences_per_document {
            let n = rng.gen_range(cfg.subwords_per_sentence[0]..=cfg.subwords_per_sentence[1]);
            let mut tokens: Vec<usize> = (0..n).map(|_| plain[rng.gen_range(0..plain.len())]).collect();
            let cue = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let cue_pool = if cue > 0.0 { &cue_pos } else { &cue_neg };
            let cue_at = rng.gen_range(0..n);
            tokens[cue_at] = cue_pool[rng.gen_range(0..cue_pool.len())];
            if offset != 0.0 && n > 1 {
                let pool = if offset > 0.0 { &mood_pos } else { &mood_neg };
                let mut at = rng.gen_range(0..n - 1);
                if at >= cue_at {
                    at += 1;
                }
                tokens[at] = pool[rng.gen_range(0..pool.len())];
            }
            sentences.push(Sentence { tokens, cue });
        }

        let mut factors = Vec::with_capacity(sentences.len());
        for (t, sent) in sentences.iter().enumerate() {
            let neighbours: Vec<f64> = [t.checked_sub(1), Some(t + 1)]
                .into_iter()
                .flatten()
                .filter_map(|i| sentences.get(i).map(|s| s.cue))
                .collect();
            let nb = if neighbours.is_empty() {
                0.0
            } else {
                neighbours.iter().sum::<f64>() / neighbours.len() as f64
            };
            let factor = cfg.self_weight * sent.cue + cfg.neighbor_weight * nb;
            let tempo = (-cfg.tempo_depth * factor).exp();
            let energy_scale = (cfg.energy_depth * factor).exp();
            let stress = sent.tokens.iter().map(|&k| lex.tokens[k].stressed).collect();
            factors.push(SentenceFactors {
                sentence_index: t,
                cue: sent.cue,
                sentence_factor: factor,
                tempo,
                energy_scale,
                subword_stress: stress,
            });
        }

        for (t, (sent, f)) in sentences.iter().zip(&factors).enumerate() {
            let entry = render_sentence(cfg, &lex, &document_id, t, sent, f, offset, &mut rng, out)?;
            entries.push(entry);
        }
        sentences_by_doc.push((document_id.clone(), sentences));
        doc_factors.push(DocumentFactors {
            document_id,
            chapter_class,
            chapter_offset_hz: offset,
            sentences: factors,
        });
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, manifest_text(&cfg.feature_config(), &entries)).map_err(|e| Error::io(&manifest, e))?;
    let factors = PlantedFactors {
        seed,
        chapter_pitch_offsets_hz: cfg.chapter_pitch_offsets_hz.clone(),
        documents: doc_factors,
    };
    let fpath = out.join(FACTORS_FILE);
    let text = serde_json::to_string_pretty(&factors).expect("serializable");
    fs::write(&fpath, text).map_err(|e| Error::io(&fpath, e))?;
    if cfg.semantic_dim > 0 {
        write_semantic_store(cfg, &lex, &sentences_by_doc, seed, &out.join(SEMANTIC_DIR))?;
    }
    Ok(manifest)
}

/// Stand-in for pretrained text features: one fixed vector per token made of
/// token-specific noise plus shared directions for cue polarity, mood
/// polarity and stress.
fn write_semantic_store(
    cfg: &SynthConfig,
    lex: &Lexicon,
    docs: &[(String, Vec<Sentence>)],
    seed: u64,
    dir: &Path,
) -> Result<()> {
    let d = cfg.semantic_dim;
    // separate stream so the audio side does not depend on semantic_dim
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e3a_471c);
    let direction = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| cfg.semantic_signal * x / n).collect::<Vec<_>>()
    };
    let (cue_dir, mood_dir, stress_dir) = (direction(&mut rng), direction(&mut rng), direction(&mut rng));
    let noise = 1.0 / (d as f64).sqrt();
    let vectors: Vec<Vec<f64>> = lex
        .tokens
        .iter()
        .map(|tok| {
            let mut v: Vec<f64> = (0..d).map(|_| noise * gaussian(&mut rng)).collect();
            let (dir, sign) = match tok.class {
                TokenClass::CuePos => (Some(&cue_dir), 1.0),
                TokenClass::CueNeg => (Some(&cue_dir), -1.0),
                TokenClass::MoodPos => (Some(&mood_dir), 1.0),
                TokenClass::MoodNeg => (Some(&mood_dir), -1.0),
                TokenClass::Plain if tok.stressed => (Some(&stress_dir), 1.0),
                TokenClass::Plain => (None, 0.0),
            };
            if let Some(dir) = dir {
                for (a, b) in v.iter_mut().zip(dir) {
                    *a += sign * b;
                }
            }
            v
        })
        .collect();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    for (doc, sentences) in docs {
        for (i, s) in sentences.iter().enumerate() {
            let data: Vec<f64> = s.tokens.iter().flat_map(|&k| vectors[k].iter().copied()).collect();
            arrays.push(((doc.clone(), i), Tensor::matrix(s.tokens.len(), d, data)?));
        }
    }
    PrecomputedStore::write(dir, d, &arrays)
}

#[allow(clippy::too_many_arguments)]
fn render_sentence(
    cfg: &SynthConfig,
    lex: &Lexicon,
    document_id: &str,
    index: usize,
    sent: &Sentence,
    f: &SentenceFactors,
    chapter_offset: f64,
    rng: &mut ChaCha8Rng,
    out: &Path,
) -> Result<ManifestEntry> {
    let mut phonemes = Vec::new();
    let mut counts = Vec::new();
    let mut durations = Vec::new();
    let mut phone_ids = Vec::new();
    for &k in &sent.tokens {
        let tok = &lex.tokens[k];
        counts.push(tok.phones.len());
        for &p in &tok.phones {
            let phone = &lex.phones[p];
            phonemes.push(phone.symbol.to_string());
            phone_ids.push(p);
            let jitter = if cfg.duration_jitter > 0 {
                rng.gen_range(0..=2 * cfg.duration_jitter) as i64 - cfg.duration_jitter as i64
            } else {
                0
            };
            let d = (phone.base_frames as f64 * f.tempo).round() as i64 + jitter;
            durations.push(d.max(1) as usize);
        }
    }
    let frames: usize = durations.iter().sum();
    let bins = cfg.mel_bins;
    let mut mel = Vec::with_capacity(frames * bins);
    let mut pitch = Vec::with_capacity(frames);
    let mut energy = Vec::with_capacity(frames);

    let mut frame = 0usize;
    let mut ph = 0usize;
    for (j, &count) in counts.iter().enumerate() {
        let sub_len: usize = durations[ph..ph + count].iter().sum();
        let mut k_sub = 0usize;
        for _ in 0..count {
            let phone = &lex.phones[phone_ids[ph]];
            let d = durations[ph];
            for k in 0..d {
                let pos_sub = (k_sub as f64 + 0.5) / sub_len as f64;
                let pos_sent = (frame as f64 + 0.5) / frames as f64;
                let f0 = if phone.voiced {
                    let stress = if f.subword_stress[j] {
                        cfg.stress_hz * (std::f64::consts::PI * pos_sub).sin()
                    } else {
                        0.0
                    };
                    let jitter = if cfg.pitch_jitter_hz > 0.0 {
                        cfg.pitch_jitter_hz * gaussian(rng)
                    } else {
                        0.0
                    };
                    (cfg.base_pitch_hz + chapter_offset + stress + cfg.declination_hz * (0.5 - pos_sent) + jitter)
                        .max(60.0)
                } else {
                    0.0
                };
                let shape = 0.75 + 0.25 * (std::f64::consts::PI * (k as f64 + 0.5) / d as f64).sin();
                let e = f.energy_scale * phone.loudness * shape;
                let centre = pitch_bin(cfg, f0);
                let tilt = cfg.chapter_tilt * chapter_offset.signum();
                let boost = if f.subword_stress[j] {
                    cfg.stress_boost * (std::f64::consts::PI * pos_sub).sin()
                } else {
                    0.0
                };
                let mid = (bins - 1) as f64 / 2.0;
                let mut lin_sum = 0.0;
                for b in 0..bins {
                    let mut lin = phone.envelope[b];
                    if phone.voiced {
                        lin += 1.2 * gauss(b as f64, centre, 0.8);
                    }
                    let shape =
                        tilt * (b as f64 / (bins - 1) as f64 - 0.5) + boost * gauss(b as f64, mid, bins as f64 / 6.0);
                    lin *= shape.exp();
                    lin_sum += lin;
                    mel.push((0.01 + e * lin).ln());
                }
                pitch.push(f0);
                energy.push(e * lin_sum / bins as f64);
                frame += 1;
                k_sub += 1;
            }
            ph += 1;
        }
    }

    let stem = format!("tensors/{document_id}/s{index:03}");
    let mel_rel = format!("{stem}.mel.msst");
    let pitch_rel = format!("{stem}.pitch.msst");
    let energy_rel = format!("{stem}.energy.msst");
    write_tensor(out.join(&mel_rel), &Tensor::matrix(frames, bins, mel)?)?;
    write_tensor(out.join(&pitch_rel), &Tensor::vector(pitch))?;
    write_tensor(out.join(&energy_rel), &Tensor::vector(energy))?;

    let subwords: Vec<String> = sent.tokens.iter().map(|&k| lex.tokens[k].name.clone()).collect();
    Ok(ManifestEntry {
        document_id: document_id.to_string(),
        sentence_index: index,
        text: subwords.join(" "),
        subwords,
        phonemes,
        subword_phoneme_counts: counts,
        durations,
        mel: mel_rel,
        pitch: pitch_rel,
        energy: energy_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;

    fn small() -> SynthConfig {
        SynthConfig {
            documents: 2,
            sentences_per_document: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn two_by_three_gives_six_entries() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&small(), 7, dir.path()).unwrap();
        let c = load_manifest(&m).unwrap();
        assert_eq!((c.n_documents(), c.n_utterances()), (2, 6));
        let f = load_factors(dir.path().join(FACTORS_FILE)).unwrap();
        assert_eq!(f.documents.len(), 2);
        for u in c.utterances() {
            let s = f.sentence(&u.document_id, u.sentence_index).unwrap();
            assert_eq!(s.subword_stress.len(), u.n_subwords());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&small(), 11, a.path()).unwrap();
        generate_synthetic_corpus(&small(), 11, b.path()).unwrap();
        for rel in [MANIFEST_FILE, FACTORS_FILE, "tensors/doc01/s002.mel.msst"] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let cfg = SynthConfig {
            subwords_per_sentence: [5, 2],
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = generate_synthetic_corpus(&cfg, 1, dir.path()).unwrap_err();
        assert!(err.to_string().contains("subwords_per_sentence"), "{err}");
        let cfg = SynthConfig {
            documents: 0,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("synth.documents"));
    }

    #[test]
    fn chapter_offsets_show_in_mean_pitch() {
        let cfg = SynthConfig {
            stress_hz: 0.0,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&cfg, 7, dir.path()).unwrap();
        let c = load_manifest(&m).unwrap();
        // mean over voiced frames, recomputed from the stored tensors
        let mean = |d: usize| {
            let v: Vec<f64> = c.documents[d]
                .utterances
                .iter()
                .flat_map(|u| u.pitch_frame.iter().copied())
                .filter(|&p| p > 0.0)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let diff = mean(1) - mean(0);
        assert!((diff - 60.0).abs() <= 2.0, "difference {diff}");
    }

    #[test]
    fn text_carries_the_cue() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&small(), 3, dir.path()).unwrap();
        let c = load_manifest(&m).unwrap();
        let f = load_factors(dir.path().join(FACTORS_FILE)).unwrap();
        for u in c.utterances() {
            let s = f.sentence(&u.document_id, u.sentence_index).unwrap();
            let want = if s.cue > 0.0 { "hi" } else { "lo" };
            assert!(u.subwords.iter().any(|w| w.starts_with(want)), "{}", u.text);
        }
    }

    #[test]
    fn semantic_store_matches_subwords_and_encodes_cue_polarity() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&small(), 5, dir.path()).unwrap();
        let c = load_manifest(&m).unwrap();
        let store = PrecomputedStore::load(&dir.path().join(SEMANTIC_DIR)).unwrap();
        assert_eq!(store.d_sem, 16);
        let mut rows: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for u in c.utterances() {
            let t = store.get(&u.document_id, u.sentence_index).unwrap();
            assert_eq!(t.rows(), u.n_subwords());
            for (i, w) in u.subwords.iter().enumerate() {
                let r = t.row_slice(i).to_vec();
                // one fixed vector per token
                if let Some(prev) = rows.insert(w.clone(), r.clone()) {
                    assert_eq!(prev, r, "{w}");
                }
            }
        }
        let mean = |prefix: &str| {
            let vs: Vec<&Vec<f64>> = rows
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, v)| v)
                .collect();
            (0..16)
                .map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64)
                .collect::<Vec<_>>()
        };
        let (hi, lo) = (mean("hi"), mean("lo"));
        let dot: f64 = hi.iter().zip(&lo).map(|(a, b)| a * b).sum();
        assert!(dot < 0.0, "cue polarities should point apart, dot {dot}");
    }

    #[test]
    fn semantic_store_is_optional_and_leaves_audio_alone() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&small(), 2, a.path()).unwrap();
        let cfg = SynthConfig {
            semantic_dim: 0,
            ..small()
        };
        generate_synthetic_corpus(&cfg, 2, b.path()).unwrap();
        assert!(!b.path().join(SEMANTIC_DIR).exists());
        for rel in [MANIFEST_FILE, "tensors/doc00/s001.mel.msst"] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn chapter_tilt_raises_the_upper_bands() {
        // same pitch in both chapters, so only the tilt separates them
        let cfg = SynthConfig {
            chapter_pitch_offsets_hz: vec![-1e-3, 1e-3],
            documents: 4,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        let c = load_manifest(generate_synthetic_corpus(&cfg, 9, dir.path()).unwrap()).unwrap();
        let slope = |d: usize| {
            let (mut sum, mut n) = (0.0, 0.0);
            for u in &c.documents[d].utterances {
                for r in 0..u.mel.rows() {
                    let row = u.mel.row_slice(r);
                    sum += row[row.len() - 1] - row[0];
                    n += 1.0;
                }
            }
            sum / n
        };
        let pos = (slope(1) + slope(3)) / 2.0;
        let neg = (slope(0) + slope(2)) / 2.0;
        // the log-domain edge difference between chapters is 2·tilt before the floor
        assert!(pos - neg > cfg.chapter_tilt, "{pos} vs {neg}");
    }

    #[test]
    fn stress_boost_changes_the_spectrum_not_the_pitch() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&small(), 4, a.path()).unwrap();
        let cfg = SynthConfig {
            stress_boost: 0.0,
            ..small()
        };
        generate_synthetic_corpus(&cfg, 4, b.path()).unwrap();
        let ca = load_manifest(a.path().join(MANIFEST_FILE)).unwrap();
        let cb = load_manifest(b.path().join(MANIFEST_FILE)).unwrap();
        let mut mel_differs = false;
        for (x, y) in ca.utterances().zip(cb.utterances()) {
            assert_eq!(x.pitch_frame, y.pitch_frame);
            mel_differs |= x.mel.max_abs_diff(&y.mel) > 1e-6;
        }
        assert!(mel_differs);
    }
}
