//! Non-autoregressive acoustic model: phoneme encoder, multi-scale style
//! injection, phoneme-level variance adaptor, duration predictor after the
//! adaptor, length regulator and mel decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, Activation, Embedding, Linear, TransformerBlock};
use crate::params::ParamStore;
use crate::predictor::StyleNodes;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub mel_bins: usize,
    pub variance_bins: usize,
    pub pitch_range_hz: [f64; 2],
    pub energy_range: [f64; 2],
    /// Phoneme symbols; the id of a symbol is its index.
    pub inventory: Vec<String>,
    /// `(mean, std)` of phone-level pitch, used to normalize predictions.
    pub pitch_stats: [f64; 2],
    pub energy_stats: [f64; 2],
}

impl AcousticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.acoustic.heads",
                format!("{} heads must divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.variance_bins < 2 {
            return Err(Error::config("model.acoustic.variance_bins", "need at least 2 bins"));
        }
        if self.pitch_range_hz[1] <= self.pitch_range_hz[0] {
            return Err(Error::config("model.acoustic.pitch_range_hz", "empty range"));
        }
        if self.inventory.is_empty() {
            return Err(Error::config("model.acoustic.inventory", "no phonemes"));
        }
        Ok(())
    }

    pub fn phoneme_ids(&self, phonemes: &[String]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| {
                self.inventory
                    .iter()
                    .position(|q| q == p)
                    .ok_or_else(|| Error::Invalid(format!("unknown phoneme {p}")))
            })
            .collect()
    }
}

/// Bin index of `v` among `bins` equal-width bins over `[lo, hi]`; values at
/// or beyond the ends land in the first/last bin.
pub fn quantize(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let x = ((v - lo) / (hi - lo) * bins as f64).floor();
    if x.is_nan() || x < 0.0 {
        0
    } else {
        (x as usize).min(bins - 1)
    }
}

/// `round(exp(log_d) − 1)` floored at zero.
pub fn frames_from_log_duration(log_d: f64) -> usize {
    let f = (log_d.exp() - 1.0).round();
    if f.is_finite() && f > 0.0 {
        f as usize
    } else {
        0
    }
}

#[derive(Debug, Clone)]
struct VariancePredictor {
    hidden: Linear,
    out: Linear,
}

impl VariancePredictor {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, d, Activation::Relu, rng),
            out: Linear::new(store, &format!("{name}.out"), d, 1, Activation::None, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        self.out.forward(g, h)
    }
}

/// Ground-truth conditioning for teacher-forced synthesis.
#[derive(Debug, Clone)]
pub struct Targets<'a> {
    pub durations: &'a [usize],
    /// Phone-level pitch in Hz.
    pub pitch: &'a [f64],
    pub energy: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    TeacherForced(&'a Targets<'a>),
    FreeRunning,
}

/// Graph outputs of one synthesis pass.
#[derive(Debug, Clone)]
pub struct AcousticVars {
    /// `[frames, mel_bins]`.
    pub mel: Var,
    /// Normalized pitch prediction `[n, 1]`.
    pub pitch_z: Var,
    pub energy_z: Var,
    /// Predicted `log(frames + 1)` `[n, 1]`.
    pub log_duration: Var,
    pub durations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariancePredictions {
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub log_duration: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelPrediction {
    pub mel: Tensor,
    pub durations_rounded: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub embed: Embedding,
    pub encoder: Vec<TransformerBlock>,
    pitch: VariancePredictor,
    energy: VariancePredictor,
    duration: VariancePredictor,
    pub pitch_embed: Embedding,
    pub energy_embed: Embedding,
    pub decoder: Vec<TransformerBlock>,
    pub out: Linear,
    pub cfg: AcousticConfig,
}

impl AcousticModel {
    pub const PREFIX: &'static str = "acoustic";

    pub fn new(store: &mut ParamStore, cfg: &AcousticConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = Self::PREFIX;
        let d = cfg.d_model;
        let embed = Embedding::new(store, &format!("{p}.phoneme"), cfg.inventory.len(), d, rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| TransformerBlock::new(store, &format!("{p}.encoder{i}"), d, cfg.heads, cfg.d_ff, rng))
            .collect();
        let pitch = VariancePredictor::new(store, &format!("{p}.pitch"), d, rng);
        let energy = VariancePredictor::new(store, &format!("{p}.energy"), d, rng);
        let pitch_embed = Embedding::new(store, &format!("{p}.pitch_bins"), cfg.variance_bins, d, rng);
        let energy_embed = Embedding::new(store, &format!("{p}.energy_bins"), cfg.variance_bins, d, rng);
        let duration = VariancePredictor::new(store, &format!("{p}.duration"), d, rng);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| TransformerBlock::new(store, &format!("{p}.decoder{i}"), d, cfg.heads, cfg.d_ff, rng))
            .collect();
        let out = Linear::new(store, &format!("{p}.mel_out"), d, cfg.mel_bins, Activation::None, rng);
        Self {
            embed,
            encoder,
            pitch,
            energy,
            duration,
            pitch_embed,
            energy_embed,
            decoder,
            out,
            cfg: cfg.clone(),
        }
    }

    /// Embedding + positions + encoder stack → `[n, d_model]`.
    pub fn encode_phonemes(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("no phonemes".into()));
        }
        let x = self.embed.forward(g, ids)?;
        let pe = g.constant(sinusoid_table(ids.len(), self.cfg.d_model));
        let mut h = g.add(x, pe);
        for block in &self.encoder {
            h = block.forward(g, h);
        }
        Ok(h)
    }

    /// Per-phoneme S_g + S_s + S_w[subword_of[p]].
    pub fn replicate_styles(&self, g: &mut Graph, styles: &StyleNodes, subword_of: &[usize]) -> Result<Var> {
        replicate_styles(g, styles, subword_of)
    }

    fn normalize(stats: [f64; 2], v: f64) -> f64 {
        (v - stats[0]) / stats[1].max(1e-6)
    }

    fn denormalize(stats: [f64; 2], z: f64) -> f64 {
        stats[0] + z * stats[1].max(1e-6)
    }

    pub fn normalized_pitch(&self, hz: &[f64]) -> Vec<f64> {
        hz.iter().map(|&v| Self::normalize(self.cfg.pitch_stats, v)).collect()
    }

    pub fn normalized_energy(&self, e: &[f64]) -> Vec<f64> {
        e.iter().map(|&v| Self::normalize(self.cfg.energy_stats, v)).collect()
    }

    /// Predicts pitch/energy, adds their bin embeddings (ground truth when
    /// targets are given), and predicts log durations from the result.
    pub fn variance_adapt(
        &self,
        g: &mut Graph,
        hidden: Var,
        targets: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Var, Var, Var)> {
        let n = g.value(hidden).rows();
        let pitch_z = self.pitch.forward(g, hidden);
        let energy_z = self.energy.forward(g, hidden);
        let (pitch_vals, energy_vals): (Vec<f64>, Vec<f64>) = match targets {
            Some((p, e)) => {
                if p.len() != n || e.len() != n {
                    return Err(Error::Shape(format!(
                        "{n} phonemes, {} pitch and {} energy targets",
                        p.len(),
                        e.len()
                    )));
                }
                (p.to_vec(), e.to_vec())
            }
            None => (
                g.value(pitch_z)
                    .data()
                    .iter()
                    .map(|&z| Self::denormalize(self.cfg.pitch_stats, z))
                    .collect(),
                g.value(energy_z)
                    .data()
                    .iter()
                    .map(|&z| Self::denormalize(self.cfg.energy_stats, z))
                    .collect(),
            ),
        };
        let b = self.cfg.variance_bins;
        let [plo, phi] = self.cfg.pitch_range_hz;
        let [elo, ehi] = self.cfg.energy_range;
        let pb: Vec<usize> = pitch_vals.iter().map(|&v| quantize(v, plo, phi, b)).collect();
        let eb: Vec<usize> = energy_vals.iter().map(|&v| quantize(v, elo, ehi, b)).collect();
        let pe = self.pitch_embed.forward(g, &pb)?;
        let ee = self.energy_embed.forward(g, &eb)?;
        let h = g.add(hidden, pe);
        let h = g.add(h, ee);
        let log_d = self.duration.forward(g, h);
        Ok((h, pitch_z, energy_z, log_d))
    }

    /// Frame-level positions + decoder stack + projection.
    pub fn decode_mel(&self, g: &mut Graph, frames_hidden: Var) -> Var {
        let n = g.value(frames_hidden).rows();
        let pe = g.constant(sinusoid_table(n, self.cfg.d_model));
        let mut h = g.add(frames_hidden, pe);
        for block in &self.decoder {
            h = block.forward(g, h);
        }
        self.out.forward(g, h)
    }

    pub fn synthesize(
        &self,
        g: &mut Graph,
        ids: &[usize],
        subword_of: &[usize],
        styles: Option<&StyleNodes>,
        mode: Mode,
    ) -> Result<AcousticVars> {
        if subword_of.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} phonemes, {} subword indices",
                ids.len(),
                subword_of.len()
            )));
        }
        let mut h = self.encode_phonemes(g, ids)?;
        if let Some(s) = styles {
            let st = replicate_styles(g, s, subword_of)?;
            h = g.add(h, st);
        }
        let targets = match mode {
            Mode::TeacherForced(t) => Some((t.pitch, t.energy)),
            Mode::FreeRunning => None,
        };
        let (h, pitch_z, energy_z, log_d) = self.variance_adapt(g, h, targets)?;
        let durations = match mode {
            Mode::TeacherForced(t) => {
                if t.durations.len() != ids.len() {
                    return Err(Error::Shape("duration targets vs phonemes".into()));
                }
                t.durations.to_vec()
            }
            Mode::FreeRunning => {
                let logs = g.value(log_d).data().to_vec();
                let mut d: Vec<usize> = logs.iter().map(|&l| frames_from_log_duration(l)).collect();
                if d.iter().all(|&x| x == 0) {
                    // keep at least one frame so the decoder has input
                    let best = (0..logs.len())
                        .max_by(|&a, &b| logs[a].total_cmp(&logs[b]))
                        .unwrap_or(0);
                    d[best] = 1;
                }
                d
            }
        };
        let frames = length_regulate(g, h, &durations)?;
        let mel = self.decode_mel(g, frames);
        Ok(AcousticVars {
            mel,
            pitch_z,
            energy_z,
            log_duration: log_d,
            durations,
        })
    }

    pub fn predictions(&self, g: &Graph, v: &AcousticVars) -> (MelPrediction, VariancePredictions) {
        let pitch = g
            .value(v.pitch_z)
            .data()
            .iter()
            .map(|&z| Self::denormalize(self.cfg.pitch_stats, z))
            .collect();
        let energy = g
            .value(v.energy_z)
            .data()
            .iter()
            .map(|&z| Self::denormalize(self.cfg.energy_stats, z))
            .collect();
        (
            MelPrediction {
                mel: g.value(v.mel).clone(),
                durations_rounded: v.durations.clone(),
            },
            VariancePredictions {
                pitch,
                energy,
                log_duration: g.value(v.log_duration).data().to_vec(),
            },
        )
    }
}

pub fn replicate_styles(g: &mut Graph, styles: &StyleNodes, subword_of: &[usize]) -> Result<Var> {
    let n_sub = g.value(styles.s_w).rows();
    if let Some(&bad) = subword_of.iter().find(|&&i| i >= n_sub) {
        return Err(Error::Shape(format!(
            "subword index {bad} out of range for {n_sub} subwords"
        )));
    }
    let per_phone = g.gather_rows(styles.s_w, subword_of);
    let coarse = g.add(styles.s_g, styles.s_s);
    Ok(g.add_row(per_phone, coarse))
}

/// Repeats row `p` `durations[p]` times.
pub fn length_regulate(g: &mut Graph, hidden: Var, durations: &[usize]) -> Result<Var> {
    if durations.len() != g.value(hidden).rows() {
        return Err(Error::Shape(format!(
            "{} durations for {} phonemes",
            durations.len(),
            g.value(hidden).rows()
        )));
    }
    if durations.iter().all(|&d| d == 0) {
        return Err(Error::Empty("all durations are zero".into()));
    }
    let idx: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(p, &d)| std::iter::repeat_n(p, d))
        .collect();
    Ok(g.gather_rows(hidden, &idx))
}
