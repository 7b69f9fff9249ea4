//! Objective metrics (DTW alignment, MCD, F0/energy RMSE, duration MSE),
//! attention dumps and linear probes of extracted styles against planted
//! factors.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AlignedUtterance, ContextWindow, Corpus, PlantedFactors};
use crate::error::{Error, Result};
use crate::extractor::{Level, StyleEmbeddings};
use crate::model::Model;
use crate::synthesis::{styles_for, synthesize_with_styles, StyleSource};
use crate::tensor::Tensor;
use crate::training::style_loss;

pub const DEFAULT_CEPSTRA: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

fn frame_distance(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
    a.row_slice(i)
        .iter()
        .zip(b.row_slice(j))
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Minimal-cost monotone alignment under per-frame Euclidean distance.
/// Ties prefer the diagonal step, then the step advancing `a`.
pub fn dtw_align(a: &Tensor, b: &Tensor) -> Result<DtwPath> {
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::Empty("dtw needs at least one frame on each side".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("{} vs {} bins", a.cols(), b.cols())));
    }
    let idx = |i: usize, j: usize| i * m + j;
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(a, i, b, j);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[idx(i - 1, j - 1)]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = best + d;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            acc[idx(i - 1, j - 1)]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath {
        pairs,
        cost: acc[idx(n - 1, m - 1)],
    })
}

/// Orthonormal DCT-II coefficients `c_1..=c_k` of one log-mel frame.
pub fn mel_cepstrum(frame: &[f64], k: usize) -> Vec<f64> {
    let n = frame.len() as f64;
    (1..=k)
        .map(|q| {
            let s: f64 = frame
                .iter()
                .enumerate()
                .map(|(i, &x)| x * (std::f64::consts::PI * q as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            s * (2.0 / n).sqrt()
        })
        .collect()
}

fn check_path(path: &DtwPath, n: usize, m: usize) -> Result<()> {
    if path.pairs.iter().any(|&(i, j)| i >= n || j >= m) || path.pairs.is_empty() {
        return Err(Error::Invalid(format!("path does not fit {n}×{m} frames")));
    }
    Ok(())
}

/// Mean over aligned pairs of `(10/ln 10)·sqrt(2·Σ_{k=1..K}(c_k − c'_k)²)`.
pub fn mcd(a: &Tensor, b: &Tensor, path: &DtwPath, k: usize) -> Result<f64> {
    if k >= a.cols() {
        return Err(Error::Invalid(format!(
            "{k} cepstra need more than {} mel bins",
            a.cols()
        )));
    }
    check_path(path, a.rows(), b.rows())?;
    let ca: Vec<Vec<f64>> = (0..a.rows()).map(|i| mel_cepstrum(a.row_slice(i), k)).collect();
    let cb: Vec<Vec<f64>> = (0..b.rows()).map(|j| mel_cepstrum(b.row_slice(j), k)).collect();
    let scale = 10.0 / std::f64::consts::LN_10;
    let total: f64 = path
        .pairs
        .iter()
        .map(|&(i, j)| {
            let s: f64 = ca[i].iter().zip(&cb[j]).map(|(x, y)| (x - y).powi(2)).sum();
            scale * (2.0 * s).sqrt()
        })
        .sum();
    Ok(total / path.pairs.len() as f64)
}

fn path_rmse(a: &[f64], b: &[f64], path: &DtwPath, skip_unvoiced: bool) -> Result<f64> {
    check_path(path, a.len(), b.len())?;
    let (mut s, mut n) = (0.0, 0usize);
    for &(i, j) in &path.pairs {
        if skip_unvoiced && a[i] == 0.0 && b[j] == 0.0 {
            continue;
        }
        s += (a[i] - b[j]).powi(2);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
}

/// RMSE in Hz over aligned pairs, skipping pairs where both are unvoiced.
pub fn f0_rmse(a: &[f64], b: &[f64], path: &DtwPath) -> Result<f64> {
    path_rmse(a, b, path, true)
}

pub fn energy_rmse(a: &[f64], b: &[f64], path: &DtwPath) -> Result<f64> {
    path_rmse(a, b, path, false)
}

pub fn log_durations(frames: &[usize]) -> Vec<f64> {
    frames.iter().map(|&d| (d as f64 + 1.0).ln()).collect()
}

/// MSE between log-duration sequences.
pub fn duration_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} vs {} durations", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

// ---- reports ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub document_id: String,
    pub sentence_index: usize,
    pub mcd: f64,
    pub f0_rmse: f64,
    pub energy_rmse: f64,
    pub duration_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub style_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub utterances: usize,
    pub mcd: f64,
    pub f0_rmse: f64,
    pub energy_rmse: f64,
    pub duration_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub style_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `copy`, `extracted` or `predicted`.
    pub source: String,
    pub utterances: Vec<UtteranceMetrics>,
    pub aggregate: AggregateMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Ground truth against itself.
    Copy,
    Synthesized(StyleSource),
}

/// Metrics of one predicted utterance against ground truth.
pub fn utterance_metrics(
    truth: &AlignedUtterance,
    mel: &Tensor,
    frame_pitch: &[f64],
    frame_energy: &[f64],
    log_duration: &[f64],
) -> Result<UtteranceMetrics> {
    if frame_pitch.len() != mel.rows() || frame_energy.len() != mel.rows() {
        return Err(Error::Shape("frame-level pitch/energy must match the mel".into()));
    }
    let path = dtw_align(&truth.mel, mel)?;
    Ok(UtteranceMetrics {
        document_id: truth.document_id.clone(),
        sentence_index: truth.sentence_index,
        mcd: mcd(
            &truth.mel,
            mel,
            &path,
            DEFAULT_CEPSTRA.min(truth.mel.cols().saturating_sub(1)),
        )?,
        f0_rmse: f0_rmse(&truth.pitch_frame, frame_pitch, &path)?,
        energy_rmse: energy_rmse(&truth.energy_frame, frame_energy, &path)?,
        duration_mse: duration_mse(log_duration, &log_durations(&truth.durations))?,
        style_mse: None,
    })
}

/// Evaluates the given utterances. Copy mode needs no model.
pub fn evaluate(
    model: Option<&Model>,
    corpus: &Corpus,
    keys: &[(String, usize)],
    mode: EvalMode,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(keys.len());
    for (doc, idx) in keys {
        let u = corpus.utterance(doc, *idx)?;
        let row = match mode {
            EvalMode::Copy => {
                utterance_metrics(u, &u.mel, &u.pitch_frame, &u.energy_frame, &log_durations(&u.durations))?
            }
            EvalMode::Synthesized(source) => {
                let model = model.ok_or_else(|| Error::Invalid("synthesis needs a model".into()))?;
                let styles = styles_for(model, corpus, doc, *idx, source)?;
                let s = synthesize_with_styles(model, u, &styles)?;
                let mut row = utterance_metrics(u, &s.mel, &s.frame_pitch(), &s.frame_energy(), &s.log_duration)?;
                if source == StyleSource::Predicted {
                    let target = model.extract_styles(corpus, doc, *idx)?;
                    row.style_mse = Some(style_loss(&styles, &target)?.iter().sum());
                }
                row
            }
        };
        rows.push(row);
    }
    let source = match mode {
        EvalMode::Copy => "copy".to_string(),
        EvalMode::Synthesized(StyleSource::Extracted) => "extracted".to_string(),
        EvalMode::Synthesized(StyleSource::Predicted) => "predicted".to_string(),
    };
    Ok(MetricReport {
        source,
        aggregate: aggregate(&rows),
        utterances: rows,
    })
}

pub fn aggregate(rows: &[UtteranceMetrics]) -> AggregateMetrics {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&UtteranceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let style: Vec<f64> = rows.iter().filter_map(|r| r.style_mse).collect();
    AggregateMetrics {
        utterances: rows.len(),
        mcd: mean(&|r| r.mcd),
        f0_rmse: mean(&|r| r.f0_rmse),
        energy_rmse: mean(&|r| r.energy_rmse),
        duration_mse: mean(&|r| r.duration_mse),
        style_mse: if style.is_empty() {
            None
        } else {
            Some(style.iter().sum::<f64>() / style.len() as f64)
        },
    }
}

impl MetricReport {
    /// One `utterance` record per line, then one `aggregate` record.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Tagged<'a, T> {
            kind: &'a str,
            source: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut out = String::new();
        for r in &self.utterances {
            let line = Tagged {
                kind: "utterance",
                source: &self.source,
                body: r,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        let line = Tagged {
            kind: "aggregate",
            source: &self.source,
            body: &self.aggregate,
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        let mut s = format!(
            "source: {}\nutterances: {}\nmcd_db: {:.4}\nf0_rmse_hz: {:.4}\nenergy_rmse: {:.4}\nduration_mse: {:.4}\n",
            self.source, a.utterances, a.mcd, a.f0_rmse, a.energy_rmse, a.duration_mse
        );
        if let Some(v) = a.style_mse {
            s.push_str(&format!("style_mse: {v:.4}\n"));
        }
        s
    }

    /// Writes `<stem>.jsonl` and `<stem>.txt`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let j = stem.with_extension("jsonl");
        fs::write(&j, self.to_jsonl()).map_err(|e| Error::io(&j, e))?;
        let t = stem.with_extension("txt");
        fs::write(&t, self.summary()).map_err(|e| Error::io(&t, e))
    }
}

// ---- attention ----

/// Inter-sentence attention for `samples` randomly chosen sentences whose
/// window is complete (all 2L+1 sentences present).
pub fn dump_attention(model: &Model, corpus: &Corpus, samples: usize, window_size: usize, seed: u64) -> Result<Tensor> {
    let l = model.predictor_radius();
    if window_size != 2 * l + 1 {
        return Err(Error::Invalid(format!(
            "window size {window_size} does not match the model's {}",
            2 * l + 1
        )));
    }
    let mut candidates = Vec::new();
    for (d, doc) in corpus.documents.iter().enumerate() {
        let n = doc.utterances.len();
        for p in l..n.saturating_sub(l) {
            candidates.push((d, p));
        }
    }
    if candidates.is_empty() {
        return Err(Error::Empty(format!(
            "no sentence has a complete window of {window_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<(usize, usize)> = if samples <= candidates.len() {
        candidates.choose_multiple(&mut rng, samples).copied().collect()
    } else {
        (0..samples)
            .map(|_| *candidates.choose(&mut rng).expect("non-empty"))
            .collect()
    };
    let mut data = Vec::with_capacity(samples * window_size);
    for (d, p) in chosen {
        let w = ContextWindow::around(&corpus.documents[d].utterances, p, l);
        data.extend(model.inter_sentence_attention(&w)?);
    }
    Tensor::matrix(samples, window_size, data)
}

/// Mean attention mass on the current sentence and its direct neighbours.
pub fn near_mass(attention: &Tensor) -> f64 {
    let w = attention.cols();
    let c = w / 2;
    let lo = c.saturating_sub(1);
    let hi = (c + 1).min(w - 1);
    let rows = attention.rows().max(1) as f64;
    (0..attention.rows())
        .map(|r| attention.row_slice(r)[lo..=hi].iter().sum::<f64>())
        .sum::<f64>()
        / rows
}

// ---- probes ----

/// Solves `(XᵀX + ridge·I) w = Xᵀy` with a bias column appended to `x`.
pub fn fit_linear_probe(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape("probe needs matching non-empty samples".into()));
    }
    let d = x[0].len() + 1;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (row, &t) in x.iter().zip(y) {
        let r: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..d {
            b[i] += r[i] * t;
            for j in 0..d {
                a[i * d + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d - 1 {
        a[i * d + i] += ridge;
    }
    solve(&mut a, &mut b, d)?;
    Ok(b)
}

/// Gaussian elimination with partial pivoting; solution left in `b`.
fn solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty");
        if a[piv * n + col].abs() < 1e-12 {
            return Err(Error::Invalid("singular probe system".into()));
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * b[k]).sum();
        b[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(())
}

pub fn probe_predict(w: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Sign of the document's chapter pitch offset.
    Chapter,
    /// Sentence tempo/energy factor (sign for accuracy).
    SentenceFactor,
    /// Subword stress flag.
    Stress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub features: Level,
    pub target: ProbeTarget,
    /// Held-out sign accuracy.
    pub accuracy: f64,
    /// Majority-class accuracy on the held-out side.
    pub majority: f64,
    pub r2: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// One probe sample: features, real-valued target, and whether it is held out.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub x: Vec<f64>,
    pub y: f64,
    pub test: bool,
}

/// Ridge fit on the training samples; accuracy is sign agreement on the
/// held-out ones.
pub fn run_probe(samples: &[ProbeSample], ridge: f64) -> Result<(f64, f64, f64, usize, usize)> {
    let (train, test): (Vec<&ProbeSample>, Vec<&ProbeSample>) = samples.iter().partition(|s| !s.test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("probe split has an empty side".into()));
    }
    let x: Vec<Vec<f64>> = train.iter().map(|s| s.x.clone()).collect();
    let y: Vec<f64> = train.iter().map(|s| s.y).collect();
    let w = fit_linear_probe(&x, &y, ridge)?;
    let preds: Vec<f64> = test.iter().map(|s| probe_predict(&w, &s.x)).collect();
    let n = test.len() as f64;
    let correct = test
        .iter()
        .zip(&preds)
        .filter(|(s, p)| (s.y > 0.0) == (**p > 0.0))
        .count();
    let pos = test.iter().filter(|s| s.y > 0.0).count() as f64;
    let mean = test.iter().map(|s| s.y).sum::<f64>() / n;
    let ss_tot: f64 = test.iter().map(|s| (s.y - mean).powi(2)).sum();
    let ss_res: f64 = test.iter().zip(&preds).map(|(s, p)| (s.y - p).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    Ok((correct as f64 / n, pos.max(n - pos) / n, r2, train.len(), test.len()))
}

pub const PROBE_RIDGE: f64 = 1e-3;

/// Held-out sentences for probes: every fourth utterance in corpus order.
pub fn probe_is_test(ordinal: usize) -> bool {
    ordinal % 4 == 3
}

/// Linear probes from each extracted style level to each planted factor.
/// Sentence-level targets use one sample per sentence for the global and
/// sentence features and one per subword row for subword features; the
/// stress target uses one sample per subword (coarser styles repeated).
pub fn scale_separation_probe(
    corpus: &Corpus,
    styles: &[((String, usize), StyleEmbeddings)],
    factors: &PlantedFactors,
) -> Result<Vec<ProbeResult>> {
    let mut results = Vec::new();
    for target in [ProbeTarget::Chapter, ProbeTarget::SentenceFactor, ProbeTarget::Stress] {
        for level in Level::ALL {
            let mut samples = Vec::new();
            for (ordinal, ((doc, idx), s)) in styles.iter().enumerate() {
                let test = probe_is_test(ordinal);
                let df = factors
                    .document(doc)
                    .ok_or_else(|| Error::UnknownDocument(doc.clone()))?;
                let sf = factors.sentence(doc, *idx).ok_or_else(|| Error::UnknownUtterance {
                    document_id: doc.clone(),
                    sentence_index: *idx,
                })?;
                let n_sub = corpus.utterance(doc, *idx)?.n_subwords();
                let sentence_y = match target {
                    ProbeTarget::Chapter => df.chapter_offset_hz.signum(),
                    ProbeTarget::SentenceFactor => sf.sentence_factor,
                    ProbeTarget::Stress => 0.0,
                };
                let per_subword = level == Level::Subword || target == ProbeTarget::Stress;
                if per_subword {
                    for i in 0..n_sub {
                        let x = match level {
                            Level::Global => s.s_g.clone(),
                            Level::Sentence => s.s_s.clone(),
                            Level::Subword => s.s_w.row_slice(i).to_vec(),
                        };
                        let y = if target == ProbeTarget::Stress {
                            if sf.subword_stress[i] {
                                1.0
                            } else {
                                -1.0
                            }
                        } else {
                            sentence_y
                        };
                        samples.push(ProbeSample { x, y, test });
                    }
                } else {
                    let x = if level == Level::Global {
                        s.s_g.clone()
                    } else {
                        s.s_s.clone()
                    };
                    samples.push(ProbeSample { x, y: sentence_y, test });
                }
            }
            let (accuracy, majority, r2, n_train, n_test) = run_probe(&samples, PROBE_RIDGE)?;
            results.push(ProbeResult {
                features: level,
                target,
                accuracy,
                majority,
                r2,
                n_train,
                n_test,
            });
        }
    }
    Ok(results)
}

/// Extracted styles of every utterance in corpus order.
pub fn extracted_styles(model: &Model, corpus: &Corpus) -> Result<Vec<((String, usize), StyleEmbeddings)>> {
    corpus
        .utterances()
        .map(|u| {
            let s = styles_for(model, corpus, &u.document_id, u.sentence_index, StyleSource::Extracted)?;
            Ok(((u.document_id.clone(), u.sentence_index), s))
        })
        .collect()
}

/// Held-out per-level style loss of the predictor and of the per-level mean
/// predictor (the variance of the held-out targets).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleLossComparison {
    pub predictor: [f64; 3],
    pub mean_baseline: [f64; 3],
}

pub fn held_out_style_loss(
    predictions: &[StyleEmbeddings],
    targets: &[StyleEmbeddings],
) -> Result<StyleLossComparison> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::Shape("need matching non-empty prediction/target lists".into()));
    }
    let n = targets.len() as f64;
    let mut pred = [0.0; 3];
    for (p, t) in predictions.iter().zip(targets) {
        let l = style_loss(p, t)?;
        for k in 0..3 {
            pred[k] += l[k] / n;
        }
    }
    let clamped: Vec<StyleEmbeddings> = targets.iter().map(crate::training::clamp_styles).collect();
    let var_of = |rows: Vec<&[f64]>| -> f64 {
        let d = rows[0].len();
        let m = rows.len() as f64;
        let mut total = 0.0;
        for c in 0..d {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / m;
            total += rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / m;
        }
        total / d as f64
    };
    let g = var_of(clamped.iter().map(|t| t.s_g.as_slice()).collect());
    let s = var_of(clamped.iter().map(|t| t.s_s.as_slice()).collect());
    let w_rows: Vec<&[f64]> = clamped
        .iter()
        .flat_map(|t| (0..t.s_w.rows()).map(move |r| t.s_w.row_slice(r)))
        .collect();
    let w = if w_rows.is_empty() { 0.0 } else { var_of(w_rows) };
    Ok(StyleLossComparison {
        predictor: pred,
        mean_baseline: [g, s, w],
    })
}
