//! Three-stage schedule: (1) extractor + acoustic model with one extractor
//! level trainable at a time, (2) predictor distillation against extracted
//! styles, (3) joint predictor + acoustic fine-tuning at a reduced rate.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticVars, Mode, Targets};
use crate::autograd::{Graph, Var};
use crate::context::ContextVars;
use crate::corpus::{AlignedUtterance, ContextWindow, Corpus};
use crate::error::{Error, Result};
use crate::extractor::{Level, StyleEmbeddings, StyleExtractor};
use crate::model::{Model, ModelSpec, PredictorMode};
use crate::params::{load_params, save_params, ParamId, ParamStore};
use crate::predictor::{PreviousStyles, StyleNodes, StylePredictor};
use crate::semantic::TrainableEmbedder;
use crate::tensor::Tensor;

/// Extracted targets are clamped into the open tanh range before regression.
pub const TARGET_CLAMP: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MelLoss {
    #[default]
    Mae,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// The `[train]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_per_level: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub stage3_lr_scale: f64,
    /// λ, weight of the style term in stage 3.
    pub style_loss_weight: f64,
    pub seed: u64,
    pub mel_loss: MelLoss,
    /// Whether not-yet-trained extractor levels feed their (random) styles
    /// into the acoustic model during stage 1. When false they contribute zero.
    pub stage1_include_inactive: bool,
    /// Let stages 2 and 3 update a trainable semantic provider.
    pub train_semantic: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Drop probability on the context encoder's semantic inputs while
    /// training the predictor (stages 2 and 3).
    pub context_dropout: f64,
    /// Sentences per sampled paragraph in AR mode.
    pub ar_paragraph: usize,
    /// Fraction of documents held out (taken from the end of the corpus).
    pub test_fraction: f64,
    /// Write a resumable checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            stage1_per_level: 600,
            stage2: 200,
            stage3: 200,
            adam: AdamConfig::default(),
            warmup_steps: 100,
            base_lr: 2e-3,
            stage3_lr_scale: 0.3,
            style_loss_weight: 1.0,
            seed: 0,
            mel_loss: MelLoss::Mae,
            stage1_include_inactive: false,
            train_semantic: false,
            grad_clip: 1.0,
            context_dropout: 0.5,
            ar_paragraph: 4,
            test_fraction: 0.25,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("stage1_per_level", self.stage1_per_level),
            ("stage2", self.stage2),
            ("stage3", self.stage3),
            ("warmup_steps", self.warmup_steps),
            ("ar_paragraph", self.ar_paragraph),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name}"), "must be positive"));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        if !(self.stage3_lr_scale > 0.0) {
            return Err(Error::config("train.stage3_lr_scale", "must be positive"));
        }
        if !(self.style_loss_weight >= 0.0) {
            return Err(Error::config("train.style_loss_weight", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.context_dropout) {
            return Err(Error::config("train.context_dropout", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("train.test_fraction", "must be in [0, 1)"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::config("train.adam", "betas in [0, 1), epsilon positive"));
        }
        Ok(())
    }

    pub fn stage1_steps(&self) -> usize {
        3 * self.stage1_per_level
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps() + self.stage2 + self.stage3
    }

    /// Extractor level trainable at stage-1 step `step` (0-based).
    pub fn active_level(&self, step: usize) -> Level {
        Level::ALL[(step / self.stage1_per_level).min(2)]
    }
}

/// Linear warmup to `base` over `warmup` steps, then `base·sqrt(warmup/s)`.
/// `s` counts updates from 1.
pub fn learning_rate(base: f64, warmup: usize, s: usize) -> f64 {
    let s = s.max(1) as f64;
    let w = warmup.max(1) as f64;
    if s <= w {
        base * s / w
    } else {
        base * (w / s).sqrt()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One Adam update over the given gradients. Parameters that are frozen or
/// absent from `grads` are untouched, as are their moment estimates.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for (_, g) in grads {
        if let Some((index, value)) = g.first_non_finite() {
            return Err(Error::NonFinite { index, value });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let p = store.get_mut(*id);
        if !p.trainable {
            continue;
        }
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.value.data_mut());
        for k in 0..g.len() {
            let gk = g.data()[k];
            md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * gk;
            vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = md[k] / c1;
            let vhat = vd[k] / c2;
            pd[k] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

// ---- losses ----

/// Named loss terms. `total()` is the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub mel: f64,
    pub pitch: f64,
    pub energy: f64,
    pub duration: f64,
    pub style_global: f64,
    pub style_sentence: f64,
    pub style_subword: f64,
    /// λ applied to the three style terms.
    pub style_weight: f64,
}

impl LossComponents {
    pub fn acoustic(&self) -> f64 {
        self.mel + self.pitch + self.energy + self.duration
    }

    pub fn style(&self) -> f64 {
        self.style_global + self.style_sentence + self.style_subword
    }

    pub fn total(&self) -> f64 {
        self.acoustic() + self.style_weight * self.style()
    }

    fn add_scaled(&mut self, o: &LossComponents, s: f64) {
        self.mel += s * o.mel;
        self.pitch += s * o.pitch;
        self.energy += s * o.energy;
        self.duration += s * o.duration;
        self.style_global += s * o.style_global;
        self.style_sentence += s * o.style_sentence;
        self.style_subword += s * o.style_subword;
        self.style_weight = o.style_weight;
    }
}

/// Values compared by the acoustic loss, in the units the loss is taken in
/// (pitch and energy normalized, durations as `log(frames + 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub mel: Tensor,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub log_duration: Vec<f64>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn acoustic_loss(pred: &LossTerms, truth: &LossTerms, mel_loss: MelLoss) -> Result<LossComponents> {
    if pred.mel.shape() != truth.mel.shape()
        || pred.pitch.len() != truth.pitch.len()
        || pred.energy.len() != truth.energy.len()
        || pred.log_duration.len() != truth.log_duration.len()
    {
        return Err(Error::Shape("acoustic loss: prediction and truth shapes differ".into()));
    }
    let n = pred.mel.len().max(1) as f64;
    let mel = pred
        .mel
        .data()
        .iter()
        .zip(truth.mel.data())
        .map(|(a, b)| match mel_loss {
            MelLoss::Mae => (a - b).abs(),
            MelLoss::Mse => (a - b).powi(2),
        })
        .sum::<f64>()
        / n;
    Ok(LossComponents {
        mel,
        pitch: mse(&pred.pitch, &truth.pitch),
        energy: mse(&pred.energy, &truth.energy),
        duration: mse(&pred.log_duration, &truth.log_duration),
        ..LossComponents::default()
    })
}

pub fn clamp_styles(s: &StyleEmbeddings) -> StyleEmbeddings {
    let c = |v: f64| v.clamp(-TARGET_CLAMP, TARGET_CLAMP);
    StyleEmbeddings {
        s_g: s.s_g.iter().map(|&v| c(v)).collect(),
        s_s: s.s_s.iter().map(|&v| c(v)).collect(),
        s_w: s.s_w.map(c),
    }
}

/// Per-level MSE with the target clamped: `[global, sentence, subword]`.
/// The subword term is the mean over subwords of each row's MSE.
pub fn style_loss(pred: &StyleEmbeddings, target: &StyleEmbeddings) -> Result<[f64; 3]> {
    if pred.s_g.len() != target.s_g.len()
        || pred.s_s.len() != target.s_s.len()
        || pred.s_w.shape() != target.s_w.shape()
    {
        return Err(Error::Shape("style loss: prediction and target shapes differ".into()));
    }
    let t = clamp_styles(target);
    Ok([
        mse(&pred.s_g, &t.s_g),
        mse(&pred.s_s, &t.s_s),
        mse(pred.s_w.data(), t.s_w.data()),
    ])
}

fn mean_sq_diff(g: &mut Graph, a: Var, target: Tensor) -> Var {
    if target.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let t = g.constant(target);
    let d = g.sub(a, t);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Graph form of [`style_loss`]; `target` must already be clamped.
pub fn style_loss_var(g: &mut Graph, pred: &StyleNodes, target: &StyleEmbeddings) -> Result<[Var; 3]> {
    if g.value(pred.s_w).shape() != target.s_w.shape() || g.value(pred.s_g).len() != target.s_g.len() {
        return Err(Error::Shape("style loss: prediction and target shapes differ".into()));
    }
    Ok([
        mean_sq_diff(g, pred.s_g, Tensor::row(target.s_g.clone())),
        mean_sq_diff(g, pred.s_s, Tensor::row(target.s_s.clone())),
        mean_sq_diff(g, pred.s_w, target.s_w.clone()),
    ])
}

/// Truth terms of one utterance in loss units.
pub fn truth_terms(model: &Model, u: &AlignedUtterance) -> LossTerms {
    LossTerms {
        mel: u.mel.clone(),
        pitch: model.acoustic.normalized_pitch(&u.phone_pitch()),
        energy: model.acoustic.normalized_energy(&u.phone_energy()),
        log_duration: u.durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect(),
    }
}

/// Graph form of [`acoustic_loss`]: `[mel, pitch, energy, duration]`.
pub fn acoustic_loss_var(g: &mut Graph, vars: &AcousticVars, truth: &LossTerms, mel_loss: MelLoss) -> Result<[Var; 4]> {
    if g.value(vars.mel).shape() != truth.mel.shape() {
        return Err(Error::Shape(format!(
            "predicted mel {:?} vs truth {:?}",
            g.value(vars.mel).shape(),
            truth.mel.shape()
        )));
    }
    let n = truth.pitch.len();
    let t = g.constant(truth.mel.clone());
    let d = g.sub(vars.mel, t);
    let e = match mel_loss {
        MelLoss::Mae => g.abs(d),
        MelLoss::Mse => g.square(d),
    };
    let mel = g.mean_all(e);
    let col = |v: &[f64]| Tensor::matrix(n, 1, v.to_vec());
    let pitch = mean_sq_diff(g, vars.pitch_z, col(&truth.pitch)?);
    let energy = mean_sq_diff(g, vars.energy_z, col(&truth.energy)?);
    let duration = mean_sq_diff(g, vars.log_duration, col(&truth.log_duration)?);
    Ok([mel, pitch, energy, duration])
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

// ---- data split and targets ----

/// Document-level split: the last `ceil(n·test_fraction)` documents are held
/// out (none when the corpus has a single document).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(corpus: &Corpus, test_fraction: f64) -> Self {
        let n = corpus.n_documents();
        let mut k = (n as f64 * test_fraction).ceil() as usize;
        if n <= 1 {
            k = 0;
        }
        k = k.min(n.saturating_sub(1));
        Self {
            train: (0..n - k).collect(),
            test: (n - k..n).collect(),
        }
    }

    pub fn documents(&self, test: bool) -> &[usize] {
        if test {
            &self.test
        } else {
            &self.train
        }
    }

    /// `(document index, position)` of every utterance on one side.
    pub fn utterances(&self, corpus: &Corpus, test: bool) -> Vec<(usize, usize)> {
        self.documents(test)
            .iter()
            .flat_map(|&d| (0..corpus.documents[d].utterances.len()).map(move |p| (d, p)))
            .collect()
    }
}

pub type StyleTargets = BTreeMap<(usize, usize), StyleEmbeddings>;

/// Clamped extractor outputs for the given utterances.
pub fn extract_targets(model: &Model, corpus: &Corpus, keys: &[(usize, usize)]) -> Result<StyleTargets> {
    let mut out = BTreeMap::new();
    for &(d, p) in keys {
        let w = ContextWindow::around(&corpus.documents[d].utterances, p, model.radius());
        let s = model.extractor.extract(&model.store, &w)?;
        out.insert((d, p), clamp_styles(&s));
    }
    Ok(out)
}

// ---- checkpoints and logs ----

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: u8,
    /// Steps of `stage` already taken.
    pub step: usize,
    pub complete: bool,
    pub adam_t: u64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn moments_store(map: &BTreeMap<String, Tensor>) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, v) in map {
        s.add(k.clone(), v.clone());
    }
    s
}

fn moments_map(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

pub fn save_checkpoint(dir: &Path, model: &Model, adam: &AdamState, meta: &CheckpointMeta) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("model.json"), &model.spec)?;
    write_json(&dir.join("state.json"), meta)?;
    save_params(&model.store, dir)?;
    save_params(&moments_store(&adam.m), &dir.join("adam_m"))?;
    save_params(&moments_store(&adam.v), &dir.join("adam_v"))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let spec: ModelSpec =
        serde_json::from_str(&read("model.json")?).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&read("state.json")?).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let mut model = Model::new(&spec)?;
    let stored = load_params(dir)?;
    let n = model.store.load_values_from(&stored)?;
    if n != model.store.len() || n != stored.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} of {} parameters matched",
            dir.display(),
            n,
            model.store.len()
        )));
    }
    let adam = AdamState {
        t: meta.adam_t,
        m: moments_map(&load_params(&dir.join("adam_m"))?),
        v: moments_map(&load_params(&dir.join("adam_v"))?),
    };
    Ok(Checkpoint { model, adam, meta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub level: Option<Level>,
    pub lr: f64,
    pub total: f64,
    pub mel: f64,
    pub pitch: f64,
    pub energy: f64,
    pub duration: f64,
    pub style_global: f64,
    pub style_sentence: f64,
    pub style_subword: f64,
    /// λ-weighted style term included in `total`.
    pub style: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("{}: {e}", path.display()))))
        .collect()
}

/// Output layout of a training run.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(name)
    }

    pub fn stage(&self, stage: u8) -> PathBuf {
        self.ckpt(&format!("stage{stage}"))
    }

    pub fn resume(&self) -> PathBuf {
        self.ckpt("resume")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }
}

/// Keeps only records that precede `(stage, step)`, so a resumed run
/// appends exactly where the checkpoint left off.
fn truncate_log(path: &Path, stage: u8, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<LogRecord> = read_log(path)?
        .into_iter()
        .filter(|r| r.stage < stage || (r.stage == stage && r.step < step))
        .collect();
    let mut text = String::new();
    for r in kept {
        text.push_str(&serde_json::to_string(&r).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, r: &LogRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(r).expect("serializable");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

// ---- trainable sets ----

/// Sets exactly the parameters that train in `stage` (and `level` for
/// stage 1).
pub fn configure_trainable(store: &mut ParamStore, stage: u8, level: Level, cfg: &TrainConfig) {
    store.freeze_all();
    match stage {
        1 => {
            store.set_trainable_prefix("acoustic.", true);
            store.set_trainable_prefix(&level.prefix(), true);
        }
        _ => {
            store.set_trainable_prefix("context.", true);
            store.set_trainable_prefix(&format!("{}.", StylePredictor::PREFIX), true);
            if cfg.train_semantic {
                store.set_trainable_prefix(TrainableEmbedder::PREFIX, true);
            }
            if stage == 3 {
                store.set_trainable_prefix("acoustic.", true);
            }
        }
    }
}

// ---- the step loop ----

fn batch_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 48) | step as u64);
    rng
}

struct Item {
    loss: Var,
    parts: LossComponents,
}

fn teacher_targets(u: &AlignedUtterance) -> (Vec<f64>, Vec<f64>) {
    (u.phone_pitch(), u.phone_energy())
}

fn synth_teacher_forced(
    model: &Model,
    g: &mut Graph,
    u: &AlignedUtterance,
    styles: &StyleNodes,
) -> Result<AcousticVars> {
    let ids = model.spec.acoustic.phoneme_ids(&u.phonemes)?;
    let (pitch, energy) = teacher_targets(u);
    let t = Targets {
        durations: &u.durations,
        pitch: &pitch,
        energy: &energy,
    };
    model
        .acoustic
        .synthesize(g, &ids, &u.subword_of(), Some(styles), Mode::TeacherForced(&t))
}

fn acoustic_item(
    model: &Model,
    g: &mut Graph,
    u: &AlignedUtterance,
    styles: &StyleNodes,
    mel_loss: MelLoss,
) -> Result<Item> {
    let vars = synth_teacher_forced(model, g, u, styles)?;
    let truth = truth_terms(model, u);
    let parts = acoustic_loss_var(g, &vars, &truth, mel_loss)?;
    let loss = sum_vars(g, &parts);
    Ok(Item {
        loss,
        parts: LossComponents {
            mel: g.value(parts[0]).data()[0],
            pitch: g.value(parts[1]).data()[0],
            energy: g.value(parts[2]).data()[0],
            duration: g.value(parts[3]).data()[0],
            ..LossComponents::default()
        },
    })
}

fn style_item(g: &mut Graph, pred: &StyleNodes, target: &StyleEmbeddings) -> Result<Item> {
    let parts = style_loss_var(g, pred, target)?;
    let loss = sum_vars(g, &parts);
    Ok(Item {
        loss,
        parts: LossComponents {
            style_global: g.value(parts[0]).data()[0],
            style_sentence: g.value(parts[1]).data()[0],
            style_subword: g.value(parts[2]).data()[0],
            style_weight: 1.0,
            ..LossComponents::default()
        },
    })
}

pub type StepHook<'a> = Box<dyn FnMut(&LogRecord, &ParamStore) + 'a>;

type ItemFn<'s, 'a> = dyn Fn(&Trainer<'a>, &Model, &mut Graph, &mut ChaCha8Rng, Level) -> Result<Item> + 's;

/// Shared mutable run state across stages.
pub struct Trainer<'a> {
    pub corpus: &'a Corpus,
    pub cfg: TrainConfig,
    pub dirs: RunDirs,
    pub split: Split,
    /// Invoked after every optimizer step with the new log record.
    pub on_step: Option<StepHook<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, cfg: TrainConfig, dirs: RunDirs) -> Result<Self> {
        cfg.validate()?;
        let split = Split::new(corpus, cfg.test_fraction);
        if split.train.is_empty() {
            return Err(Error::Empty("no training documents".into()));
        }
        fs::create_dir_all(&dirs.root).map_err(|e| Error::io(&dirs.root, e))?;
        Ok(Self {
            corpus,
            cfg,
            dirs,
            split,
            on_step: None,
        })
    }

    fn sample_utterance(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let d = self.split.train[rng.gen_range(0..self.split.train.len())];
        let p = rng.gen_range(0..self.corpus.documents[d].utterances.len());
        (d, p)
    }

    /// A run of up to `ar_paragraph` consecutive sentences from one document.
    fn sample_paragraph(&self, rng: &mut ChaCha8Rng) -> (usize, std::ops::Range<usize>) {
        let d = self.split.train[rng.gen_range(0..self.split.train.len())];
        let n = self.corpus.documents[d].utterances.len();
        let len = self.cfg.ar_paragraph.min(n);
        let start = rng.gen_range(0..=n - len);
        (d, start..start + len)
    }

    fn window(&self, radius: usize, d: usize, p: usize) -> ContextWindow<'a> {
        ContextWindow::around(&self.corpus.documents[d].utterances, p, radius)
    }

    /// Runs steps `[from, to)` of `stage`; `item` builds one batch element.
    #[allow(clippy::too_many_arguments)]
    fn run_steps(
        &mut self,
        model: &mut Model,
        adam: &mut AdamState,
        stage: u8,
        from: usize,
        to: usize,
        lr_scale: f64,
        item: &ItemFn<'_, 'a>,
    ) -> Result<()> {
        let mut level = None;
        for step in from..to {
            let active = if stage == 1 {
                Some(self.cfg.active_level(step))
            } else {
                None
            };
            if active != level || step == from {
                configure_trainable(&mut model.store, stage, active.unwrap_or(Level::Global), &self.cfg);
                level = active;
            }
            let mut rng = batch_rng(self.cfg.seed, stage, step);
            let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            let mut comps = LossComponents::default();
            let mut buffers = Vec::new();
            let scale = 1.0 / self.cfg.batch_size as f64;
            for _ in 0..self.cfg.batch_size {
                let mut g = Graph::training(&model.store);
                if stage > 1 && self.cfg.context_dropout > 0.0 {
                    g.set_dropout(self.cfg.context_dropout, rng.gen());
                }
                let it = item(self, model, &mut g, &mut rng, active.unwrap_or(Level::Global))?;
                let total = g.value(it.loss).data()[0];
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        stage,
                        step,
                        detail: format!("non-finite loss {total}"),
                    });
                }
                let scaled = g.scale(it.loss, scale);
                g.backward(scaled);
                for (id, t) in g.param_grads() {
                    match grads.get_mut(&id) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(id, t);
                        }
                    }
                }
                buffers.extend(g.take_buffer_updates());
                comps.add_scaled(&it.parts, scale);
            }
            for (id, value) in buffers {
                model.store.get_mut(id).value = value;
            }
            let mut grads: Vec<(ParamId, Tensor)> = grads.into_iter().collect();
            for (id, t) in &grads {
                if let Some((_, v)) = t.first_non_finite() {
                    return Err(Error::Divergence {
                        stage,
                        step,
                        detail: format!("non-finite gradient {v} in {}", model.store.get(*id).name),
                    });
                }
            }
            clip_grad_norm(&mut grads, self.cfg.grad_clip);
            let lr = lr_scale * learning_rate(self.cfg.base_lr, self.cfg.warmup_steps, step + 1);
            optimizer_step(&mut model.store, &grads, adam, &self.cfg.adam, lr)?;
            let record = LogRecord {
                stage,
                step,
                level: active,
                lr,
                total: comps.total(),
                mel: comps.mel,
                pitch: comps.pitch,
                energy: comps.energy,
                duration: comps.duration,
                style_global: comps.style_global,
                style_sentence: comps.style_sentence,
                style_subword: comps.style_subword,
                style: comps.style_weight * comps.style(),
            };
            append_log(&self.dirs.log(), &record)?;
            if let Some(f) = self.on_step.as_mut() {
                f(&record, &model.store);
            }
            let done = step + 1;
            if stage == 1 && done % self.cfg.stage1_per_level == 0 && done < self.cfg.stage1_steps() {
                let lvl = self.cfg.active_level(step);
                self.save(
                    model,
                    adam,
                    stage,
                    done,
                    false,
                    &self.dirs.ckpt(&format!("stage1_{}", lvl.name())),
                )?;
            }
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 && done < to {
                self.save(model, adam, stage, done, false, &self.dirs.resume())?;
            }
        }
        Ok(())
    }

    fn save(&self, model: &Model, adam: &AdamState, stage: u8, step: usize, complete: bool, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            version: 1,
            stage,
            step,
            complete,
            adam_t: adam.t,
            train: self.cfg.clone(),
        };
        save_checkpoint(dir, model, adam, &meta)
    }

    /// Starting point of a stage: a fresh optimizer at step 0, or the state
    /// of a mid-stage checkpoint of the same stage.
    fn start(&self, stage: u8, resume: Option<Checkpoint>, model: Model) -> Result<(Model, AdamState, usize)> {
        match resume {
            Some(c) if c.meta.stage == stage && !c.meta.complete => {
                truncate_log(&self.dirs.log(), stage, c.meta.step)?;
                Ok((c.model, c.adam, c.meta.step))
            }
            Some(c) => Err(Error::Checkpoint(format!(
                "resume checkpoint is stage {} step {} (complete: {}), not a partial stage {stage}",
                c.meta.stage, c.meta.step, c.meta.complete
            ))),
            None => {
                truncate_log(&self.dirs.log(), stage, 0)?;
                Ok((model, AdamState::default(), 0))
            }
        }
    }

    pub fn run_stage1(&mut self, spec: &ModelSpec, resume: Option<Checkpoint>) -> Result<Model> {
        let fresh = Model::new(spec)?;
        let (mut model, mut adam, from) = self.start(1, resume, fresh)?;
        let include = self.cfg.stage1_include_inactive;
        let item = move |t: &Self, m: &Model, g: &mut Graph, rng: &mut ChaCha8Rng, level: Level| -> Result<Item> {
            let (d, p) = t.sample_utterance(rng);
            let w = t.window(m.radius(), d, p);
            let v = m.extract(g, &w)?;
            let mut styles = StyleNodes {
                s_g: v.s_g,
                s_s: v.s_s,
                s_w: v.s_w,
            };
            if !include {
                let d_style = m.spec.model.d_style;
                if level < Level::Sentence {
                    styles.s_s = g.constant(Tensor::zeros(&[1, d_style]));
                }
                if level < Level::Subword {
                    let n = g.value(v.s_w).rows();
                    styles.s_w = g.constant(Tensor::zeros(&[n, d_style]));
                }
            }
            acoustic_item(m, g, w.current(), &styles, t.cfg.mel_loss)
        };
        self.run_steps(&mut model, &mut adam, 1, from, self.cfg.stage1_steps(), 1.0, &item)?;
        model.store.freeze_all();
        self.save(&model, &adam, 1, self.cfg.stage1_steps(), true, &self.dirs.stage(1))?;
        Ok(model)
    }

    /// Clamped extractor targets for every utterance of the corpus.
    pub fn targets(&self, model: &Model) -> Result<StyleTargets> {
        let mut keys = self.split.utterances(self.corpus, false);
        keys.extend(self.split.utterances(self.corpus, true));
        extract_targets(model, self.corpus, &keys)
    }

    fn encode_run(
        &self,
        m: &Model,
        g: &mut Graph,
        d: usize,
        range: std::ops::Range<usize>,
    ) -> Result<Vec<ContextVars>> {
        range
            .map(|p| {
                let w = self.window(m.predictor_radius(), d, p);
                m.encode_window(g, &w)
            })
            .collect()
    }

    pub fn run_stage2(&mut self, stage1: Model, resume: Option<Checkpoint>) -> Result<Model> {
        let (mut model, mut adam, from) = self.start(2, resume, stage1)?;
        let targets = self.targets(&model)?;
        let item = |t: &Self, m: &Model, g: &mut Graph, rng: &mut ChaCha8Rng, _: Level| -> Result<Item> {
            match m.mode() {
                PredictorMode::Hierarchical => {
                    let (d, p) = t.sample_utterance(rng);
                    let w = t.window(m.predictor_radius(), d, p);
                    let pred = m.predict(g, &w)?;
                    style_item(g, &pred, &targets[&(d, p)])
                }
                PredictorMode::Ar => {
                    let (d, range) = t.sample_paragraph(rng);
                    let ctx = t.encode_run(m, g, d, range.clone())?;
                    let given: Vec<StyleNodes> = range
                        .clone()
                        .map(|p| StyleNodes::constant(g, &targets[&(d, p)]))
                        .collect();
                    let preds = m
                        .predictor
                        .predict_paragraph_ar(g, &ctx, PreviousStyles::Given(&given))?;
                    sum_items(
                        g,
                        preds.iter().zip(range).map(|(pred, p)| (pred, &targets[&(d, p)])),
                        style_item,
                    )
                }
            }
        };
        self.run_steps(&mut model, &mut adam, 2, from, self.cfg.stage2, 1.0, &item)?;
        model.store.freeze_all();
        self.save(&model, &adam, 2, self.cfg.stage2, true, &self.dirs.stage(2))?;
        Ok(model)
    }

    pub fn run_stage3(&mut self, stage2: Model, resume: Option<Checkpoint>) -> Result<Model> {
        let (mut model, mut adam, from) = self.start(3, resume, stage2)?;
        let targets = self.targets(&model)?;
        let lambda = self.cfg.style_loss_weight;
        let joint = |t: &Self,
                     m: &Model,
                     g: &mut Graph,
                     u: &AlignedUtterance,
                     pred: &StyleNodes,
                     tgt: &StyleEmbeddings|
         -> Result<Item> {
            let a = acoustic_item(m, g, u, pred, t.cfg.mel_loss)?;
            let s = style_item(g, pred, tgt)?;
            let ws = g.scale(s.loss, lambda);
            let loss = g.add(a.loss, ws);
            let mut parts = a.parts;
            parts.style_global = s.parts.style_global;
            parts.style_sentence = s.parts.style_sentence;
            parts.style_subword = s.parts.style_subword;
            parts.style_weight = lambda;
            Ok(Item { loss, parts })
        };
        let item = |t: &Self, m: &Model, g: &mut Graph, rng: &mut ChaCha8Rng, _: Level| -> Result<Item> {
            match m.mode() {
                PredictorMode::Hierarchical => {
                    let (d, p) = t.sample_utterance(rng);
                    let w = t.window(m.predictor_radius(), d, p);
                    let pred = m.predict(g, &w)?;
                    joint(t, m, g, w.current(), &pred, &targets[&(d, p)])
                }
                PredictorMode::Ar => {
                    let (d, range) = t.sample_paragraph(rng);
                    let ctx = t.encode_run(m, g, d, range.clone())?;
                    let preds = m.predictor.predict_paragraph_ar(g, &ctx, PreviousStyles::Predicted)?;
                    let doc = &t.corpus.documents[d].utterances;
                    sum_items(g, preds.iter().zip(range), |g, pred, p| {
                        joint(t, m, g, &doc[p], pred, &targets[&(d, p)])
                    })
                }
            }
        };
        let scale = self.cfg.stage3_lr_scale;
        self.run_steps(&mut model, &mut adam, 3, from, self.cfg.stage3, scale, &item)?;
        model.store.freeze_all();
        self.save(&model, &adam, 3, self.cfg.stage3, true, &self.dirs.stage(3))?;
        Ok(model)
    }
}

/// Sums per-sentence items of a paragraph.
fn sum_items<'x, T: 'x, U: 'x>(
    g: &mut Graph,
    parts: impl Iterator<Item = (T, U)>,
    f: impl Fn(&mut Graph, T, U) -> Result<Item>,
) -> Result<Item> {
    let mut loss: Option<Var> = None;
    let mut comps = LossComponents::default();
    for (a, b) in parts {
        let it = f(g, a, b)?;
        loss = Some(match loss {
            Some(l) => g.add(l, it.loss),
            None => it.loss,
        });
        comps.add_scaled(&it.parts, 1.0);
    }
    let loss = loss.ok_or_else(|| Error::Empty("paragraph without sentences".into()))?;
    Ok(Item { loss, parts: comps })
}

/// Loads the stage checkpoint, checking that it finished.
pub fn load_stage(dirs: &RunDirs, stage: u8) -> Result<Model> {
    let dir = dirs.stage(stage);
    if !dir.join("state.json").exists() {
        return Err(Error::Checkpoint(format!(
            "stage {stage} checkpoint missing at {}",
            dir.display()
        )));
    }
    let c = load_checkpoint(&dir)?;
    if c.meta.stage != stage || !c.meta.complete {
        return Err(Error::Checkpoint(format!(
            "{} is not a finished stage {stage}",
            dir.display()
        )));
    }
    Ok(c.model)
}

/// Extractor parameter names of one level, for audits.
pub fn level_param_names(store: &ParamStore, level: Level) -> Vec<String> {
    let prefix = level.prefix();
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(&prefix))
        .map(|(_, p)| p.name.clone())
        .collect()
}

pub fn extractor_prefix() -> String {
    format!("{}.", StyleExtractor::PREFIX)
}
