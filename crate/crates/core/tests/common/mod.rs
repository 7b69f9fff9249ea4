#![allow(dead_code)]

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use msstyle_core::corpus::{generate_synthetic_corpus, load_manifest, Corpus, SynthConfig, SEMANTIC_DIR};
use msstyle_core::extractor::Level;
use msstyle_core::model::{Model, ModelConfig, ModelSpec, ProviderConfig};
use msstyle_core::params::changed_params;
use msstyle_core::training::{extractor_prefix, RunDirs, TrainConfig, Trainer};

pub struct Toy {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    pub corpus: Corpus,
}

impl Toy {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn run_dir(&self, name: &str) -> RunDirs {
        RunDirs::new(self.path().join(name))
    }

    pub fn model_config(&self) -> ModelConfig {
        toy_model(&self.manifest.parent().unwrap().join(SEMANTIC_DIR))
    }

    pub fn spec(&self, init_seed: u64) -> ModelSpec {
        ModelSpec::from_corpus(&self.model_config(), &self.corpus, init_seed).unwrap()
    }
}

pub fn toy_synth(documents: usize, sentences: usize) -> SynthConfig {
    SynthConfig {
        documents,
        sentences_per_document: sentences,
        subwords_per_sentence: [3, 5],
        base_frames: [2, 4],
        mel_bins: 12,
        ..SynthConfig::default()
    }
}

pub fn toy_with(cfg: &SynthConfig, seed: u64) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_corpus(cfg, seed, &dir.path().join("corpus")).unwrap();
    let corpus = load_manifest(&manifest).unwrap();
    Toy { dir, manifest, corpus }
}

pub fn toy(documents: usize, sentences: usize, seed: u64) -> Toy {
    toy_with(&toy_synth(documents, sentences), seed)
}

pub fn toy_model(store: &Path) -> ModelConfig {
    ModelConfig {
        d_style: 8,
        d_ctx: 8,
        context_radius: 1,
        provider: ProviderConfig::Precomputed {
            dir: store.to_path_buf(),
        },
        style_tokens: 4,
        conv_channels: vec![4, 4],
        d_ff: 16,
        ..ModelConfig::default()
    }
}

pub fn toy_train(per_level: usize, stage2: usize, stage3: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        stage1_per_level: per_level,
        stage2,
        stage3,
        warmup_steps: 10,
        test_fraction: 0.25,
        ..TrainConfig::default()
    }
}

/// Outcome of watching every stage-1 step.
#[derive(Debug, Default)]
pub struct Stage1Audit {
    /// `(step, parameter)` changed outside the allowed set.
    pub violations: Vec<(usize, String)>,
    /// Steps at which the active level's own parameters did not move.
    pub idle_steps: Vec<usize>,
    pub levels: Vec<Level>,
}

/// Runs stage 1 and checks after every step that only acoustic parameters
/// and those of the active extractor level changed.
pub fn audit_stage1(toy: &Toy, cfg: &TrainConfig, run: &str) -> (Model, Stage1Audit) {
    let spec = toy.spec(1);
    let audit = RefCell::new(Stage1Audit::default());
    let before = RefCell::new(Model::new(&spec).unwrap().store.snapshot());
    let mut t = Trainer::new(&toy.corpus, cfg.clone(), toy.run_dir(run)).unwrap();
    t.on_step = Some(Box::new(|r, store| {
        let level = r.level.expect("stage 1 records carry a level");
        let after = store.snapshot();
        let changed = changed_params(&before.borrow(), &after);
        let mut a = audit.borrow_mut();
        a.levels.push(level);
        let own = level.prefix();
        for name in &changed {
            let allowed = name.starts_with("acoustic.") || name.starts_with(&own);
            if !allowed {
                a.violations.push((r.step, name.clone()));
            }
        }
        if !changed.iter().any(|n| n.starts_with(&own)) {
            a.idle_steps.push(r.step);
        }
        *before.borrow_mut() = after;
    }));
    let model = t.run_stage1(&spec, None).unwrap();
    drop(t);
    (model, audit.into_inner())
}

/// Names of parameters outside the predictor path that differ between two
/// stores.
pub fn frozen_path_changes(a: &Model, b: &Model) -> Vec<String> {
    changed_params(&a.store.snapshot(), &b.store.snapshot())
        .into_iter()
        .filter(|n| n.starts_with(&extractor_prefix()) || n.starts_with("acoustic."))
        .collect()
}

/// Trailing-window moving average.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
