use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use anyhow::{bail, Context, Result};
use msstyle_core::config::{resolve_output, RunConfig, OUTPUT_ROOT_ENV};
use msstyle_core::corpus::{generate_synthetic_corpus, load_manifest, Corpus, MANIFEST_FILE, SEMANTIC_DIR};
use msstyle_core::evaluation::{dump_attention, evaluate, near_mass, EvalMode};
use msstyle_core::model::{Model, ModelSpec, PredictorMode};
use msstyle_core::synthesis::{export_styles, synthesize_paragraph, synthesize_sentence, StyleSource};
use msstyle_core::training::TrainConfig;
use msstyle_core::training::{load_checkpoint, load_stage, read_log, Checkpoint, RunDirs, Split, Trainer, LOG_FILE};
use msstyle_core::{write_tensor, Error};

use crate::plot;
use crate::{Command, ConfigArgs, ModelArgs, PlotCommand, SourceArg, SplitArg, StageArg};

/// Bad invocation that the core library never sees.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 0 ok, 1 I/O, 2 usage or config, 3 divergence.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Divergence { .. } => 3,
                Error::Config { .. }
                | Error::Checkpoint(_)
                | Error::UnknownUtterance { .. }
                | Error::UnknownDocument(_)
                | Error::Invalid(_)
                | Error::Empty(_)
                | Error::Shape(_) => 2,
                Error::Io { .. }
                | Error::TensorFormat { .. }
                | Error::NonFinite { .. }
                | Error::Manifest(_)
                | Error::Provider(_) => 1,
            };
        }
    }
    1
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus { config, seed, out } => gen_corpus(&config, seed, out),
        Command::Train {
            config,
            stage,
            resume,
            out,
        } => train(&config, stage, resume, out),
        Command::Synthesize {
            model,
            utterance,
            use_extractor,
            out,
            invert,
        } => synthesize(&model, &utterance, use_extractor, out, invert),
        Command::SynthesizeParagraph {
            model,
            document,
            out,
            invert,
        } => paragraph(&model, &document, out, invert),
        Command::Evaluate {
            ckpt,
            corpus,
            split,
            source,
            out,
        } => evaluate_cmd(ckpt, &corpus, split, source, &out),
        Command::InspectAttention {
            model,
            samples,
            seed,
            out,
        } => inspect_attention(&model, samples, seed, out),
        Command::Plot { figure } => plot_cmd(figure),
        Command::ExportStyles { model, source, out } => export(&model, source, &out),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p, &args.overrides)?,
        None => RunConfig::from_toml("", &args.overrides)?,
    };
    Ok(cfg)
}

/// Applies the output-root override to a user-given path.
fn output(p: &Path) -> PathBuf {
    resolve_output(p, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
}

fn corpus_at(path: &Path) -> Result<Corpus> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(load_manifest(&manifest)?)
}

fn checkpoint_at(dir: &Path) -> Result<Checkpoint> {
    if !dir.join("state.json").exists() {
        return Err(usage(format!("no checkpoint at {}", dir.display())));
    }
    Ok(load_checkpoint(dir)?)
}

fn load(args: &ModelArgs) -> Result<(Checkpoint, Corpus)> {
    Ok((checkpoint_at(&args.ckpt)?, corpus_at(&args.corpus)?))
}

fn parse_utterance(s: &str) -> Result<(String, usize)> {
    let (doc, idx) = s
        .rsplit_once(':')
        .ok_or_else(|| usage(format!("utterance `{s}` should look like DOCUMENT:INDEX")))?;
    let idx = idx
        .parse()
        .map_err(|_| usage(format!("utterance `{s}`: `{idx}` is not a sentence index")))?;
    Ok((doc.to_string(), idx))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn invert(program: &Path, mel: &Path) -> Result<()> {
    let wav = mel.with_extension("wav");
    let status = process::Command::new(program)
        .arg(mel)
        .arg(&wav)
        .status()
        .with_context(|| format!("running {}", program.display()))?;
    if !status.success() {
        bail!("{} exited with {status}", program.display());
    }
    println!("inverted {} -> {}", mel.display(), wav.display());
    Ok(())
}

fn gen_corpus(args: &ConfigArgs, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = match out {
        Some(o) => output(&o),
        None => cfg.corpus.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    let manifest = generate_synthetic_corpus(&cfg.synth, seed, &dir)?;
    let corpus = load_manifest(&manifest)?;
    let frames: usize = corpus.utterances().map(|u| u.frames()).sum();
    println!("manifest: {}", manifest.display());
    println!("documents: {}", corpus.n_documents());
    println!("utterances: {}", corpus.n_utterances());
    println!("frames: {frames}");
    println!("phonemes: {}", corpus.phoneme_inventory().len());
    println!("subword vocabulary: {}", corpus.subword_vocabulary().len());
    let store = dir.join(SEMANTIC_DIR);
    if store.exists() {
        println!("semantic store: {}", store.display());
    }
    Ok(())
}

fn require_stage(dirs: &RunDirs, stage: u8) -> Result<Model> {
    if !dirs.stage(stage).join("state.json").exists() {
        return Err(usage(format!(
            "stage {} needs a finished stage {stage} checkpoint at {}; run `msstyle train --stage {stage}` first",
            stage + 1,
            dirs.stage(stage).display()
        )));
    }
    Ok(load_stage(dirs, stage)?)
}

fn train(args: &ConfigArgs, stage: StageArg, resume: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(args)?;
    let root = match out {
        Some(o) => output(&o),
        None => cfg.output_dir(),
    };
    let corpus = corpus_at(&cfg.corpus.manifest)?;
    let dirs = RunDirs::new(&root);
    let mut trainer = Trainer::new(&corpus, cfg.train.clone(), dirs.clone())?;
    fs::write(root.join("config.toml"), cfg.to_toml())
        .with_context(|| format!("writing config to {}", root.display()))?;

    let mut resume = resume.map(|p| checkpoint_at(&p)).transpose()?;
    let requested: Vec<u8> = match stage {
        StageArg::One => vec![1],
        StageArg::Two => vec![2],
        StageArg::Three => vec![3],
        StageArg::All => vec![1, 2, 3],
    };
    let first = match &resume {
        Some(r) if !requested.contains(&r.meta.stage) => {
            return Err(usage(format!(
                "resume checkpoint belongs to stage {}, not the requested stage",
                r.meta.stage
            )))
        }
        Some(r) => {
            if r.meta.train != cfg.train {
                eprintln!("warning: [train] differs from the resumed run; the loss curve will not match");
            }
            r.meta.stage
        }
        None => requested[0],
    };

    let mut model: Option<Model> = None;
    for s in requested.into_iter().filter(|&s| s >= first) {
        let res = resume.take_if(|r| r.meta.stage == s);
        let prev = |model: &mut Option<Model>, res: &Option<Checkpoint>| -> Result<Model> {
            match (model.take(), res) {
                (Some(m), _) => Ok(m),
                (None, Some(r)) => Ok(r.model.clone()),
                (None, None) => require_stage(&dirs, s - 1),
            }
        };
        let m = match s {
            1 => {
                let spec = ModelSpec::from_corpus(&cfg.resolved_model(), &corpus, cfg.seed)?;
                trainer.run_stage1(&spec, res)?
            }
            2 => {
                let p = prev(&mut model, &res)?;
                trainer.run_stage2(p, res)?
            }
            _ => {
                let p = prev(&mut model, &res)?;
                trainer.run_stage3(p, res)?
            }
        };
        report_stage(&dirs, s)?;
        model = Some(m);
    }
    Ok(())
}

fn report_stage(dirs: &RunDirs, stage: u8) -> Result<()> {
    let log = read_log(&dirs.log())?;
    if let Some(last) = log.iter().rev().find(|r| r.stage == stage) {
        println!(
            "stage {stage}: {} steps, final loss {:.5} (mel {:.5}, style {:.5}) -> {}",
            last.step + 1,
            last.total,
            last.mel,
            last.style,
            dirs.stage(stage).display()
        );
    }
    Ok(())
}

fn source_of(use_extractor: bool) -> StyleSource {
    if use_extractor {
        StyleSource::Extracted
    } else {
        StyleSource::Predicted
    }
}

fn synthesize(
    args: &ModelArgs,
    utt: &str,
    use_extractor: bool,
    out: Option<PathBuf>,
    inv: Option<PathBuf>,
) -> Result<()> {
    let (ckpt, corpus) = load(args)?;
    let (doc, idx) = parse_utterance(utt)?;
    let s = synthesize_sentence(&ckpt.model, &corpus, &doc, idx, source_of(use_extractor))?;
    let path = output(&out.unwrap_or_else(|| PathBuf::from(format!("{doc}_{idx:03}.mel.msst"))));
    create_parent(&path)?;
    write_tensor(&path, &s.mel)?;
    println!("{}: {} frames x {} bins", path.display(), s.mel.rows(), s.mel.cols());
    if let Some(p) = inv {
        invert(&p, &path)?;
    }
    Ok(())
}

fn paragraph(args: &ModelArgs, document: &str, out: Option<PathBuf>, inv: Option<PathBuf>) -> Result<()> {
    let (ckpt, corpus) = load(args)?;
    if ckpt.model.mode() == PredictorMode::Hierarchical {
        eprintln!("warning: hierarchical checkpoint; predicting each sentence from its own window instead of autoregressively");
    }
    let p = synthesize_paragraph(&ckpt.model, &corpus, document)?;
    let dir = output(&out.unwrap_or_else(|| PathBuf::from(document)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let doc = corpus.document(document)?;
    for (u, s) in doc.utterances.iter().zip(&p.sentences) {
        write_tensor(dir.join(format!("sentence_{:03}.mel.msst", u.sentence_index)), &s.mel)?;
    }
    let combined = dir.join("paragraph.mel.msst");
    write_tensor(&combined, &p.mel)?;
    println!(
        "{}: {} sentences, {} frames ({})",
        combined.display(),
        p.sentences.len(),
        p.mel.rows(),
        if p.autoregressive {
            "autoregressive"
        } else {
            "per-sentence windows"
        }
    );
    if let Some(prog) = inv {
        invert(&prog, &combined)?;
    }
    Ok(())
}

fn evaluate_cmd(ckpt: Option<PathBuf>, corpus: &Path, split: SplitArg, source: SourceArg, out: &Path) -> Result<()> {
    let corpus = corpus_at(corpus)?;
    let ckpt = ckpt.map(|p| checkpoint_at(&p)).transpose()?;
    let mode = match source {
        SourceArg::Copy => EvalMode::Copy,
        SourceArg::Predicted => EvalMode::Synthesized(StyleSource::Predicted),
        SourceArg::Extracted => EvalMode::Synthesized(StyleSource::Extracted),
    };
    if mode != EvalMode::Copy && ckpt.is_none() {
        return Err(usage("--ckpt is required unless --source copy"));
    }
    let fraction = ckpt
        .as_ref()
        .map(|c| c.meta.train.test_fraction)
        .unwrap_or(TrainConfig::default().test_fraction);
    let split_ = Split::new(&corpus, fraction);
    let positions = match split {
        SplitArg::Test => split_.utterances(&corpus, true),
        SplitArg::Train => split_.utterances(&corpus, false),
        SplitArg::All => {
            let mut all = split_.utterances(&corpus, false);
            all.extend(split_.utterances(&corpus, true));
            all
        }
    };
    if positions.is_empty() {
        return Err(usage("the chosen split is empty"));
    }
    let keys: Vec<(String, usize)> = positions
        .iter()
        .map(|&(d, p)| {
            let doc = &corpus.documents[d];
            (doc.id.clone(), doc.utterances[p].sentence_index)
        })
        .collect();
    let report = evaluate(ckpt.as_ref().map(|c| &c.model), &corpus, &keys, mode)?;
    let stem = output(out);
    report.write(&stem)?;
    print!("{}", report.summary());
    println!("report: {}", stem.with_extension("jsonl").display());
    Ok(())
}

fn attention_matrix(args: &ModelArgs, samples: usize, seed: u64) -> Result<msstyle_core::Tensor> {
    let (ckpt, corpus) = load(args)?;
    let window = 2 * ckpt.model.predictor_radius() + 1;
    Ok(dump_attention(&ckpt.model, &corpus, samples, window, seed)?)
}

fn inspect_attention(args: &ModelArgs, samples: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let a = attention_matrix(args, samples, seed)?;
    let w = a.cols();
    let offsets: Vec<String> = (0..w)
        .map(|j| format!("{:>7}", j as isize - (w / 2) as isize))
        .collect();
    println!("offset {}", offsets.join(""));
    for r in 0..a.rows() {
        let row: Vec<String> = a.row_slice(r).iter().map(|v| format!("{v:>7.3}")).collect();
        println!("{r:>6} {}", row.join(""));
    }
    let uniform = w.min(3) as f64 / w as f64;
    println!("near mass (current ±1): {:.4}, uniform {:.4}", near_mass(&a), uniform);
    if let Some(p) = out {
        let p = output(&p);
        create_parent(&p)?;
        write_tensor(&p, &a)?;
        println!("matrix: {}", p.display());
    }
    Ok(())
}

fn plot_cmd(figure: PlotCommand) -> Result<()> {
    match figure {
        PlotCommand::PitchContour {
            model,
            utterance,
            use_extractor,
            out,
        } => {
            let (ckpt, corpus) = load(&model)?;
            let (doc, idx) = parse_utterance(&utterance)?;
            let s = synthesize_sentence(&ckpt.model, &corpus, &doc, idx, source_of(use_extractor))?;
            let truth = corpus.utterance(&doc, idx)?;
            let out = output(&out);
            create_parent(&out)?;
            plot::pitch_contour(&truth.mel, &truth.pitch_frame, &s.mel, &s.frame_pitch(), &out)?;
            println!("{}", out.display());
        }
        PlotCommand::Attention {
            input,
            ckpt,
            corpus,
            samples,
            seed,
            out,
        } => {
            let a = match (input, ckpt, corpus) {
                (Some(p), _, _) => msstyle_core::read_tensor(&p)?,
                (None, Some(ckpt), Some(corpus)) => attention_matrix(&ModelArgs { ckpt, corpus }, samples, seed)?,
                _ => return Err(usage("give --input, or --ckpt with --corpus")),
            };
            let out = output(&out);
            create_parent(&out)?;
            plot::heatmap(&a, &out)?;
            println!("{}", out.display());
        }
        PlotCommand::Losses { log, out } => {
            let path = if log.is_dir() { log.join(LOG_FILE) } else { log };
            let records = read_log(&path)?;
            if records.is_empty() {
                return Err(usage(format!("{} has no records", path.display())));
            }
            let out = output(&out);
            create_parent(&out)?;
            plot::losses(&records, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn export(args: &ModelArgs, source: SourceArg, out: &Path) -> Result<()> {
    let source = match source {
        SourceArg::Extracted => StyleSource::Extracted,
        SourceArg::Predicted => StyleSource::Predicted,
        SourceArg::Copy => return Err(usage("styles come from the extractor or the predictor")),
    };
    let (ckpt, corpus) = load(args)?;
    let dir = output(out);
    let n = export_styles(&ckpt.model, &corpus, source, &dir)?;
    println!("{n} utterances -> {}", dir.display());
    Ok(())
}
