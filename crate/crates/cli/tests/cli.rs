use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msstyle_core::read_tensor;
use sha2::{Digest, Sha256};

const TOY: &str = r#"
seed = 3
output_dir = "run"

[corpus]
manifest = "corpus/manifest.jsonl"

[synth]
documents = 4
sentences_per_document = 4
subwords_per_sentence = [3, 5]
base_frames = [2, 3]

[model]
provider = { kind = "precomputed", dir = "semantic" }
context_radius = 1
conv_channels = [4, 4]
d_ff = 16

[train]
batch_size = 1
stage1_per_level = 2
stage2 = 3
stage3 = 3
warmup_steps = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_msstyle"));
    c.env_remove("MSSTYLE_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy config plus generated corpus in a fresh directory.
fn toy() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    fs::write(&cfg, TOY).unwrap();
    ok(&run(&["gen-corpus", "--config", s(&cfg)]));
    (dir, cfg)
}

fn trained() -> (tempfile::TempDir, PathBuf) {
    let (dir, cfg) = toy();
    ok(&run(&["train", "--config", s(&cfg), "--stage", "all"]));
    (dir, cfg)
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn gen_corpus_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = ok(&run(&[
        "gen-corpus",
        "--seed",
        "5",
        "--out",
        s(&a),
        "--set",
        "synth.documents=2",
    ]));
    assert!(out.contains("manifest: "), "{out}");
    assert!(out.contains("documents: 2"), "{out}");
    ok(&run(&[
        "gen-corpus",
        "--seed",
        "5",
        "--out",
        s(&b),
        "--set",
        "synth.documents=2",
    ]));
    assert_eq!(sha(&a.join("manifest.jsonl")), sha(&b.join("manifest.jsonl")));
}

#[test]
fn negative_sentence_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[synth]\nsentences_per_document = -2\n").unwrap();
    let out = run(&["gen-corpus", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sentences_per_document"), "{err}");
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = run(&["gen-corpus", "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_two_without_stage_one_exits_2() {
    let (_dir, cfg) = toy();
    let out = run(&["train", "--config", s(&cfg), "--stage", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["train", "--config", s(&cfg), "--stage", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let (_dir, cfg) = toy();
    let out = run(&[
        "train",
        "--config",
        s(&cfg),
        "--stage",
        "1",
        "--set",
        "train.base_lr=1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_on_the_toy_config() {
    let (dir, _cfg) = trained();
    let root = dir.path();
    let run_dir = root.join("run");
    for s in 1..=3 {
        assert!(run_dir.join(format!("ckpt/stage{s}/state.json")).exists());
    }
    let ckpt = run_dir.join("ckpt/stage3");
    let corpus = root.join("corpus/manifest.jsonl");
    let manifest_hash = sha(&corpus);

    // sentence synthesis, both style sources
    let mel = root.join("out/s.mel.msst");
    ok(&run(&[
        "synthesize",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--utterance",
        "doc00:1",
        "--out",
        s(&mel),
    ]));
    let predicted = read_tensor(&mel).unwrap();
    let mel_e = root.join("out/e.mel.msst");
    ok(&run(&[
        "synthesize",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--utterance",
        "doc00:1",
        "--use-extractor",
        "--out",
        s(&mel_e),
    ]));
    assert_eq!(read_tensor(&mel_e).unwrap().cols(), predicted.cols());

    // paragraph: hierarchical fallback warns, frames add up, sentence 1 matches
    let pdir = root.join("out/para");
    let out = run(&[
        "synthesize-paragraph",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--document",
        "doc00",
        "--out",
        s(&pdir),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let combined = read_tensor(pdir.join("paragraph.mel.msst")).unwrap();
    let parts: Vec<_> = (0..4)
        .map(|i| read_tensor(pdir.join(format!("sentence_{i:03}.mel.msst"))).unwrap())
        .collect();
    assert_eq!(combined.rows(), parts.iter().map(|p| p.rows()).sum::<usize>());
    assert_eq!(parts[1], predicted);

    // copy-mode evaluation is exactly zero
    let report = root.join("out/copy");
    let out = ok(&run(&[
        "evaluate",
        "--corpus",
        s(&corpus),
        "--source",
        "copy",
        "--split",
        "all",
        "--out",
        s(&report),
    ]));
    assert!(out.contains("mcd_db: 0.0000"), "{out}");
    let jsonl = fs::read_to_string(report.with_extension("jsonl")).unwrap();
    let last: serde_like::Agg = serde_like::parse(jsonl.lines().last().unwrap());
    assert_eq!((last.mcd, last.f0, last.energy, last.duration), (0.0, 0.0, 0.0, 0.0));

    let report = root.join("out/pred");
    ok(&run(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--out",
        s(&report),
    ]));
    let text = fs::read_to_string(report.with_extension("jsonl")).unwrap();
    for name in ["\"mcd\"", "\"f0_rmse\"", "\"energy_rmse\"", "\"duration_mse\""] {
        assert!(text.contains(name), "{name} missing");
    }

    // attention rows are distributions
    let att = root.join("out/att.msst");
    let out = ok(&run(&[
        "inspect-attention",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--samples",
        "5",
        "--out",
        s(&att),
    ]));
    assert!(out.contains("near mass"), "{out}");
    let a = read_tensor(&att).unwrap();
    assert_eq!(a.shape(), &[5, 3]);
    for r in 0..a.rows() {
        assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    // figures
    let figs = root.join("figs");
    ok(&run(&[
        "plot",
        "attention",
        "--input",
        s(&att),
        "--out",
        s(&figs.join("att.png")),
    ]));
    ok(&run(&[
        "plot",
        "losses",
        "--log",
        s(&run_dir),
        "--out",
        s(&figs.join("loss.png")),
    ]));
    ok(&run(&[
        "plot",
        "pitch-contour",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--utterance",
        "doc01:2",
        "--out",
        s(&figs.join("pitch.png")),
    ]));
    for f in ["att.png", "loss.png", "pitch.png"] {
        let bytes = fs::read(figs.join(f)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG", "{f}");
    }

    // style export
    let styles = root.join("styles");
    let out = ok(&run(&[
        "export-styles",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--out",
        s(&styles),
    ]));
    assert!(out.starts_with("16 utterances"), "{out}");
    let sw = read_tensor(styles.join("doc00/001.subword.msst")).unwrap();
    assert_eq!(sw.cols(), 16);

    // nothing above touched the corpus
    assert_eq!(manifest_hash, sha(&corpus));
}

#[test]
fn unknown_utterance_and_bad_syntax_exit_2() {
    let (dir, cfg) = toy();
    ok(&run(&["train", "--config", s(&cfg), "--stage", "1"]));
    let ckpt = dir.path().join("run/ckpt/stage1");
    let corpus = dir.path().join("corpus");
    for utt in ["doc00:99", "nope:0", "doc00"] {
        let out = run(&[
            "synthesize",
            "--ckpt",
            s(&ckpt),
            "--corpus",
            s(&corpus),
            "--utterance",
            utt,
            "--use-extractor",
        ]);
        assert_eq!(out.status.code(), Some(2), "{utt}");
    }
    let out = run(&[
        "synthesize",
        "--ckpt",
        s(&dir.path().join("missing")),
        "--corpus",
        s(&corpus),
        "--utterance",
        "doc00:0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_reproduces_the_uninterrupted_log() {
    let (dir, cfg) = toy();
    let c = s(&cfg);
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let train = |out: &Path, stage: &str, resume: Option<&Path>| {
        let mut args = vec!["train", "--config", c, "--stage", stage, "--out", s(out)];
        args.extend(["--set", "train.checkpoint_every=2", "--set", "train.stage2=5"]);
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        ok(&run(&args));
    };
    train(&full, "all", None);
    train(&part, "1", None);
    train(&part, "2", None);
    // keep only the mid-stage-2 checkpoint (after step 4), as if interrupted there
    fs::remove_dir_all(part.join("ckpt/stage2")).unwrap();
    let meta = fs::read_to_string(part.join("ckpt/resume/state.json")).unwrap();
    assert!(meta.contains("\"stage\": 2") && meta.contains("\"step\": 4"), "{meta}");
    train(&part, "all", Some(&part.join("ckpt/resume")));
    let a = fs::read_to_string(full.join("train_log.jsonl")).unwrap();
    let b = fs::read_to_string(part.join("train_log.jsonl")).unwrap();
    let parse = |t: &str| -> Vec<f64> { t.lines().map(serde_like::total).collect() };
    let (a, b) = (parse(&a), parse(&b));
    assert_eq!(a.len(), 6 + 5 + 3);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn output_root_env_relocates_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-corpus", "--out", "c", "--set", "synth.documents=1"])
        .env("MSSTYLE_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("c/manifest.jsonl").exists());
}

/// Just enough JSON field picking for the log and report lines.
mod serde_like {
    pub struct Agg {
        pub mcd: f64,
        pub f0: f64,
        pub energy: f64,
        pub duration: f64,
    }

    pub fn field(line: &str, name: &str) -> f64 {
        let key = format!("\"{name}\":");
        let start = line.find(&key).unwrap_or_else(|| panic!("{name} in {line}")) + key.len();
        let rest = &line[start..];
        let end = rest.find([',', '}']).unwrap();
        rest[..end].trim().parse().unwrap()
    }

    pub fn parse(line: &str) -> Agg {
        Agg {
            mcd: field(line, "mcd"),
            f0: field(line, "f0_rmse"),
            energy: field(line, "energy_rmse"),
            duration: field(line, "duration_mse"),
        }
    }

    pub fn total(line: &str) -> f64 {
        field(line, "total")
    }
}
