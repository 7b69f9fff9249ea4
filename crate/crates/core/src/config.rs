//! Declarative run configuration: one TOML file with a section per module,
//! plus dotted `section.key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ProviderConfig};
use crate::training::TrainConfig;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "MSSTYLE_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub manifest: PathBuf,
}

impl Default for CorpusPaths {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("corpus/manifest.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sentences sampled for the attention dump.
    pub attention_samples: usize,
    pub attention_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attention_samples: 20,
            attention_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for corpus generation and parameter initialization.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusPaths,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusPaths::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applies overrides, validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_error(&e))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| parse_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.corpus.manifest = join_relative(base, &cfg.corpus.manifest);
        cfg.output_dir = join_relative(base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Output directory after the environment override: a relative
    /// `output_dir` is placed under `$MSSTYLE_OUTPUT_ROOT` when set.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }

    /// Model config with a relative precomputed-store path resolved against
    /// the corpus directory, so `dir = "semantic"` finds the generator's store.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let ProviderConfig::Precomputed { dir } = &mut m.provider {
            if dir.is_relative() {
                let base = self.corpus.manifest.parent().unwrap_or(Path::new(""));
                *dir = base.join(&*dir);
            }
        }
        m
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn join_relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

pub fn resolve_output(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

fn parse_error(e: &toml::de::Error) -> Error {
    Error::config("config", e.to_string().trim_end())
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictorMode;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let text = "[model]\ncontext_radius = 1\n";
        let cfg = RunConfig::from_toml(
            text,
            &[
                "model.context_radius=3".into(),
                "model.mode=ar".into(),
                "train.base_lr=0.01".into(),
                "model.provider={kind=\"precomputed\", dir=\"semantic\"}".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.context_radius, 3);
        assert_eq!(cfg.model.mode, PredictorMode::Ar);
        assert_eq!(cfg.train.base_lr, 0.01);
        assert_eq!(cfg.seed, 9);
        let m = RunConfig {
            corpus: CorpusPaths {
                manifest: "data/c/manifest.jsonl".into(),
            },
            ..cfg
        }
        .resolved_model();
        assert_eq!(
            m.provider,
            ProviderConfig::Precomputed {
                dir: "data/c/semantic".into()
            }
        );
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml("[synth]\nsentences_per_document = -3\n", &[])
            .unwrap_err()
            .to_string();
        assert!(e.contains("sentences_per_document"), "{e}");
        let e = RunConfig::from_toml("[train]\nbogus = 1\n", &[])
            .unwrap_err()
            .to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = RunConfig::from_toml("", &["train.stage2=0".into()])
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.stage2"), "{e}");
        assert!(RunConfig::from_toml("", &["nonsense".into()]).is_err());
        assert!(RunConfig::from_toml("seed = 1", &["seed.x=2".into()]).is_err());
    }

    #[test]
    fn output_root_only_moves_relative_dirs() {
        let root = Some(PathBuf::from("/tmp/root"));
        assert_eq!(
            resolve_output(Path::new("runs/a"), root.clone()),
            PathBuf::from("/tmp/root/runs/a")
        );
        assert_eq!(resolve_output(Path::new("/abs"), root), PathBuf::from("/abs"));
        assert_eq!(resolve_output(Path::new("runs/a"), None), PathBuf::from("runs/a"));
    }

    #[test]
    fn load_resolves_paths_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "output_dir = \"out\"\n[corpus]\nmanifest = \"c/manifest.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(&p, &[]).unwrap();
        assert_eq!(cfg.corpus.manifest, dir.path().join("c/manifest.jsonl"));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
    }
}
