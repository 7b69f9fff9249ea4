//! Shared fixtures for the criterion benches in `benches/`.

use msstyle_core::corpus::{generate_synthetic_corpus, load_manifest, Corpus, SynthConfig, SEMANTIC_DIR};
use msstyle_core::model::{Model, ModelConfig, ModelSpec, ProviderConfig};

/// A generated corpus and an untrained default-sized model over it. The
/// corpus lives in a temporary directory for as long as the fixture does.
pub struct Fixture {
    _dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub model: Model,
}

impl Fixture {
    pub fn new(documents: usize, sentences: usize) -> msstyle_core::Result<Self> {
        let dir = tempfile::tempdir().map_err(|e| msstyle_core::Error::io(std::env::temp_dir(), e))?;
        let cfg = SynthConfig {
            documents,
            sentences_per_document: sentences,
            ..SynthConfig::default()
        };
        let manifest = generate_synthetic_corpus(&cfg, 7, dir.path())?;
        let corpus = load_manifest(&manifest)?;
        let model_cfg = ModelConfig {
            provider: ProviderConfig::Precomputed {
                dir: dir.path().join(SEMANTIC_DIR),
            },
            ..ModelConfig::default()
        };
        let model = Model::new(&ModelSpec::from_corpus(&model_cfg, &corpus, 1)?)?;
        Ok(Self {
            _dir: dir,
            corpus,
            model,
        })
    }
}
