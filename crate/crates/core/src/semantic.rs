//! Per-subword semantic embeddings for a concatenated context window.
//!
//! Three interchangeable providers stand in for a pretrained language model:
//! a precomputed store on disk, a seeded hash projection, and a trainable
//! lookup table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::corpus::ContextWindow;
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, Embedding};
use crate::params::ParamStore;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";

/// Embeddings for every subword of a window, with each sentence's
/// `(start, length)` on the subword axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSequence {
    pub embeddings: Tensor,
    pub sentence_offsets: Vec<(usize, usize)>,
    pub d_sem: usize,
}

impl SemanticSequence {
    pub fn sentence(&self, i: usize) -> Tensor {
        let (start, len) = self.sentence_offsets[i];
        self.embeddings.slice_rows(start, start + len)
    }

    pub fn total_subwords(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Seeded pseudo-random projection of each token, optionally mixed with a
/// sinusoidal code of its position in the concatenated window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub seed: u64,
    pub d_sem: usize,
    pub position_mixing: bool,
}

impl HashEmbedder {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.d_sem).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn embed(&self, tokens: &[&str]) -> Tensor {
        let mut data = Vec::with_capacity(tokens.len() * self.d_sem);
        for t in tokens {
            data.extend(self.token_vector(t));
        }
        if self.position_mixing {
            let pe = sinusoid_table(tokens.len(), self.d_sem);
            for (v, p) in data.iter_mut().zip(pe.data()) {
                *v += 0.5 * p;
            }
        }
        Tensor::matrix(tokens.len(), self.d_sem, data).unwrap()
    }
}

/// Per-utterance arrays loaded from a store directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedStore {
    pub d_sem: usize,
    entries: BTreeMap<(String, usize), Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreIndex {
    d_sem: usize,
    entries: Vec<StoreEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreEntry {
    document_id: String,
    sentence_index: usize,
    file: String,
}

pub const STORE_INDEX: &str = "index.json";

impl PrecomputedStore {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STORE_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: StoreIndex =
            serde_json::from_str(&text).map_err(|e| Error::Provider(format!("{}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for e in index.entries {
            let t = read_tensor(dir.join(&e.file))?;
            if t.shape().len() != 2 || t.cols() != index.d_sem {
                return Err(Error::Provider(format!(
                    "{}: shape {:?} does not have width {}",
                    e.file,
                    t.shape(),
                    index.d_sem
                )));
            }
            entries.insert((e.document_id, e.sentence_index), t);
        }
        Ok(Self {
            d_sem: index.d_sem,
            entries,
        })
    }

    /// Writes arrays keyed by `(document_id, sentence_index)` plus the index.
    pub fn write(dir: &Path, d_sem: usize, arrays: &[((String, usize), Tensor)]) -> Result<()> {
        let mut entries = Vec::new();
        for ((doc, idx), t) in arrays {
            let file = format!("{doc}_{idx:04}.msst");
            write_tensor(dir.join(&file), t)?;
            entries.push(StoreEntry {
                document_id: doc.clone(),
                sentence_index: *idx,
                file,
            });
        }
        let index = StoreIndex { d_sem, entries };
        let path = dir.join(STORE_INDEX);
        fs::write(&path, serde_json::to_string_pretty(&index).expect("serializable")).map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, document_id: &str, sentence_index: usize) -> Result<&Tensor> {
        self.entries
            .get(&(document_id.to_string(), sentence_index))
            .ok_or_else(|| Error::Provider(format!("no precomputed entry for {document_id}:{sentence_index}")))
    }
}

/// Learnable lookup table. Row 0 is the unknown token, row 1 the separator.
#[derive(Debug, Clone)]
pub struct TrainableEmbedder {
    pub table: Embedding,
    vocab: BTreeMap<String, usize>,
}

impl TrainableEmbedder {
    pub const PREFIX: &'static str = "semantic";

    pub fn new(store: &mut ParamStore, vocab: &[String], d_sem: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut map = BTreeMap::new();
        map.insert(UNK.to_string(), 0);
        map.insert(SEP.to_string(), 1);
        for w in vocab {
            let next = map.len();
            map.entry(w.clone()).or_insert(next);
        }
        let table = Embedding::new(store, Self::PREFIX, map.len(), d_sem, rng);
        Self { table, vocab: map }
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<(&String, &usize)> = self.vocab.iter().collect();
        v.sort_by_key(|(_, &i)| i);
        v.into_iter().skip(2).map(|(w, _)| w.clone()).collect()
    }

    pub fn id(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub enum Provider {
    Precomputed(PrecomputedStore),
    Hash(HashEmbedder),
    Trainable(TrainableEmbedder),
}

impl Provider {
    pub fn d_sem(&self) -> usize {
        match self {
            Provider::Precomputed(p) => p.d_sem,
            Provider::Hash(h) => h.d_sem,
            Provider::Trainable(t) => t.table.dim,
        }
    }
}

/// Embeds the concatenated window once and returns the per-subword rows
/// (separators, if any, removed) as a graph node plus sentence offsets.
pub fn embed_context_var(
    g: &mut Graph,
    window: &ContextWindow,
    provider: &Provider,
    separator: bool,
) -> Result<(Var, Vec<(usize, usize)>)> {
    let mut offsets = Vec::with_capacity(window.len());
    let mut tokens: Vec<&str> = Vec::new();
    let mut keep = Vec::new();
    let mut start = 0;
    for (i, s) in window.sentences.iter().enumerate() {
        if s.subwords.is_empty() {
            return Err(Error::Empty(format!("sentence {} has no subwords", s.key())));
        }
        if separator && i > 0 {
            tokens.push(SEP);
        }
        for w in &s.subwords {
            keep.push(tokens.len());
            tokens.push(w);
        }
        offsets.push((start, s.subwords.len()));
        start += s.subwords.len();
    }
    let full = match provider {
        Provider::Hash(h) => g.constant(h.embed(&tokens)),
        Provider::Trainable(t) => {
            let ids: Vec<usize> = tokens.iter().map(|w| t.id(w)).collect();
            t.table.forward(g, &ids)?
        }
        Provider::Precomputed(p) => {
            // not context-sensitive: stored blocks are concatenated
            let mut blocks = Vec::with_capacity(window.len());
            for s in window.sentences {
                let t = p.get(&s.document_id, s.sentence_index)?;
                if t.rows() != s.subwords.len() {
                    return Err(Error::Provider(format!(
                        "{}: stored {} rows for {} subwords",
                        s.key(),
                        t.rows(),
                        s.subwords.len()
                    )));
                }
                blocks.push(t);
            }
            let cat = Tensor::concat_rows(&blocks)?;
            return Ok((g.constant(cat), offsets));
        }
    };
    let out = if keep.len() == tokens.len() {
        full
    } else {
        g.gather_rows(full, &keep)
    };
    Ok((out, offsets))
}

pub fn embed_context(
    store: &ParamStore,
    window: &ContextWindow,
    provider: &Provider,
    separator: bool,
) -> Result<SemanticSequence> {
    let mut g = Graph::new(store);
    let (v, offsets) = embed_context_var(&mut g, window, provider, separator)?;
    Ok(SemanticSequence {
        embeddings: g.value(v).clone(),
        sentence_offsets: offsets,
        d_sem: provider.d_sem(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AlignedUtterance;

    fn utt(idx: usize, words: &[&str]) -> AlignedUtterance {
        let n = words.len();
        AlignedUtterance {
            document_id: "d".into(),
            sentence_index: idx,
            text: words.join(" "),
            subwords: words.iter().map(|w| w.to_string()).collect(),
            phonemes: vec!["AA".into(); n],
            subword_phoneme_counts: vec![1; n],
            durations: vec![1; n],
            mel: Tensor::zeros(&[n, 2]),
            pitch_frame: vec![0.0; n],
            energy_frame: vec![1.0; n],
        }
    }

    fn doc() -> Vec<AlignedUtterance> {
        vec![utt(0, &["a", "b"]), utt(1, &["c", "a", "d"]), utt(2, &["e"])]
    }

    #[test]
    fn offsets_and_shape() {
        let d = doc();
        let w = ContextWindow::around(&d, 1, 1);
        let p = Provider::Hash(HashEmbedder {
            seed: 1,
            d_sem: 8,
            position_mixing: true,
        });
        let s = embed_context(&ParamStore::new(), &w, &p, false).unwrap();
        assert_eq!(s.embeddings.shape(), &[6, 8]);
        assert_eq!(s.sentence_offsets, vec![(0, 2), (2, 3), (5, 1)]);
        let again = embed_context(&ParamStore::new(), &w, &p, false).unwrap();
        assert_eq!(s, again);
        // slicing by offsets reproduces the blocks
        let blocks: Vec<Tensor> = (0..3).map(|i| s.sentence(i)).collect();
        let refs: Vec<&Tensor> = blocks.iter().collect();
        assert_eq!(Tensor::concat_rows(&refs).unwrap(), s.embeddings);
    }

    #[test]
    fn position_mixing_separates_repeated_tokens() {
        let d = doc();
        let w = ContextWindow::around(&d, 1, 1);
        // "a" sits at rows 0 and 3
        for (mix, same) in [(true, false), (false, true)] {
            let p = Provider::Hash(HashEmbedder {
                seed: 5,
                d_sem: 6,
                position_mixing: mix,
            });
            let s = embed_context(&ParamStore::new(), &w, &p, false).unwrap();
            assert_eq!(s.embeddings.row_slice(0) == s.embeddings.row_slice(3), same);
        }
    }

    #[test]
    fn separator_is_dropped_from_output() {
        let d = doc();
        let w = ContextWindow::around(&d, 1, 1);
        let p = Provider::Hash(HashEmbedder {
            seed: 5,
            d_sem: 4,
            position_mixing: false,
        });
        let plain = embed_context(&ParamStore::new(), &w, &p, false).unwrap();
        let sep = embed_context(&ParamStore::new(), &w, &p, true).unwrap();
        // without position mixing the separator only shifts positions
        assert_eq!(plain, sep);
    }

    #[test]
    fn precomputed_returns_stored_array() {
        let dir = tempfile::tempdir().unwrap();
        let d = doc();
        let arrays: Vec<((String, usize), Tensor)> = d
            .iter()
            .map(|u| {
                let n = u.subwords.len();
                let data = (0..n * 3).map(|k| k as f64 * 0.5 + u.sentence_index as f64).collect();
                (("d".to_string(), u.sentence_index), Tensor::matrix(n, 3, data).unwrap())
            })
            .collect();
        PrecomputedStore::write(dir.path(), 3, &arrays).unwrap();
        let p = Provider::Precomputed(PrecomputedStore::load(dir.path()).unwrap());
        let w = ContextWindow::around(&d, 1, 0);
        let s = embed_context(&ParamStore::new(), &w, &p, false).unwrap();
        assert_eq!(s.embeddings, arrays[1].1);
        let lonely = [utt(7, &["x"])];
        let w = ContextWindow::around(&lonely, 0, 0);
        assert!(matches!(
            embed_context(&ParamStore::new(), &w, &p, false),
            Err(Error::Provider(_))
        ));
    }

    #[test]
    fn trainable_unknown_maps_to_unk_row() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = TrainableEmbedder::new(&mut store, &["a".into(), "b".into()], 4, &mut rng);
        assert_eq!(t.id("zzz"), 0);
        assert_eq!(t.vocabulary(), vec!["a".to_string(), "b".to_string()]);
        let d = [utt(0, &["a", "zzz"])];
        let w = ContextWindow::around(&d, 0, 0);
        let p = Provider::Trainable(t);
        let s = embed_context(&store, &w, &p, false).unwrap();
        let table = store.value(store.id("semantic.table").unwrap());
        assert_eq!(s.embeddings.row_slice(1), table.row_slice(0));
    }
}
