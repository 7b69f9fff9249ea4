//! Named parameters, freezing, and checkpoint directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor_as, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Running statistics; updated from forward passes, never by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, ParamKind::Buffer)
    }

    fn insert(&mut self, name: String, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: kind == ParamKind::Weight,
            kind,
        });
        id
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    /// Orthogonal `[rows, cols]` matrix (orthonormal columns or rows).
    pub fn add_orthogonal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        self.add(name, orthogonal(rows, cols, rng))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Sets the trainable flag on every weight whose name starts with `prefix`.
    /// Buffers are never trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.kind == ParamKind::Weight && p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Whether updates to the buffers owned by `owner_prefix` are allowed:
    /// running statistics move only while their layer's weights train.
    pub fn prefix_trainable(&self, owner_prefix: &str) -> bool {
        self.params
            .iter()
            .any(|p| p.kind == ParamKind::Weight && p.trainable && p.name.starts_with(owner_prefix))
    }

    /// Copies values for every name present in both stores.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(&id) = other.by_name.get(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                        p.name,
                        src.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Snapshot of all values keyed by name, for bit-level audits.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<u64>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }
}

/// Names whose bits differ between two snapshots.
pub fn changed_params(before: &BTreeMap<String, Vec<u64>>, after: &BTreeMap<String, Vec<u64>>) -> Vec<String> {
    before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect()
}

pub fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    // Gram-Schmidt on gaussian vectors along the longer axis.
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    kind: ParamKind,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamIndex {
    version: u32,
    params: Vec<ParamEntry>,
}

fn file_name(name: &str) -> String {
    format!("{}.msst", name.replace('/', "_"))
}

/// Writes one TensorFile per parameter plus `params.json`.
pub fn save_params(store: &ParamStore, dir: &Path) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let file = file_name(&p.name);
        write_tensor_as(pdir.join(&file), &p.value, DType::F64)?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            kind: p.kind,
            file,
        });
    }
    let index = ParamIndex {
        version: 1,
        params: entries,
    };
    let path = dir.join("params.json");
    let text = serde_json::to_string_pretty(&index).expect("serializable");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_params(dir: &Path) -> Result<ParamStore> {
    let path = dir.join("params.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: ParamIndex =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut store = ParamStore::new();
    for e in index.params {
        let t = read_tensor(dir.join("params").join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: file shape {:?} vs index {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        let id = store.insert(e.name, t, e.kind);
        store.get_mut(id).trainable = e.trainable;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(6, 4, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..6).map(|r| q.get2(r, a) * q.get2(r, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn freezing_keeps_values() {
        let mut s = ParamStore::new();
        let id = s.add("enc.global.w", Tensor::row(vec![1.0, 2.0]));
        s.add("enc.sentence.w", Tensor::row(vec![3.0]));
        s.set_trainable_prefix("enc.global", false);
        assert!(!s.get(id).trainable);
        assert_eq!(s.value(id).data(), &[1.0, 2.0]);
        assert_eq!(s.trainable_names(), vec!["enc.sentence.w"]);
    }

    #[test]
    fn buffers_never_become_trainable() {
        let mut s = ParamStore::new();
        let b = s.add_buffer("norm.mean", Tensor::row(vec![0.0]));
        s.set_trainable_prefix("norm", true);
        assert!(!s.get(b).trainable);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_uniform("a/w", &[3, 2], 3, &mut rng);
        let b = s.add_buffer("a/mean", Tensor::row(vec![0.25]));
        s.set_trainable_prefix("a", false);
        save_params(&s, dir.path()).unwrap();
        let back = load_params(dir.path()).unwrap();
        assert_eq!(back.snapshot(), s.snapshot());
        assert_eq!(back.get(b).kind, ParamKind::Buffer);
        assert!(back.trainable_names().is_empty());
    }
}
