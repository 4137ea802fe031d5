//! Named parameter tensors with frozen flags and a binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//! `b"TTRC"`, `u32` version, `u32` module-name length and bytes, `u32`
//! tensor count, then per tensor `u32` name length, name bytes, `u64` rows,
//! `u64` cols; finally every tensor's values as `f64` in table order.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"TTRC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint holds module `{found}`, expected `{expected}`")]
    Module { expected: String, found: String },
    #[error("checkpoint tensor table does not match the configured model: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    module: String,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(module: impl Into<String>) -> Self {
        ParamStore { module: module.into(), params: Vec::new() }
    }

    pub fn module(&self) -> &str {
        &self.module
    }

    pub fn set_module(&mut self, module: impl Into<String>) {
        self.module = module.into();
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// A store holding `self`'s tensors followed by `other`'s.
    pub fn concat(&self, other: &ParamStore) -> ParamStore {
        let mut out = self.clone();
        for p in &other.params {
            assert!(out.params.iter().all(|q| q.name != p.name), "duplicate parameter {}", p.name);
            out.params.push(p.clone());
        }
        out
    }

    /// Splits off the tensors from index `at` onward into a store named
    /// `module`.
    pub fn split_off(&mut self, at: usize, module: impl Into<String>) -> ParamStore {
        ParamStore { module: module.into(), params: self.params.split_off(at) }
    }

    /// Leaf nodes for every parameter, in store order; frozen parameters
    /// become constants so no gradient is accumulated for them.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.value.clone(), !p.frozen)).collect()
    }

    /// Gradients for every parameter in store order, zero where none flowed.
    pub fn collect_grads(&self, grads: &Gradients, nodes: &[NodeId]) -> Vec<Matrix> {
        self.params
            .iter()
            .zip(nodes)
            .map(|(p, &n)| grads.get(n).cloned().unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols())))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect()
    }

    /// Replaces every value, keeping names and frozen flags.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), CheckpointError> {
        self.check_table(other)?;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value = q.value.clone();
        }
        Ok(())
    }

    fn check_table(&self, other: &ParamStore) -> Result<(), CheckpointError> {
        if self.params.len() != other.params.len() {
            return Err(CheckpointError::Shape(format!("{} tensors vs {}", other.params.len(), self.params.len())));
        }
        for (p, q) in self.params.iter().zip(&other.params) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(CheckpointError::Shape(format!(
                    "`{}` {:?} vs expected `{}` {:?}",
                    q.name,
                    q.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.module.len() as u32).to_le_bytes());
        out.extend_from_slice(self.module.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        }
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let module = r.string()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            table.push((name, rows, cols));
        }
        let mut params = Vec::with_capacity(table.len());
        for (name, rows, cols) in table {
            let n = rows.checked_mul(cols).ok_or_else(|| CheckpointError::Format("tensor too large".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Param { name, value: Matrix::from_vec(rows, cols, data), frozen: false });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(ParamStore { module, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads `path` into a store with the same tensor table as `self`; the
    /// module name must start with `module_prefix`.
    pub fn load_into(&mut self, path: &Path, module_prefix: &str) -> Result<(), CheckpointError> {
        let loaded = Self::load(path)?;
        if !loaded.module.starts_with(module_prefix) {
            return Err(CheckpointError::Module { expected: module_prefix.to_string(), found: loaded.module });
        }
        self.load_values(&loaded)?;
        self.module = loaded.module;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format("name is not utf-8".into()))
    }
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut rng = seeded_rng(1, 0);
        let mut s = ParamStore::new("test");
        s.add_uniform("a", 3, 4, 4, &mut rng);
        s.add_uniform("b", 1, 4, 4, &mut rng);
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = store();
        s.get_mut(ParamId(0)).set(0, 0, f64::MIN_POSITIVE);
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_mismatched_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        store().save(&p).unwrap();
        let mut other = ParamStore::new("test");
        other.add("a", Matrix::zeros(3, 5));
        other.add("b", Matrix::zeros(1, 4));
        assert!(matches!(other.load_into(&p, "test"), Err(CheckpointError::Shape(_))));
        assert!(matches!(store().load_into(&p, "other"), Err(CheckpointError::Module { .. })));
        let bytes = store().to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn init_within_bounds() {
        let s = store();
        assert!(s.get(ParamId(0)).data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = store();
        s.set_frozen(true);
        let mut g = Graph::new();
        let nodes = s.bind(&mut g);
        assert!(nodes.iter().all(|&n| !g.requires_grad(n)));
    }
}
