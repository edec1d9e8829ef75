//! Named parameter storage, tape binding, initialization and checkpoints.
//!
//! A checkpoint is a pair of files: a flat little-endian `f64` blob and a
//! JSON index mapping each parameter name to its shape and byte offset.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::dim("param_set", cur.shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Overwrites all values from a same-shaped list.
    pub fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::dim("assign", &[self.tensors.len()], &[values.len()]));
        }
        for (i, v) in values.iter().enumerate() {
            self.set(ParamId(i), v.clone())?;
        }
        Ok(())
    }

    /// `p ← p − lr·g` for every parameter with a gradient.
    pub fn sgd_step(&mut self, grads: &[Option<Tensor>], lr: f64) {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(p, d)| *p -= lr * d);
            }
        }
    }

    pub fn save(&self, index_path: &Path) -> Result<()> {
        let bin_path = blob_path(index_path);
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        let mut params = BTreeMap::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            params.insert(
                name.clone(),
                IndexEntry {
                    shape: t.shape().to_vec(),
                    offset: blob.len() as u64,
                },
            );
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = CheckpointIndex {
            dtype: "float64".into(),
            byte_order: "little".into(),
            blob: bin_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            params,
        };
        fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
        let json = serde_json::to_string_pretty(&index)?;
        fs::write(index_path, json).map_err(|e| Error::io(index_path, e))
    }

    /// Loads values for every registered parameter from a checkpoint.
    pub fn load(&mut self, index_path: &Path) -> Result<()> {
        let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
        let index: CheckpointIndex = serde_json::from_str(&text)?;
        let bin_path = index_path.with_file_name(&index.blob);
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        for i in 0..self.tensors.len() {
            let name = &self.names[i];
            let entry = index
                .params
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
            let t = &mut self.tensors[i];
            if entry.shape != t.shape() {
                return Err(Error::dim("checkpoint", t.shape(), &entry.shape));
            }
            let start = entry.offset as usize;
            let end = start + t.len() * 8;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::Validation(format!("checkpoint blob too short for {name}"))
            })?;
            for (v, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

/// Blob path paired with a checkpoint index (`x.json` → `x.bin`).
pub fn blob_path(index_path: &Path) -> PathBuf {
    index_path.with_extension("bin")
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    dtype: String,
    byte_order: String,
    blob: String,
    params: BTreeMap<String, IndexEntry>,
}

/// Binds stored parameters onto a tape on first use.
pub struct Graph<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Graph<'t, 's> {
    /// Parameters become trainable leaves.
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters become constants; for inference.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Substitutes an existing tape value for a parameter.
    pub fn bind(&self, id: ParamId, var: Var<'t>) -> Result<()> {
        let expect = self.store.get(id).shape();
        if var.shape() != expect {
            return Err(Error::dim("bind", expect, &var.shape()));
        }
        self.bound.borrow_mut()[id.0] = Some(var);
        Ok(())
    }

    /// Binds every parameter, in store order, to the given vars.
    pub fn bind_all(&self, vars: &[Var<'t>]) -> Result<()> {
        if vars.len() != self.store.len() {
            return Err(Error::dim("bind_all", &[self.store.len()], &[vars.len()]));
        }
        for (i, v) in vars.iter().enumerate() {
            self.bind(ParamId(i), *v)?;
        }
        Ok(())
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients of every parameter used so far, in store order.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| v.grad()))
            .collect()
    }
}

/// Truncated normal at two standard deviations.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
