//! Named parameter storage, graph binding and checkpoint files.
//!
//! Model components hold [`ParamId`]s into one [`ParamStore`]. Two components
//! that hold the same id share the parameter: binding the store into a graph
//! yields one leaf per parameter, so gradients from every use accumulate on it.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// `N(0, std^2)` initialised parameter.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in t.data_mut() {
                *v = normal.sample(rng);
            }
        }
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g` as a leaf. `trainable` decides which
    /// leaves require gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .ids()
            .map(|id| g.leaf(self.values[id.0].clone(), trainable(id)))
            .collect();
        Bound { vars }
    }

    /// Binds everything without gradients, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind(g, |_| false)
    }

    pub fn save(&self, path: &Path, config: &serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            config: config.clone(),
            params: self
                .ids()
                .map(|id| ParamEntry {
                    name: self.names[id.0].clone(),
                    shape: self.values[id.0].shape().to_vec(),
                })
                .collect(),
        };
        let mut out = Vec::with_capacity(self.numel() * 8 + 1024);
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for t in &self.values {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Overwrites every parameter from a checkpoint. Names, order and shapes
    /// must match this store exactly. Returns the recorded configuration.
    pub fn load(&mut self, path: &Path) -> Result<serde_json::Value> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", line.trim_end())));
        }
        line.clear();
        reader.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(&line)?;
        if header.params.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                header.params.len()
            )));
        }
        for (id, entry) in self.ids().zip(&header.params) {
            let t = &self.values[id.0];
            if entry.name != self.names[id.0] || entry.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: expected {} {:?}, found {} {:?}",
                    id.0,
                    self.names[id.0],
                    t.shape(),
                    entry.name,
                    entry.shape
                )));
            }
        }
        let mut buf = [0u8; 8];
        for t in &mut self.values {
            for v in t.data_mut() {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if reader.read(&mut buf)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
        }
        Ok(header.config)
    }
}

const CHECKPOINT_MAGIC: &str = "KBVQA-CHECKPOINT 1";

/// Reads only the configuration recorded in a checkpoint header.
pub fn read_checkpoint_config(path: &Path) -> Result<serde_json::Value> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}", line.trim_end())));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(&line)?;
    Ok(header.config)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
