use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{AdError, Mat, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn register(&mut self, name: &str, value: Mat) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Xavier-uniform weights, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Mat::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..=bound));
        self.register(name, value)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.register(name, Mat::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.register(name, Mat::from_elem((rows, cols), v))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_checkpoint(&self, header: serde_json::Value) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            header,
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, v)| NamedTensor { name: name.clone(), shape: [v.nrows(), v.ncols()], data: v.iter().copied().collect() })
                .collect(),
        }
    }

    /// Overwrites every registered tensor from `ckpt`, which must match names and shapes exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(AdError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        if ckpt.tensors.len() != self.len() {
            return Err(AdError::Checkpoint(format!("{} tensors, expected {}", ckpt.tensors.len(), self.len())));
        }
        for t in &ckpt.tensors {
            let id = self.id(&t.name).ok_or_else(|| AdError::UnknownParam(t.name.clone()))?;
            let cur = self.value(id).dim();
            if cur != (t.shape[0], t.shape[1]) || t.data.len() != cur.0 * cur.1 {
                return Err(AdError::Checkpoint(format!("`{}` has shape {:?}, expected {:?}", t.name, t.shape, cur)));
            }
            *self.value_mut(id) = Mat::from_shape_vec(cur, t.data.clone()).expect("length checked");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Versioned JSON snapshot of a [`ParamStore`] plus a caller-defined header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub header: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
