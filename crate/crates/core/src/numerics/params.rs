use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learned arrays, kept in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Uniform in [-scale, scale].
    pub fn add_uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut R) -> ParamId {
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..=scale));
        self.add(name, value)
    }

    /// Uniform with the bound scaled by the fan-in (`rows` for a `x W` map).
    pub fn add_linear<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add_uniform(name, fan_in, fan_out, scale, rng)
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    // Checkpoint layout, little-endian throughout:
    //   magic "TPCK", version u8,
    //   metadata length u32 + UTF-8 metadata,
    //   parameter count u32,
    //   per parameter: name length u16 + name, rows u32, cols u32,
    //   then every parameter's values as f64 in registration order, row-major.

    pub fn write_checkpoint<W: Write>(&self, out: &mut W, metadata: &str) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION])?;
        out.write_all(&(metadata.len() as u32).to_le_bytes())?;
        out.write_all(metadata.as_bytes())?;
        out.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, v) in self.names.iter().zip(&self.values) {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(v.nrows() as u32).to_le_bytes())?;
            out.write_all(&(v.ncols() as u32).to_le_bytes())?;
        }
        for v in &self.values {
            for x in v.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, returning the store and its metadata string.
    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(ParamStore, String)> {
        let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        if magic[4] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", magic[4])));
        }
        let meta_len = read_u32(input)? as usize;
        let mut meta = vec![0u8; meta_len];
        input.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let meta = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
        let count = read_u32(input)? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len = [0u8; 2];
            input.read_exact(&mut len).map_err(|_| bad("truncated shape table"))?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            input.read_exact(&mut name).map_err(|_| bad("truncated shape table"))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rows = read_u32(input)? as usize;
            let cols = read_u32(input)? as usize;
            shapes.push((name, rows, cols));
        }
        let mut store = ParamStore::new();
        for (name, rows, cols) in shapes {
            let mut buf = vec![0u8; rows * cols * 8];
            input.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
            let values: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(&name, Array2::from_shape_vec((rows, cols), values).unwrap());
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok((store, meta))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
const CHECKPOINT_VERSION: u8 = 1;

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| NumericsError::Checkpoint("truncated integer".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Per-parameter gradients; parameters a loss never touched stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= k;
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Rescale gradients whose global norm exceeds this; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            clip_norm: 5.0,
        }
    }
}

/// Applies gradient steps to a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        let adam = config.kind == OptimizerKind::Adam;
        Optimizer {
            config,
            step: 0,
            first: if adam { zeros() } else { Vec::new() },
            second: if adam { zeros() } else { Vec::new() },
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let mut factor = 1.0;
        if self.config.clip_norm > 0.0 {
            let n = grads.norm();
            if n > self.config.clip_norm {
                factor = self.config.clip_norm / n;
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (i, g) in grads.grads.iter().enumerate() {
                    if let Some(g) = g {
                        store.values[i].scaled_add(-lr * factor, g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (i, g) in grads.grads.iter().enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    match g {
                        Some(g) => {
                            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                                let g = g * factor;
                                *m = BETA1 * *m + (1.0 - BETA1) * g;
                                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                            });
                        }
                        None => {
                            m.mapv_inplace(|x| x * BETA1);
                            v.mapv_inplace(|x| x * BETA2);
                        }
                    }
                    ndarray::Zip::from(&mut store.values[i]).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                    });
                }
            }
        }
    }
}
