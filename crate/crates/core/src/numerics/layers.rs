//! Parameterized building blocks: affine maps, layer norm, the two-layer
//! feed-forward net, the prosody CNN and the self-attention encoder.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::{NumericsError, Result};

/// Returns the parameter called `name`, creating it with `init` if absent.
/// Loading a checkpoint pre-populates the store, so the same constructors
/// serve both fresh models and restored ones.
fn get_or_add(store: &mut ParamStore, name: &str, rows: usize, cols: usize, init: impl FnOnce(&mut ParamStore) -> ParamId) -> ParamId {
    match store.id(name) {
        Some(id) => {
            let dim = store.value(id).dim();
            assert_eq!(dim, (rows, cols), "parameter {name} has shape {dim:?}, expected ({rows}, {cols})");
            id
        }
        None => init(store),
    }
}

pub fn linear_param<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
    get_or_add(store, name, fan_in, fan_out, |s| s.add_linear(name, fan_in, fan_out, rng))
}

pub fn const_param(store: &mut ParamStore, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
    get_or_add(store, name, rows, cols, |s| s.add_const(name, rows, cols, value))
}

pub fn uniform_param<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut R) -> ParamId {
    get_or_add(store, name, rows, cols, |s| s.add_uniform(name, rows, cols, scale, rng))
}

/// `x W + b`
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Linear {
            weight: linear_param(store, &format!("{name}.w"), fan_in, fan_out, rng),
            bias: bias.then(|| const_param(store, &format!("{name}.b"), 1, fan_out, 0.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: const_param(store, &format!("{name}.gain"), 1, dim, 1.0),
            shift: const_param(store, &format!("{name}.shift"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.normalize_rows(x)?;
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

/// `W2 relu(W1 x + b1) + b2`, with optional dropout on the hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl Ffn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, dropout: f64, rng: &mut R) -> Self {
        Ffn {
            inner: Linear::new(store, &format!("{name}.1"), d_in, d_hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.2"), d_hidden, d_out, true, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.dropout)?;
        self.outer.forward(g, h)
    }
}

/// Graph-level FFN over explicit weight nodes; shapes are checked.
pub fn ffn(g: &mut Graph, x: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_row(y, b2)
}

/// One bank of same-width filters per entry of `widths`; outputs are
/// max-pooled over time and concatenated.
#[derive(Debug, Clone)]
pub struct ConvBank {
    pub rows: usize,
    pub banks: Vec<(usize, ParamId, ParamId)>,
}

impl ConvBank {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, widths: &[usize], filters: usize, rng: &mut R) -> Self {
        let banks = widths
            .iter()
            .map(|&w| {
                let scale = 1.0 / ((rows * w) as f64).sqrt();
                let weight = uniform_param(store, &format!("{name}.w{w}"), filters, rows * w, scale, rng);
                let bias = const_param(store, &format!("{name}.b{w}"), 1, filters, 0.0);
                (w, weight, bias)
            })
            .collect();
        ConvBank { rows, banks }
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        self.banks.iter().map(|(_, w, _)| store.value(*w).nrows()).sum()
    }

    /// `windows` has one flattened `rows x frames` window per row.
    pub fn forward(&self, g: &mut Graph, windows: NodeId, frames: usize) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(self.banks.len());
        for &(w, weight, bias) in &self.banks {
            let wn = g.param(weight);
            let bn = g.param(bias);
            parts.push(g.conv_maxpool(windows, wn, bn, frames, w)?);
        }
        g.concat_cols(&parts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Longest token sequence accepted, not counting the two boundary sentinels.
    pub max_len: usize,
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 8,
            d_model: 1536,
            d_kv: 96,
            d_ff: 2048,
            dropout: 0.3,
            max_len: 270,
            positional: true,
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    norm_attn: LayerNorm,
    ffn: Ffn,
    norm_ffn: LayerNorm,
}

/// Post-norm transformer encoder with learned position embeddings.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    positions: ParamId,
    norm_in: LayerNorm,
    layers: Vec<EncoderLayer>,
}

/// Sentinel positions added around every sequence.
pub const SENTINELS: usize = 2;

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let hk = config.heads * config.d_kv;
        let positions = uniform_param(store, &format!("{name}.pos"), config.max_len + SENTINELS, d, 0.1, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                EncoderLayer {
                    query: Linear::new(store, &format!("{p}.q"), d, hk, false, rng),
                    key: Linear::new(store, &format!("{p}.k"), d, hk, false, rng),
                    value: Linear::new(store, &format!("{p}.v"), d, hk, false, rng),
                    proj: Linear::new(store, &format!("{p}.o"), hk, d, false, rng),
                    norm_attn: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    ffn: Ffn::new(store, &format!("{p}.ff"), d, config.d_ff, d, config.dropout, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        Encoder {
            config: config.clone(),
            positions,
            norm_in: LayerNorm::new(store, &format!("{name}.ln0"), d),
            layers,
        }
    }

    /// Encodes a `T x d_model` sequence (sentinels included).
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let len = g.value(x).nrows();
        if len > self.config.max_len + SENTINELS {
            return Err(NumericsError::TooLong {
                len: len.saturating_sub(SENTINELS),
                max: self.config.max_len,
            });
        }
        let mut h = x;
        if self.config.positional {
            let pos = g.param(self.positions);
            let idx: Vec<usize> = (0..len).collect();
            let p = g.gather(pos, &idx)?;
            h = g.add(h, p)?;
        }
        // Inputs of very different scales meet here, e.g. word vectors and prosody.
        h = self.norm_in.forward(g, h)?;
        h = g.dropout(h, self.config.dropout)?;
        for layer in &self.layers {
            let a = self.attention(g, layer, h)?;
            let a = g.dropout(a, self.config.dropout)?;
            let r = g.add(h, a)?;
            h = layer.norm_attn.forward(g, r)?;
            let f = layer.ffn.forward(g, h)?;
            let f = g.dropout(f, self.config.dropout)?;
            let r = g.add(h, f)?;
            h = layer.norm_ffn.forward(g, r)?;
        }
        Ok(h)
    }

    fn attention(&self, g: &mut Graph, layer: &EncoderLayer, x: NodeId) -> Result<NodeId> {
        let dk = self.config.d_kv;
        let q = layer.query.forward(g, x)?;
        let k = layer.key.forward(g, x)?;
        let v = layer.value.forward(g, x)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        layer.proj.forward(g, cat)
    }
}

/// Stacks `rows x frames` windows into one row each, row-major.
pub fn flatten_windows(windows: &[Array2<f64>]) -> Array2<f64> {
    let cols = windows.first().map_or(0, |w| w.len());
    let mut out = Array2::zeros((windows.len(), cols));
    for (i, w) in windows.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::Array1::from_iter(w.iter().copied()));
    }
    out
}
