use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::{NumericsError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    SoftmaxRows(NodeId),
    Gather(NodeId, Vec<usize>),
    RowDiff(NodeId, Vec<(usize, usize)>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Dropout(NodeId, Array2<f64>),
    ConvMaxPool { input: NodeId, weight: NodeId, bias: NodeId, frames: usize, width: usize, argmax: Vec<usize> },
    SelectSum(NodeId, Vec<(usize, usize, f64)>),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Array2<f64> },
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax",
            Op::Gather(..) => "gather",
            Op::RowDiff(..) => "row_diff",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Dropout(..) => "dropout",
            Op::ConvMaxPool { .. } => "conv_maxpool",
            Op::SelectSum(..) => "select_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Parameters are read from the borrowed store without copying. Every
/// operation checks shapes up front and rejects non-finite results.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

fn shape(t: &Tensor) -> Vec<usize> {
    t.shape().to_vec()
}

impl<'p> Graph<'p> {
    /// Evaluation mode: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// Training mode with dropout masks drawn from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.params.value(p),
            _ => node.value.as_ref().expect("non-parameter node has a value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { node: id, op: op.name() });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { node: id, op: "input" });
        }
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Ok(NodeId(id))
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: None,
            op: Op::Param(p),
            needs_grad: true,
        });
        NodeId(id)
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
        NumericsError::Shape {
            op,
            left: shape(a),
            right: shape(b),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Self::shape_err("matmul", va, vb));
        }
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Self::shape_err("matmul_t", va, vb));
        }
        let out = va.dot(&vb.t());
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Self::shape_err("add", va, vb));
        }
        let out = va + vb;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Self::shape_err("sub", va, vb));
        }
        let out = va - vb;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Adds a 1 x c row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Self::shape_err("add_row", va, vr));
        }
        let out = va + vr;
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a 1 x c row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Self::shape_err("mul_row", va, vr));
        }
        let out = va * vr;
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(a) + c;
        self.push(out, Op::AddConst(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Per-row standardization without the affine part.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let cols = va.ncols();
        if cols < 2 {
            return Err(NumericsError::Invalid(format!("layer norm needs at least 2 features, got {cols}")));
        }
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Rows of `table` at `ids`, e.g. an embedding lookup.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.nrows()) {
            return Err(NumericsError::Invalid(format!("row {bad} out of range for {} rows", vt.nrows())));
        }
        let out = vt.select(Axis(0), ids);
        self.push(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    /// Row `j` minus row `i` for every pair.
    pub fn row_diff(&mut self, a: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let va = self.value(a);
        let mut out = Array2::zeros((pairs.len(), va.ncols()));
        for (k, &(i, j)) in pairs.iter().enumerate() {
            if i >= va.nrows() || j >= va.nrows() {
                return Err(NumericsError::Invalid(format!("row pair ({i},{j}) out of range")));
            }
            let d = &va.row(j) - &va.row(i);
            out.row_mut(k).assign(&d);
        }
        self.push(out, Op::RowDiff(a, pairs.to_vec()), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let rows = views[0].nrows();
        if let Some(v) = views.iter().find(|v| v.nrows() != rows) {
            return Err(NumericsError::Shape {
                op: "concat_cols",
                left: vec![rows, views[0].ncols()],
                right: v.shape().to_vec(),
            });
        }
        let out = concatenate(Axis(1), &views).expect("row counts checked");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start > end || end > va.ncols() {
            return Err(NumericsError::Invalid(format!("column slice {start}..{end} of {} columns", va.ncols())));
        }
        let out = va.slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start, end), &[a])
    }

    /// Inverted dropout. The identity in evaluation mode.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if self.rng.is_none() || rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let dim = self.value(a).dim();
        let rng = self.rng.as_mut().expect("training mode");
        let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let out = self.value(a) * &mask;
        self.push(out, Op::Dropout(a, mask), &[a])
    }

    /// Convolution over the frame axis followed by max-pooling over time.
    ///
    /// Each row of `input` is one flattened `rows x frames` window. `weight`
    /// holds one flattened `rows x width` filter per row; `bias` is 1 x filters.
    pub fn conv_maxpool(&mut self, input: NodeId, weight: NodeId, bias: NodeId, frames: usize, width: usize) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        if frames == 0 || vx.ncols() % frames != 0 {
            return Err(Self::shape_err("conv_maxpool", vx, vw));
        }
        let rows = vx.ncols() / frames;
        if vw.ncols() != rows * width || vb.dim() != (1, vw.nrows()) {
            return Err(Self::shape_err("conv_maxpool", vx, vw));
        }
        let filters = vw.nrows();
        let mut out = Array2::zeros((vx.nrows(), filters));
        let mut argmax = Vec::with_capacity(vx.nrows() * filters);
        for (t, x) in vx.rows().into_iter().enumerate() {
            let window = x.into_shape_with_order((rows, frames)).expect("row is contiguous");
            let (best, arg) = conv_maxpool_window(window, frames, vw.view(), vb.view());
            out.row_mut(t).assign(&ndarray::Array1::from(best));
            argmax.extend(arg);
        }
        self.push(
            out,
            Op::ConvMaxPool {
                input,
                weight,
                bias,
                frames,
                width,
                argmax,
            },
            &[input, weight, bias],
        )
    }

    /// Sum of `coef * a[r, c]` over the listed entries, as a 1 x 1 node.
    pub fn select_sum(&mut self, a: NodeId, entries: Vec<(usize, usize, f64)>) -> Result<NodeId> {
        let va = self.value(a);
        let mut total = 0.0;
        for &(r, c, k) in &entries {
            if r >= va.nrows() || c >= va.ncols() {
                return Err(NumericsError::Invalid(format!("entry ({r},{c}) out of range for {:?}", va.shape())));
            }
            total += k * va[[r, c]];
        }
        self.push(Array2::from_elem((1, 1), total), Op::SelectSum(a, entries), &[a])
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if targets.len() != vl.nrows() || targets.iter().any(|&t| t >= vl.ncols()) {
            return Err(NumericsError::Invalid(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                vl.shape()
            )));
        }
        let mut probs = vl.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), &[a])
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// that contributed to it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(NumericsError::Invalid(format!("backward needs a 1 x 1 loss, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(self.params);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |target: NodeId, delta: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[target.0].needs_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => *acc += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out.accumulate(*p, &g),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        send(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        send(*a, g.dot(self.value(*b)), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, g.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*b, -&g, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let vr = self.value(*row);
                    if self.nodes[row.0].needs_grad {
                        send(*row, (&g * va).sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    send(*a, &g * vr, &mut grads);
                }
                Op::Scale(a, k) => send(*a, g * *k, &mut grads),
                Op::AddConst(a) => send(*a, g, &mut grads),
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let mut d = g;
                    d.zip_mut_with(va, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    send(*a, d, &mut grads);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.as_ref().unwrap();
                    let cols = y.ncols() as f64;
                    let mut d = g;
                    for ((mut drow, yrow), inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = drow.sum() / cols;
                        let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv = inv * (*dv - mean_g - yv * mean_gy));
                    }
                    send(*x, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv = yv * (*dv - dot));
                    }
                    send(*a, d, &mut grads);
                }
                Op::Gather(table, ids) => {
                    let mut d = Array2::zeros(self.value(*table).dim());
                    for (k, &i) in ids.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(k);
                    }
                    send(*table, d, &mut grads);
                }
                Op::RowDiff(a, pairs) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        {
                            let mut rj = d.row_mut(j);
                            rj += &g.row(k);
                        }
                        let mut ri = d.row_mut(i);
                        ri -= &g.row(k);
                    }
                    send(*a, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        send(*p, g.slice(s![.., col..col + w]).to_owned(), &mut grads);
                        col += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    send(*a, d, &mut grads);
                }
                Op::Dropout(a, mask) => send(*a, g * mask, &mut grads),
                Op::ConvMaxPool {
                    input,
                    weight,
                    bias,
                    frames,
                    width,
                    argmax,
                } => {
                    let (vx, vw) = (self.value(*input), self.value(*weight));
                    let rows = vx.ncols() / frames;
                    let filters = vw.nrows();
                    let mut dw = Array2::<f64>::zeros(vw.dim());
                    let mut dx = Array2::<f64>::zeros(vx.dim());
                    let want_x = self.nodes[input.0].needs_grad;
                    for t in 0..vx.nrows() {
                        for f in 0..filters {
                            let gv = g[[t, f]];
                            if gv == 0.0 {
                                continue;
                            }
                            let p = argmax[t * filters + f];
                            for r in 0..rows {
                                for k in 0..*width {
                                    if p + k < *frames {
                                        let xi = r * frames + p + k;
                                        dw[[f, r * width + k]] += gv * vx[[t, xi]];
                                        if want_x {
                                            dx[[t, xi]] += gv * vw[[f, r * width + k]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    send(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    send(*weight, dw, &mut grads);
                    if want_x {
                        send(*input, dx, &mut grads);
                    }
                }
                Op::SelectSum(a, entries) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    let gv = g[[0, 0]];
                    for &(r, c, k) in entries {
                        d[[r, c]] += k * gv;
                    }
                    send(*a, d, &mut grads);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let gv = g[[0, 0]];
                    let mut d = probs * gv;
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= gv;
                    }
                    send(*logits, d, &mut grads);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    send(*a, d, &mut grads);
                }
            }
        }
        Ok(out)
    }
}

/// Convolves one `rows x f` window with every filter and max-pools over
/// time. Frames at or beyond `valid` are ignored; windows shorter than the
/// filter are zero-padded to one full position. Returns the pooled value and
/// the winning start position per filter (first position on ties).
pub fn conv_maxpool_window(
    window: ArrayView2<'_, f64>,
    valid: usize,
    weight: ArrayView2<'_, f64>,
    bias: ArrayView2<'_, f64>,
) -> (Vec<f64>, Vec<usize>) {
    let rows = window.nrows();
    let valid = valid.min(window.ncols());
    let width = weight.ncols() / rows;
    let positions = valid.max(width) - width + 1;
    let mut patches = Array2::<f64>::zeros((positions, rows * width));
    for p in 0..positions {
        for r in 0..rows {
            for k in 0..width {
                if p + k < valid {
                    patches[[p, r * width + k]] = window[[r, p + k]];
                }
            }
        }
    }
    let resp = patches.dot(&weight.t());
    let filters = weight.nrows();
    let mut best = vec![f64::NEG_INFINITY; filters];
    let mut arg = vec![0usize; filters];
    for p in 0..positions {
        for f in 0..filters {
            let v = resp[[p, f]] + bias[[0, f]];
            if v > best[f] {
                best[f] = v;
                arg[f] = p;
            }
        }
    }
    (best, arg)
}
