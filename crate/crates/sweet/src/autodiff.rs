//! Reverse-mode differentiation over the closed op set needed by the model:
//! matrix multiply, mode-n products, elementwise arithmetic, GELU, SiLU,
//! softmax, layer/RMS normalization, slicing and concatenation, Kronecker
//! products, token assembly, and sum reductions.
//!
//! The tape is static: values are computed eagerly as nodes are pushed, and
//! the graph is rebuilt from scratch every optimization step. `backward`
//! walks the node list in reverse creation order (which is a topological
//! order by construction) and accumulates gradients with a fixed iteration
//! order, so two backward passes over the same tape are bit-identical.

use std::collections::BTreeMap;

use crate::error::{Result, SweetError};
use crate::tensor::{self, DenseMatrix, DenseTensor};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        eps: f64,
    },
    ModeN {
        t: NodeId,
        m: NodeId,
        mode: usize,
    },
    SliceMode1(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Rope {
        x: NodeId,
        positions: Vec<usize>,
        base: f64,
    },
    GatherRows(NodeId, Vec<usize>),
    AssembleTokens {
        latents: Option<NodeId>,
        mask_token: NodeId,
        visible: Vec<usize>,
        n_total: usize,
    },
    Kron(NodeId, NodeId),
    Sum(NodeId),
    SumSq(NodeId),
    AddN(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: DenseTensor,
}

/// Gradients keyed by parameter name; shapes mirror the parameter values.
pub type Gradients = BTreeMap<String, DenseTensor>;

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mat(value: &DenseTensor, op: &'static str) -> Result<(usize, usize)> {
    if value.ndim() != 2 {
        return Err(SweetError::Shape {
            op,
            expected: "2-D value".into(),
            got: format!("{:?}", value.shape()),
        });
    }
    Ok((value.shape()[0], value.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: DenseTensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: DenseTensor) -> NodeId {
        let id = self.push(Op::Param, value);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn param_matrix(&mut self, name: &str, value: &DenseMatrix) -> NodeId {
        self.param(name, DenseTensor::from_matrix(value))
    }

    /// Non-trainable leaf; gradients never flow out of it.
    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn constant_matrix(&mut self, value: &DenseMatrix) -> NodeId {
        self.constant(DenseTensor::from_matrix(value))
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(DenseTensor::new(vec![1], vec![v]).unwrap())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let am = self.nodes[a].value.to_matrix()?;
        let bm = self.nodes[b].value.to_matrix()?;
        let c = tensor::matmul(&am, &bm)?;
        Ok(self.push(Op::MatMul(a, b), DenseTensor::from_matrix(&c)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let am = self.nodes[a].value.to_matrix()?;
        Ok(self.push(
            Op::Transpose(a),
            DenseTensor::from_matrix(&am.transpose()),
        ))
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(SweetError::Shape {
                op,
                expected: format!("{:?}", self.nodes[a].value.shape()),
                got: format!("{:?}", self.nodes[b].value.shape()),
            });
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = DenseTensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        Ok(self.push(make(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|&x| x * c).collect();
        let value = DenseTensor::new(self.nodes[a].value.shape().to_vec(), data).unwrap();
        self.push(Op::Scale(a, c), value)
    }

    /// Adds a length-m bias vector to every row of an n x m matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = mat(&self.nodes[a].value, "add_bias")?;
        let bv = &self.nodes[bias].value;
        if bv.shape() != [m] {
            return Err(SweetError::Shape {
                op: "add_bias",
                expected: format!("[{m}] bias"),
                got: format!("{:?}", bv.shape()),
            });
        }
        let mut data = self.nodes[a].value.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += bv.data()[j];
            }
        }
        let value = DenseTensor::new(vec![n, m], data)?;
        Ok(self.push(Op::AddBias(a, bias), value))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let value = DenseTensor::new(self.nodes[a].value.shape().to_vec(), data).unwrap();
        self.push(Op::Gelu(a), value)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let value = DenseTensor::new(self.nodes[a].value.shape().to_vec(), data).unwrap();
        self.push(Op::Silu(a), value)
    }

    /// Row-wise softmax with the max-subtraction stabilization.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = mat(&self.nodes[a].value, "softmax_rows")?;
        let src = self.nodes[a].value.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                data[i * m + j] = e;
                denom += e;
            }
            for j in 0..m {
                data[i * m + j] /= denom;
            }
        }
        let value = DenseTensor::new(vec![n, m], data)?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (n, m) = mat(&self.nodes[x].value, "layer_norm")?;
        for (nm, id) in [("gain", gain), ("bias", bias)] {
            if self.nodes[id].value.shape() != [m] {
                return Err(SweetError::Shape {
                    op: "layer_norm",
                    expected: format!("[{m}] {nm}"),
                    got: format!("{:?}", self.nodes[id].value.shape()),
                });
            }
        }
        let src = self.nodes[x].value.data();
        let g = self.nodes[gain].value.data();
        let b = self.nodes[bias].value.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let sigma = (var + eps).sqrt();
            for j in 0..m {
                data[i * m + j] = g[j] * (row[j] - mean) / sigma + b[j];
            }
        }
        let value = DenseTensor::new(vec![n, m], data)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (n, m) = mat(&self.nodes[x].value, "rms_norm")?;
        if self.nodes[gain].value.shape() != [m] {
            return Err(SweetError::Shape {
                op: "rms_norm",
                expected: format!("[{m}] gain"),
                got: format!("{:?}", self.nodes[gain].value.shape()),
            });
        }
        let src = self.nodes[x].value.data();
        let g = self.nodes[gain].value.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let rms = (row.iter().map(|&v| v * v).sum::<f64>() / m as f64 + eps).sqrt();
            for j in 0..m {
                data[i * m + j] = g[j] * row[j] / rms;
            }
        }
        let value = DenseTensor::new(vec![n, m], data)?;
        Ok(self.push(Op::RmsNorm { x, gain, eps }, value))
    }

    pub fn mode_n_product(&mut self, t: NodeId, m: NodeId, mode: usize) -> Result<NodeId> {
        let mm = self.nodes[m].value.to_matrix()?;
        let out = tensor::mode_n_product(&self.nodes[t].value, &mm, mode)?;
        Ok(self.push(Op::ModeN { t, m, mode }, out))
    }

    /// Extracts mode-1 slice `idx` of a 3-D tensor as a matrix.
    pub fn slice_mode1(&mut self, t: NodeId, idx: usize) -> Result<NodeId> {
        let v = &self.nodes[t].value;
        if v.ndim() != 3 {
            return Err(SweetError::Shape {
                op: "slice_mode1",
                expected: "3-D value".into(),
                got: format!("{:?}", v.shape()),
            });
        }
        let (s, r, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        if idx >= s {
            return Err(SweetError::Argument(format!(
                "slice index {idx} out of range 0..{s}"
            )));
        }
        let data = v.data()[idx * r * c..(idx + 1) * r * c].to_vec();
        let value = DenseTensor::new(vec![r, c], data)?;
        Ok(self.push(Op::SliceMode1(t, idx), value))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (n, m) = mat(&self.nodes[a].value, "slice_cols")?;
        if lo >= hi || hi > m {
            return Err(SweetError::Argument(format!(
                "column range {lo}..{hi} invalid for {m} cols"
            )));
        }
        let src = self.nodes[a].value.data();
        let w = hi - lo;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src[i * m + lo..i * m + hi]);
        }
        let value = DenseTensor::new(vec![n, w], data)?;
        Ok(self.push(Op::SliceCols(a, lo, hi), value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(SweetError::Argument("concat_cols of zero parts".into()));
        }
        let n = mat(&self.nodes[parts[0]].value, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = mat(&self.nodes[p].value, "concat_cols")?;
            if pn != n {
                return Err(SweetError::Shape {
                    op: "concat_cols",
                    expected: format!("{n} rows"),
                    got: format!("{pn} rows"),
                });
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.nodes[p].value.data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let value = DenseTensor::new(vec![n, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(SweetError::Argument("concat_rows of zero parts".into()));
        }
        let m = mat(&self.nodes[parts[0]].value, "concat_rows")?.1;
        let mut total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pn, pm) = mat(&self.nodes[p].value, "concat_rows")?;
            if pm != m {
                return Err(SweetError::Shape {
                    op: "concat_rows",
                    expected: format!("{m} cols"),
                    got: format!("{pm} cols"),
                });
            }
            total += pn;
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let value = DenseTensor::new(vec![total, m], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Rotary position encoding on an n x d matrix (d even); row i uses
    /// `positions[i]` and frequency `base^(-2k/d)` for the pair (2k, 2k+1).
    pub fn rope(&mut self, x: NodeId, positions: &[usize], base: f64) -> Result<NodeId> {
        let (n, d) = mat(&self.nodes[x].value, "rope")?;
        if d % 2 != 0 {
            return Err(SweetError::Argument(format!(
                "rope requires an even width, got {d}"
            )));
        }
        if positions.len() != n {
            return Err(SweetError::Argument(format!(
                "rope positions len {} != rows {n}",
                positions.len()
            )));
        }
        let src = self.nodes[x].value.data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let pos = positions[i] as f64;
            for k in 0..d / 2 {
                let theta = pos * base.powf(-(2.0 * k as f64) / d as f64);
                let (s, c) = theta.sin_cos();
                let a = src[i * d + 2 * k];
                let b = src[i * d + 2 * k + 1];
                data[i * d + 2 * k] = a * c - b * s;
                data[i * d + 2 * k + 1] = a * s + b * c;
            }
        }
        let value = DenseTensor::new(vec![n, d], data)?;
        Ok(self.push(
            Op::Rope {
                x,
                positions: positions.to_vec(),
                base,
            },
            value,
        ))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (n, m) = mat(&self.nodes[a].value, "gather_rows")?;
        if indices.is_empty() {
            return Err(SweetError::Argument("gather_rows of zero indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(SweetError::Argument(format!(
                "gather index {bad} out of range 0..{n}"
            )));
        }
        let src = self.nodes[a].value.data();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let value = DenseTensor::new(vec![indices.len(), m], data)?;
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), value))
    }

    /// Builds the full n_total x d token sequence for the decoder: row
    /// `visible[j]` comes from latent row j, every other row is the mask
    /// token. `latents` is None when every position is masked.
    pub fn assemble_tokens(
        &mut self,
        latents: Option<NodeId>,
        mask_token: NodeId,
        visible: &[usize],
        n_total: usize,
    ) -> Result<NodeId> {
        let mt = &self.nodes[mask_token].value;
        if mt.ndim() != 1 {
            return Err(SweetError::Shape {
                op: "assemble_tokens",
                expected: "1-D mask token".into(),
                got: format!("{:?}", mt.shape()),
            });
        }
        let d = mt.shape()[0];
        if let Some(&bad) = visible.iter().find(|&&i| i >= n_total) {
            return Err(SweetError::Argument(format!(
                "visible index {bad} out of range 0..{n_total}"
            )));
        }
        match latents {
            Some(l) => {
                let (v, ld) = mat(&self.nodes[l].value, "assemble_tokens")?;
                if v != visible.len() || ld != d {
                    return Err(SweetError::Shape {
                        op: "assemble_tokens",
                        expected: format!("{}x{d} latents", visible.len()),
                        got: format!("{v}x{ld}"),
                    });
                }
            }
            None => {
                if !visible.is_empty() {
                    return Err(SweetError::Contract(
                        "assemble_tokens without latents requires no visible positions".into(),
                    ));
                }
            }
        }
        let mut data = vec![0.0; n_total * d];
        for i in 0..n_total {
            data[i * d..(i + 1) * d].copy_from_slice(self.nodes[mask_token].value.data());
        }
        if let Some(l) = latents {
            let src = self.nodes[l].value.data();
            for (j, &i) in visible.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(&src[j * d..(j + 1) * d]);
            }
        }
        let value = DenseTensor::new(vec![n_total, d], data)?;
        Ok(self.push(
            Op::AssembleTokens {
                latents,
                mask_token,
                visible: visible.to_vec(),
                n_total,
            },
            value,
        ))
    }

    pub fn kron(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let am = self.nodes[a].value.to_matrix()?;
        let bm = self.nodes[b].value.to_matrix()?;
        let out = tensor::kronecker(&am, &bm);
        Ok(self.push(Op::Kron(a, b), DenseTensor::from_matrix(&out)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Op::Sum(a), DenseTensor::new(vec![1], vec![s]).unwrap())
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().map(|&x| x * x).sum();
        self.push(Op::SumSq(a), DenseTensor::new(vec![1], vec![s]).unwrap())
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(SweetError::Argument("add_n of zero parts".into()));
        }
        let shape = self.nodes[parts[0]].value.shape().to_vec();
        let mut data = vec![0.0; self.nodes[parts[0]].value.len()];
        for &p in parts {
            if self.nodes[p].value.shape() != shape.as_slice() {
                return Err(SweetError::Shape {
                    op: "add_n",
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", self.nodes[p].value.shape()),
                });
            }
            for (o, &x) in data.iter_mut().zip(self.nodes[p].value.data()) {
                *o += x;
            }
        }
        let value = DenseTensor::new(shape, data)?;
        Ok(self.push(Op::AddN(parts.to_vec()), value))
    }

    /// Reverse pass from a scalar loss node. Parameters unreachable from
    /// the loss get exact-zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.len() != 1 {
            return Err(SweetError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut out = Gradients::new();
        for (name, id) in &self.params {
            let shape = self.nodes[*id].value.shape().to_vec();
            let data = grads[*id]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[*id].value.len()]);
            out.insert(name.clone(), DenseTensor::new(shape, data)?);
        }
        Ok(out)
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        for (o, &d) in slot.iter_mut().zip(delta) {
            *o += d;
        }
    }

    fn accumulate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let am = self.nodes[*a].value.to_matrix()?;
                let bm = self.nodes[*b].value.to_matrix()?;
                let gm = DenseMatrix::new(am.rows(), bm.cols(), g.to_vec())?;
                let da = tensor::matmul(&gm, &bm.transpose())?;
                let db = tensor::matmul(&am.transpose(), &gm)?;
                self.add_grad(grads, *a, da.data());
                self.add_grad(grads, *b, db.data());
            }
            Op::Transpose(a) => {
                let v = &self.nodes[id].value;
                let (n, m) = (v.shape()[0], v.shape()[1]);
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                self.add_grad(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let da: Vec<f64> = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                self.add_grad(grads, *a, &da);
                self.add_grad(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::AddBias(a, bias) => {
                self.add_grad(grads, *a, g);
                let (n, m) = {
                    let v = &self.nodes[*a].value;
                    (v.shape()[0], v.shape()[1])
                };
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += g[i * m + j];
                    }
                }
                self.add_grad(grads, *bias, &db);
            }
            Op::Gelu(a) => {
                let av = self.nodes[*a].value.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(&go, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        go * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Silu(a) => {
                let av = self.nodes[*a].value.data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(&go, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        go * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.add_grad(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                // ds = s .* (g - <g, s>) per row.
                let s = self.nodes[id].value.data();
                let v = &self.nodes[id].value;
                let (n, m) = (v.shape()[0], v.shape()[1]);
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g[i * m + j] * s[i * m + j];
                    }
                    for j in 0..m {
                        da[i * m + j] = s[i * m + j] * (g[i * m + j] - dot);
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gain].value.data();
                let v = &self.nodes[*x].value;
                let (n, m) = (v.shape()[0], v.shape()[1]);
                let mut dx = vec![0.0; n * m];
                let mut dg = vec![0.0; m];
                let mut db = vec![0.0; m];
                for i in 0..n {
                    let row = &xv[i * m..(i + 1) * m];
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var =
                        row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / m as f64;
                    let sigma = (var + eps).sqrt();
                    let mut h_mean = 0.0;
                    let mut hx_mean = 0.0;
                    for j in 0..m {
                        let xh = (row[j] - mean) / sigma;
                        let h = g[i * m + j] * gv[j];
                        h_mean += h;
                        hx_mean += h * xh;
                        dg[j] += g[i * m + j] * xh;
                        db[j] += g[i * m + j];
                    }
                    h_mean /= m as f64;
                    hx_mean /= m as f64;
                    for j in 0..m {
                        let xh = (row[j] - mean) / sigma;
                        let h = g[i * m + j] * gv[j];
                        dx[i * m + j] = (h - h_mean - xh * hx_mean) / sigma;
                    }
                }
                self.add_grad(grads, *x, &dx);
                self.add_grad(grads, *gain, &dg);
                self.add_grad(grads, *bias, &db);
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gain].value.data();
                let v = &self.nodes[*x].value;
                let (n, m) = (v.shape()[0], v.shape()[1]);
                let mut dx = vec![0.0; n * m];
                let mut dg = vec![0.0; m];
                for i in 0..n {
                    let row = &xv[i * m..(i + 1) * m];
                    let ms = row.iter().map(|&t| t * t).sum::<f64>() / m as f64;
                    let r = (ms + eps).sqrt();
                    let mut hdotx = 0.0;
                    for j in 0..m {
                        let h = g[i * m + j] * gv[j];
                        hdotx += h * row[j];
                        dg[j] += g[i * m + j] * row[j] / r;
                    }
                    for j in 0..m {
                        let h = g[i * m + j] * gv[j];
                        dx[i * m + j] = h / r - row[j] * hdotx / (m as f64 * r * r * r);
                    }
                }
                self.add_grad(grads, *x, &dx);
                self.add_grad(grads, *gain, &dg);
            }
            Op::ModeN { t, m, mode } => {
                // Y_(n) = M T_(n)  =>  dT = G x_n M^T,  dM = G_(n) T_(n)^T.
                let tv = &self.nodes[*t].value;
                let mm = self.nodes[*m].value.to_matrix()?;
                let gv = DenseTensor::new(self.nodes[id].value.shape().to_vec(), g.to_vec())?;
                let dt = tensor::mode_n_product(&gv, &mm.transpose(), *mode)?;
                let g_unf = tensor::unfold(&gv, *mode)?;
                let t_unf = tensor::unfold(tv, *mode)?;
                let dm = tensor::matmul(&g_unf, &t_unf.transpose())?;
                self.add_grad(grads, *t, dt.data());
                self.add_grad(grads, *m, dm.data());
            }
            Op::SliceMode1(t, idx) => {
                let tv = &self.nodes[*t].value;
                let (r, c) = (tv.shape()[1], tv.shape()[2]);
                let mut dt = vec![0.0; tv.len()];
                dt[idx * r * c..(idx + 1) * r * c].copy_from_slice(g);
                self.add_grad(grads, *t, &dt);
            }
            Op::SliceCols(a, lo, hi) => {
                let av = &self.nodes[*a].value;
                let (n, m) = (av.shape()[0], av.shape()[1]);
                let w = hi - lo;
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    da[i * m + lo..i * m + hi].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.add_grad(grads, *a, &da);
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[parts[0]].value.shape()[0];
                let total: usize = parts
                    .iter()
                    .map(|&p| self.nodes[p].value.shape()[1])
                    .sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    let mut dp = vec![0.0; n * w];
                    for i in 0..n {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.add_grad(grads, p, &dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.add_grad(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Rope { x, positions, base } => {
                // Jacobian transpose of a rotation is the inverse rotation.
                let v = &self.nodes[*x].value;
                let (n, d) = (v.shape()[0], v.shape()[1]);
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let pos = positions[i] as f64;
                    for k in 0..d / 2 {
                        let theta = pos * base.powf(-(2.0 * k as f64) / d as f64);
                        let (s, c) = theta.sin_cos();
                        let ga = g[i * d + 2 * k];
                        let gb = g[i * d + 2 * k + 1];
                        dx[i * d + 2 * k] = ga * c + gb * s;
                        dx[i * d + 2 * k + 1] = -ga * s + gb * c;
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::GatherRows(a, indices) => {
                let av = &self.nodes[*a].value;
                let m = av.shape()[1];
                let mut da = vec![0.0; av.len()];
                for (j, &i) in indices.iter().enumerate() {
                    for t in 0..m {
                        da[i * m + t] += g[j * m + t];
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::AssembleTokens {
                latents,
                mask_token,
                visible,
                n_total,
            } => {
                let d = self.nodes[*mask_token].value.len();
                let mut is_visible = vec![false; *n_total];
                for &i in visible {
                    is_visible[i] = true;
                }
                if let Some(l) = latents {
                    let mut dl = vec![0.0; visible.len() * d];
                    for (j, &i) in visible.iter().enumerate() {
                        dl[j * d..(j + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    self.add_grad(grads, *l, &dl);
                }
                let mut dm = vec![0.0; d];
                for (i, vis) in is_visible.iter().enumerate() {
                    if !vis {
                        for t in 0..d {
                            dm[t] += g[i * d + t];
                        }
                    }
                }
                self.add_grad(grads, *mask_token, &dm);
            }
            Op::Kron(a, b) => {
                let am = self.nodes[*a].value.to_matrix()?;
                let bm = self.nodes[*b].value.to_matrix()?;
                let (m, n, p, q) = (am.rows(), am.cols(), bm.rows(), bm.cols());
                let oc = n * q;
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; p * q];
                for i in 0..m {
                    for j in 0..n {
                        for k in 0..p {
                            for l in 0..q {
                                let go = g[(i * p + k) * oc + (j * q + l)];
                                da[i * n + j] += go * bm.at(k, l);
                                db[k * q + l] += go * am.at(i, j);
                            }
                        }
                    }
                }
                self.add_grad(grads, *a, &da);
                self.add_grad(grads, *b, &db);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.nodes[*a].value.len()];
                self.add_grad(grads, *a, &da);
            }
            Op::SumSq(a) => {
                let av = self.nodes[*a].value.data();
                let da: Vec<f64> = av.iter().map(|&x| 2.0 * g[0] * x).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::AddN(parts) => {
                for &p in parts {
                    self.add_grad(grads, p, g);
                }
            }
        }
        Ok(())
    }
}

/// Per-coordinate outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked coordinates of |a - fd| / max(1e-8, |a|).
    pub max_rel_err: f64,
    /// Max over checked coordinates of |a - fd| / max(rtol*|a|, atol);
    /// values <= 1 mean every coordinate is verified to the probe's
    /// resolution.
    pub max_excess: f64,
    /// Absolute resolution limit of the central-difference probe:
    /// a handful of ulps of the loss magnitude divided by the step.
    pub atol: f64,
    pub coords_checked: usize,
}

/// Resolution limit of a central difference at step `eps` on a function of
/// magnitude |f|: even a perfectly computed loss rounds to f64, so the
/// difference carries a few ulps of |f|.
pub fn fd_resolution_limit(f_magnitude: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * f_magnitude.abs().max(1.0) / (2.0 * eps)
}

/// Central-difference gradient check. `build` reconstructs the loss graph
/// from a parameter set; the analytic gradients come from one backward pass
/// and each sampled coordinate is probed with f(x+eps) and f(x-eps).
///
/// Returns the max over coordinates of
/// `|analytic - fd| / max(1e-8, |analytic|)`.
pub fn grad_check<F>(
    build: F,
    params: &BTreeMap<String, DenseTensor>,
    eps: f64,
    max_coords_per_param: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, DenseTensor>) -> Result<NodeId>,
{
    Ok(grad_check_detailed(build, params, eps, max_coords_per_param, 1e-4, 1e-8)?.max_rel_err)
}

/// As `grad_check`, but reports both the raw relative error and the
/// noise-aware excess over `max(rtol*|a|, atol)`. Coordinates with
/// |analytic| <= `filter` are skipped for the excess metric (their exact
/// zeros still contribute to `max_rel_err` through the 1e-8 floor).
pub fn grad_check_detailed<F>(
    build: F,
    params: &BTreeMap<String, DenseTensor>,
    eps: f64,
    max_coords_per_param: Option<usize>,
    rtol: f64,
    filter: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, DenseTensor>) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(SweetError::Argument(format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(SweetError::Numeric(format!(
            "non-finite function value {base}"
        )));
    }
    let grads = tape.backward(loss)?;

    let eval = |p: &BTreeMap<String, DenseTensor>| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        let v = t.value(l).data()[0];
        if !v.is_finite() {
            return Err(SweetError::Numeric(format!("non-finite function value {v}")));
        }
        Ok(v)
    };

    let atol = fd_resolution_limit(base, eps);
    let mut max_err = 0.0_f64;
    let mut max_excess = 0.0_f64;
    let mut coords_checked = 0usize;
    for (name, value) in params {
        let n = value.len();
        let count = max_coords_per_param.map_or(n, |c| c.min(n));
        // Deterministic stride-spread coordinate sample when capped.
        let stride = if count == n { 1 } else { n.div_ceil(count) };
        let mut work = params.clone();
        for idx in (0..n).step_by(stride) {
            let orig = value.data()[idx];
            let xp = orig + eps;
            let xm = orig - eps;
            work.get_mut(name).unwrap().data_mut()[idx] = xp;
            let fp = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = xm;
            let fm = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            // Divide by the realized step, which absorbs the rounding of
            // x +- eps itself.
            let fd = (fp - fm) / (xp - xm);
            let analytic = grads[name].data()[idx];
            coords_checked += 1;
            let err = (analytic - fd).abs() / analytic.abs().max(1e-8);
            if err > max_err {
                max_err = err;
            }
            if analytic.abs() > filter {
                let excess = (analytic - fd).abs() / (rtol * analytic.abs()).max(atol);
                if excess > max_excess {
                    max_excess = excess;
                }
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        max_excess,
        atol,
        coords_checked,
    })
}
