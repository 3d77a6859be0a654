//! The weight template and its scalers: the unified weight layout, Tucker
//! reconstruction into per-layer matrices, width masks for stochastic
//! scaling, and scaler slicing/initialization for target models.
//!
//! All main per-layer weight matrices live in one 3-D tensor of S*L slices
//! of D x D blocks. Per layer the slice order is Wq, Wk, Wv, Wo, the four
//! column blocks of Win, (the four column blocks of Wgate when the gated
//! MLP is enabled,) then the four row blocks of Wout. The MLP hidden width
//! is pinned to 4D so the blocks tile exactly.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SweetError};
use crate::tensor::{tucker_reconstruct, DenseMatrix, DenseTensor};

/// Role of one D x D slice in the unified tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceRole {
    Wq,
    Wk,
    Wv,
    Wo,
    /// Column block j of Win (j in 0..4).
    Win(usize),
    /// Column block j of Wgate (j in 0..4).
    Wgate(usize),
    /// Row block j of Wout (j in 0..4).
    Wout(usize),
}

impl std::fmt::Display for SliceRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SliceRole::Wq => write!(f, "Wq"),
            SliceRole::Wk => write!(f, "Wk"),
            SliceRole::Wv => write!(f, "Wv"),
            SliceRole::Wo => write!(f, "Wo"),
            SliceRole::Win(j) => write!(f, "Win[{j}]"),
            SliceRole::Wgate(j) => write!(f, "Wgate[{j}]"),
            SliceRole::Wout(j) => write!(f, "Wout[{j}]"),
        }
    }
}

/// Maps (layer, role) pairs onto mode-1 slice indices of the unified tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutDescriptor {
    pub layers: usize,
    pub embed_dim: usize,
    pub slices_per_layer: usize,
    pub slice_table: Vec<(usize, SliceRole)>,
    pub gated_mlp: bool,
}

impl LayoutDescriptor {
    pub fn new(layers: usize, embed_dim: usize, gated_mlp: bool) -> Result<Self> {
        if layers == 0 || embed_dim == 0 {
            return Err(SweetError::Argument(format!(
                "layout requires layers >= 1 and embed_dim >= 1, got {layers}, {embed_dim}"
            )));
        }
        let mut roles = vec![SliceRole::Wq, SliceRole::Wk, SliceRole::Wv, SliceRole::Wo];
        for j in 0..4 {
            roles.push(SliceRole::Win(j));
        }
        if gated_mlp {
            for j in 0..4 {
                roles.push(SliceRole::Wgate(j));
            }
        }
        for j in 0..4 {
            roles.push(SliceRole::Wout(j));
        }
        let slices_per_layer = roles.len();
        let mut slice_table = Vec::with_capacity(layers * slices_per_layer);
        for l in 0..layers {
            for &r in &roles {
                slice_table.push((l, r));
            }
        }
        Ok(LayoutDescriptor {
            layers,
            embed_dim,
            slices_per_layer,
            slice_table,
            gated_mlp,
        })
    }

    pub fn total_slices(&self) -> usize {
        self.slice_table.len()
    }

    /// Total entries of the unified tensor, S*L*D*D.
    pub fn unified_len(&self) -> usize {
        self.total_slices() * self.embed_dim * self.embed_dim
    }
}

/// The core tensor: the single shared knowledge carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub g: DenseTensor,
}

impl Template {
    pub fn ranks(&self) -> (usize, usize, usize) {
        let s = self.g.shape();
        (s[0], s[1], s[2])
    }
}

/// Factor matrices that modulate the template into concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalers {
    pub x: DenseMatrix,
    pub u: DenseMatrix,
    pub v: DenseMatrix,
}

impl Scalers {
    pub fn param_count(&self) -> usize {
        self.x.data().len() + self.u.data().len() + self.v.data().len()
    }

    fn check_against(&self, template: &Template, layout: &LayoutDescriptor) -> Result<()> {
        let (r1, r2, r3) = template.ranks();
        let d = layout.embed_dim;
        let sl = layout.total_slices();
        let ok = self.x.rows() == sl
            && self.x.cols() == r1
            && self.u.rows() == d
            && self.u.cols() == r2
            && self.v.rows() == d
            && self.v.cols() == r3;
        if !ok {
            return Err(SweetError::Shape {
                op: "scalers",
                expected: format!("X {sl}x{r1}, U {d}x{r2}, V {d}x{r3}"),
                got: format!(
                    "X {}x{}, U {}x{}, V {}x{}",
                    self.x.rows(),
                    self.x.cols(),
                    self.u.rows(),
                    self.u.cols(),
                    self.v.rows(),
                    self.v.cols()
                ),
            });
        }
        Ok(())
    }
}

/// Prefix-structured binary width masks for U and V.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthMask {
    pub keep_u: usize,
    pub keep_v: usize,
}

impl WidthMask {
    pub fn full(d: usize) -> Self {
        WidthMask { keep_u: d, keep_v: d }
    }

    /// Realized {0,1} mask for U: row i is all-ones iff i < keep.
    pub fn realize(keep: usize, rows: usize, cols: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(rows, cols).unwrap();
        for i in 0..keep.min(rows) {
            for j in 0..cols {
                m.set(i, j, 1.0);
            }
        }
        m
    }
}

/// The 3-D reorganization of all main weight matrices: S*L slices of D x D.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedWeightTensor {
    pub w: DenseTensor,
}

/// Per-layer weight matrices as named by the slice roles.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    /// D x 4D.
    pub win: DenseMatrix,
    /// 4D x D.
    pub wout: DenseMatrix,
    /// D x 4D, present only for the gated MLP.
    pub wgate: Option<DenseMatrix>,
}

fn check_dims(role: &str, m: &DenseMatrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(SweetError::Layout {
            role: role.to_string(),
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    Ok(())
}

/// Packs per-layer matrices into the unified tensor. Win (and Wgate) are
/// split column-wise into four D x D blocks, Wout row-wise.
pub fn concat_weights(params: &[LayerWeights], layout: &LayoutDescriptor) -> Result<UnifiedWeightTensor> {
    let d = layout.embed_dim;
    if params.len() != layout.layers {
        return Err(SweetError::Layout {
            role: "layer count".into(),
            expected: format!("{}", layout.layers),
            got: format!("{}", params.len()),
        });
    }
    let mut w = DenseTensor::zeros(vec![layout.total_slices(), d, d])?;
    for (s, &(l, role)) in layout.slice_table.iter().enumerate() {
        let lw = &params[l];
        if layout.gated_mlp != lw.wgate.is_some() {
            return Err(SweetError::Layout {
                role: format!("layer {l} Wgate"),
                expected: if layout.gated_mlp { "present" } else { "absent" }.into(),
                got: if lw.wgate.is_some() { "present" } else { "absent" }.into(),
            });
        }
        let block = |m: &DenseMatrix, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
            let mut out = vec![0.0; d * d];
            for (bi, i) in rows.clone().enumerate() {
                for (bj, j) in cols.clone().enumerate() {
                    out[bi * d + bj] = m.at(i, j);
                }
            }
            out
        };
        let data = match role {
            SliceRole::Wq => {
                check_dims(&format!("layer {l} Wq"), &lw.wq, d, d)?;
                lw.wq.data().to_vec()
            }
            SliceRole::Wk => {
                check_dims(&format!("layer {l} Wk"), &lw.wk, d, d)?;
                lw.wk.data().to_vec()
            }
            SliceRole::Wv => {
                check_dims(&format!("layer {l} Wv"), &lw.wv, d, d)?;
                lw.wv.data().to_vec()
            }
            SliceRole::Wo => {
                check_dims(&format!("layer {l} Wo"), &lw.wo, d, d)?;
                lw.wo.data().to_vec()
            }
            SliceRole::Win(j) => {
                check_dims(&format!("layer {l} Win"), &lw.win, d, 4 * d)?;
                block(&lw.win, 0..d, j * d..(j + 1) * d)
            }
            SliceRole::Wgate(j) => {
                let wg = lw.wgate.as_ref().unwrap();
                check_dims(&format!("layer {l} Wgate"), wg, d, 4 * d)?;
                block(wg, 0..d, j * d..(j + 1) * d)
            }
            SliceRole::Wout(j) => {
                check_dims(&format!("layer {l} Wout"), &lw.wout, 4 * d, d)?;
                block(&lw.wout, j * d..(j + 1) * d, 0..d)
            }
        };
        w.data_mut()[s * d * d..(s + 1) * d * d].copy_from_slice(&data);
    }
    Ok(UnifiedWeightTensor { w })
}

/// Exact inverse of `concat_weights`; pure copying, no arithmetic.
pub fn split_weights(unified: &UnifiedWeightTensor, layout: &LayoutDescriptor) -> Result<Vec<LayerWeights>> {
    let d = layout.embed_dim;
    let shape = unified.w.shape();
    if shape != [layout.total_slices(), d, d] {
        return Err(SweetError::Layout {
            role: "unified tensor".into(),
            expected: format!("[{}, {d}, {d}]", layout.total_slices()),
            got: format!("{shape:?}"),
        });
    }
    let mut out = Vec::with_capacity(layout.layers);
    for l in 0..layout.layers {
        let mut wq = DenseMatrix::zeros(d, d)?;
        let mut wk = DenseMatrix::zeros(d, d)?;
        let mut wv = DenseMatrix::zeros(d, d)?;
        let mut wo = DenseMatrix::zeros(d, d)?;
        let mut win = DenseMatrix::zeros(d, 4 * d)?;
        let mut wout = DenseMatrix::zeros(4 * d, d)?;
        let mut wgate = if layout.gated_mlp {
            Some(DenseMatrix::zeros(d, 4 * d)?)
        } else {
            None
        };
        for (s, &(sl, role)) in layout.slice_table.iter().enumerate() {
            if sl != l {
                continue;
            }
            let slice = &unified.w.data()[s * d * d..(s + 1) * d * d];
            match role {
                SliceRole::Wq => wq.data_mut().copy_from_slice(slice),
                SliceRole::Wk => wk.data_mut().copy_from_slice(slice),
                SliceRole::Wv => wv.data_mut().copy_from_slice(slice),
                SliceRole::Wo => wo.data_mut().copy_from_slice(slice),
                SliceRole::Win(j) => {
                    for i in 0..d {
                        for jj in 0..d {
                            win.set(i, j * d + jj, slice[i * d + jj]);
                        }
                    }
                }
                SliceRole::Wgate(j) => {
                    let wg = wgate.as_mut().unwrap();
                    for i in 0..d {
                        for jj in 0..d {
                            wg.set(i, j * d + jj, slice[i * d + jj]);
                        }
                    }
                }
                SliceRole::Wout(j) => {
                    for i in 0..d {
                        for jj in 0..d {
                            wout.set(j * d + i, jj, slice[i * d + jj]);
                        }
                    }
                }
            }
        }
        out.push(LayerWeights {
            wq,
            wk,
            wv,
            wo,
            win,
            wout,
            wgate,
        });
    }
    Ok(out)
}

/// Tucker reconstruction of the unified tensor from template and scalers.
pub fn reconstruct(
    template: &Template,
    scalers: &Scalers,
    layout: &LayoutDescriptor,
) -> Result<UnifiedWeightTensor> {
    scalers.check_against(template, layout)?;
    let w = tucker_reconstruct(&template.g, &scalers.x, &scalers.u, &scalers.v)?;
    Ok(UnifiedWeightTensor { w })
}

/// Masked copies of U and V (X untouched): rows >= keep are exactly zero.
pub fn apply_width_mask(scalers: &Scalers, mask: &WidthMask) -> Result<Scalers> {
    let d = scalers.u.rows();
    if !(1..=d).contains(&mask.keep_u) || !(1..=scalers.v.rows()).contains(&mask.keep_v) {
        return Err(SweetError::Argument(format!(
            "keep values must be in [1, {d}], got ({}, {})",
            mask.keep_u, mask.keep_v
        )));
    }
    let mask_rows = |m: &DenseMatrix, keep: usize| {
        let mut out = m.clone();
        for i in keep..m.rows() {
            for j in 0..m.cols() {
                out.set(i, j, 0.0);
            }
        }
        out
    };
    Ok(Scalers {
        x: scalers.x.clone(),
        u: mask_rows(&scalers.u, mask.keep_u),
        v: mask_rows(&scalers.v, mask.keep_v),
    })
}

/// Distribution over allowed width configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthDistribution {
    pub widths: Vec<usize>,
    pub probs: Vec<f64>,
}

impl WidthDistribution {
    pub fn uniform(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() {
            return Err(SweetError::Argument("width set must be nonempty".into()));
        }
        let p = 1.0 / widths.len() as f64;
        Ok(WidthDistribution {
            probs: vec![p; widths.len()],
            widths,
        })
    }

    pub fn degenerate(width: usize) -> Self {
        WidthDistribution {
            widths: vec![width],
            probs: vec![1.0],
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.widths.is_empty() {
            return Err(SweetError::Argument("width set must be nonempty".into()));
        }
        if self.widths.len() != self.probs.len() {
            return Err(SweetError::Argument(format!(
                "width set ({}) and probs ({}) length mismatch",
                self.widths.len(),
                self.probs.len()
            )));
        }
        if let Some(&bad) = self.widths.iter().find(|&&w| w == 0 || w > d) {
            return Err(SweetError::Argument(format!(
                "width {bad} outside [1, {d}]"
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SweetError::Argument(format!(
                "width probs sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    fn sample_one(&self, rng: &mut ChaCha12Rng) -> usize {
        let r: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for (&w, &p) in self.widths.iter().zip(&self.probs) {
            acc += p;
            if r < acc {
                return w;
            }
        }
        *self.widths.last().unwrap()
    }
}

/// Samples keep_u and keep_v independently from the distribution.
pub fn sample_width_config(
    rng: &mut ChaCha12Rng,
    dist: &WidthDistribution,
    d: usize,
) -> Result<WidthMask> {
    dist.validate(d)?;
    let keep_u = dist.sample_one(rng);
    let keep_v = dist.sample_one(rng);
    Ok(WidthMask { keep_u, keep_v })
}

/// How X rows are chosen when the target is shallower than the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthStrategy {
    /// Rows of the first L* layers.
    #[default]
    FirstK,
    /// Layers sampled at an even stride across the source depth.
    EvenStride,
}

/// Dimension-aligned slices of the scalers for a smaller target:
/// U* and V* take the first D* rows, X* takes the rows of the selected
/// layers.
pub fn slice_scalers(
    scalers: &Scalers,
    src_layout: &LayoutDescriptor,
    tgt_layers: usize,
    tgt_dim: usize,
    depth: DepthStrategy,
) -> Result<Scalers> {
    if tgt_dim > src_layout.embed_dim || tgt_layers > src_layout.layers {
        return Err(SweetError::Capability(format!(
            "target ({tgt_layers} layers, width {tgt_dim}) exceeds source ({} layers, width {}); random init required instead",
            src_layout.layers, src_layout.embed_dim
        )));
    }
    if tgt_layers == 0 || tgt_dim == 0 {
        return Err(SweetError::Argument("target dims must be >= 1".into()));
    }
    let s = src_layout.slices_per_layer;
    let layer_ids: Vec<usize> = match depth {
        DepthStrategy::FirstK => (0..tgt_layers).collect(),
        DepthStrategy::EvenStride => (0..tgt_layers)
            .map(|i| i * src_layout.layers / tgt_layers)
            .collect(),
    };
    let mut x_data = Vec::with_capacity(tgt_layers * s * scalers.x.cols());
    for &l in &layer_ids {
        for row in l * s..(l + 1) * s {
            for c in 0..scalers.x.cols() {
                x_data.push(scalers.x.at(row, c));
            }
        }
    }
    Ok(Scalers {
        x: DenseMatrix::new(tgt_layers * s, scalers.x.cols(), x_data)?,
        u: scalers.u.prefix(tgt_dim, scalers.u.cols())?,
        v: scalers.v.prefix(tgt_dim, scalers.v.cols())?,
    })
}

/// Fresh scalers with entries drawn i.i.d. normal, then rescaled (one
/// calibration pass, cube-root split across the three factors) so the
/// reconstructed tensor has empirical std equal to `target_std`.
pub fn random_scalers(
    rng: &mut ChaCha12Rng,
    template: &Template,
    layout: &LayoutDescriptor,
    target_std: f64,
) -> Result<Scalers> {
    if target_std <= 0.0 {
        return Err(SweetError::Argument(format!(
            "target_std must be > 0, got {target_std}"
        )));
    }
    let (r1, r2, r3) = template.ranks();
    let d = layout.embed_dim;
    let sl = layout.total_slices();
    let normal = Normal::new(0.0, 1.0).map_err(|e| SweetError::Argument(e.to_string()))?;
    let mut draw = |rows: usize, cols: usize, scale: f64| {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| normal.sample(rng) * scale)
            .collect();
        DenseMatrix::new(rows, cols, data)
    };
    let mut scalers = Scalers {
        x: draw(sl, r1, 1.0 / (r1 as f64).sqrt())?,
        u: draw(d, r2, 1.0 / (r2 as f64).sqrt())?,
        v: draw(d, r3, 1.0 / (r3 as f64).sqrt())?,
    };
    let w = reconstruct(template, &scalers, layout)?;
    let n = w.w.len() as f64;
    let mean = w.w.data().iter().sum::<f64>() / n;
    let std = (w.w.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(SweetError::Numeric(format!(
            "scaler calibration failed: reconstruction std {std} (degenerate template?)"
        )));
    }
    let c = (target_std / std).cbrt();
    for m in [&mut scalers.x, &mut scalers.u, &mut scalers.v] {
        for v in m.data_mut() {
            *v *= c;
        }
    }
    Ok(scalers)
}

/// Bottleneck check: the factorized parameter count must undercut the
/// dense unified tensor.
pub fn check_bottleneck(template: &Template, layout: &LayoutDescriptor) -> Result<()> {
    let (r1, r2, r3) = template.ranks();
    let d = layout.embed_dim;
    let sl = layout.total_slices();
    let factored = r1 * r2 * r3 + sl * r1 + d * (r2 + r3);
    let dense = layout.unified_len();
    if factored >= dense {
        return Err(SweetError::Argument(format!(
            "ranks ({r1},{r2},{r3}) give {factored} parameters, not below the dense {dense}"
        )));
    }
    Ok(())
}
