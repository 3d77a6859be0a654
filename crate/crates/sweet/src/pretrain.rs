//! Masked-patch pre-training: the constrained training loop that optimizes
//! the template and scalers (or ablation variants) with width-wise
//! stochastic scaling, plus the optimizer and learning-rate schedule.
//!
//! Every step rebuilds the tape: sample a width config, mask the scalers,
//! reconstruct the unified tensor, run the masked forward for each batch
//! image, reduce to the mean loss, backprop into the factors and direct
//! params, and apply one decoupled-weight-decay Adam update. All
//! randomness flows from per-purpose streams of one seeded generator, so a
//! fixed seed reproduces the run bit-for-bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::data::{patchify, ImageBatch, PatchBatch};
use crate::error::{Result, SweetError};
use crate::params::ParamSet;
use crate::template::{
    check_bottleneck, sample_width_config, LayoutDescriptor, Scalers, Template, WidthDistribution,
    WidthMask,
};
use crate::tensor::{DenseMatrix, DenseTensor};
use crate::vit::{
    bind_direct, decoder_forward, encoder_forward, weight_nodes_from_theta,
    weight_nodes_from_unified, DirectParams, ViTConfig,
};

/// Sorted set of masked patch indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub masked: Vec<usize>,
    pub ratio: f64,
    /// Set when the rounded mask size hits 0 or N for N > 1.
    pub degenerate: bool,
}

impl MaskSpec {
    pub fn visible(&self, n: usize) -> Vec<usize> {
        let mut is_masked = vec![false; n];
        for &i in &self.masked {
            is_masked[i] = true;
        }
        (0..n).filter(|&i| !is_masked[i]).collect()
    }
}

/// Uniformly random masked subset of size round(ratio * N).
pub fn mask_patches(n: usize, ratio: f64, rng: &mut ChaCha12Rng) -> Result<MaskSpec> {
    if n == 0 {
        return Err(SweetError::Argument("patch count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SweetError::Argument(format!(
            "mask ratio must be in [0,1], got {ratio}"
        )));
    }
    let m = (ratio * n as f64).round() as usize;
    // Fisher-Yates prefix over the index set.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut masked: Vec<usize> = idx[..m].to_vec();
    masked.sort_unstable();
    Ok(MaskSpec {
        masked,
        ratio,
        degenerate: n > 1 && (m == 0 || m == n),
    })
}

/// Mean over masked patches of the squared L2 distance between prediction
/// and target rows; visible rows contribute exactly zero.
pub fn mae_loss(pred: &[f64], target: &[f64], patch_dim: usize, spec: &MaskSpec) -> Result<f64> {
    if pred.len() != target.len() || pred.len() % patch_dim != 0 {
        return Err(SweetError::Shape {
            op: "mae_loss",
            expected: format!("matching multiples of {patch_dim}"),
            got: format!("{} vs {}", pred.len(), target.len()),
        });
    }
    if spec.masked.is_empty() {
        return Err(SweetError::Argument(
            "mae loss undefined for an empty masked set".into(),
        ));
    }
    let mut total = 0.0;
    for &i in &spec.masked {
        for j in 0..patch_dim {
            let d = pred[i * patch_dim + j] - target[i * patch_dim + j];
            total += d * d;
        }
    }
    Ok(total / spec.masked.len() as f64)
}

/// Standard decoupled-weight-decay Adam update, in place, deterministic.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * param[i]);
    }
}

/// Linear warmup to the peak over `warmup` steps, then cosine decay to zero
/// at `total`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Reference batch size for the learning-rate scaling rule.
pub const LR_REFERENCE_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub cosine: bool,
    pub mask_ratio: f64,
    pub width_dist: WidthDistribution,
    pub stochastic_scaling: bool,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Normalize reconstruction targets per patch (on by default).
    pub norm_targets: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: peak lr 6e-4 scaled linearly with batch size
    /// from the reference batch, betas (0.9, 0.95), weight decay 0.05,
    /// warmup 5% of steps, cosine schedule, 75% masking.
    pub fn desk_default(steps: usize, batch_size: usize, seed: u64, d: usize) -> Self {
        TrainConfig {
            steps,
            batch_size,
            peak_lr: 6e-4 * batch_size as f64 / LR_REFERENCE_BATCH as f64,
            weight_decay: 0.05,
            warmup: (steps / 20).max(1),
            cosine: true,
            mask_ratio: 0.75,
            width_dist: WidthDistribution::uniform(vec![d / 4, d / 2, 3 * d / 4, d])
                .unwrap_or_else(|_| WidthDistribution::degenerate(d)),
            stochastic_scaling: true,
            seed,
            betas: (0.9, 0.95),
            eps: 1e-8,
            norm_targets: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.mask_ratio && self.mask_ratio < 1.0) {
            return Err(SweetError::Argument(format!(
                "mask ratio must be in (0,1), got {}",
                self.mask_ratio
            )));
        }
        if self.peak_lr < 0.0 {
            return Err(SweetError::Argument("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(SweetError::Argument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step record; the wall time stays out of the serialized logs.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub keep_u: usize,
    pub keep_v: usize,
    pub wall_secs: f64,
}

impl TrainStats {
    /// Tab-separated record: step, loss, lr, keep_u, keep_v, grad-norm.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{}\t{}\t{:.9e}",
            self.step, self.loss, self.lr, self.keep_u, self.keep_v, self.grad_norm
        )
    }
}

/// What produces the unified weight tensor on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    /// Tucker factorization; the contribution under study.
    Tucker { template: Template, scalers: Scalers },
    /// Shared small template combined per slice: slice s = A_s (x) B.
    Kronecker {
        factors_a: Vec<DenseMatrix>,
        shared_b: DenseMatrix,
    },
    /// Unconstrained: the unified tensor is a free parameter.
    Direct { w: DenseTensor },
}

impl WeightSource {
    /// Fresh Tucker state with the core calibrated so the reconstruction
    /// std matches `target_std`.
    pub fn init_tucker(
        cfg: &ViTConfig,
        ranks: (usize, usize, usize),
        seed: u64,
        target_std: f64,
    ) -> Result<WeightSource> {
        let layout = cfg.layout()?;
        let (r1, r2, r3) = ranks;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).map_err(|e| SweetError::Argument(e.to_string()))?;
        let mut draw = |len: usize, scale: f64| -> Vec<f64> {
            (0..len).map(|_| normal.sample(&mut rng) * scale).collect()
        };
        let g = DenseTensor::new(vec![r1, r2, r3], draw(r1 * r2 * r3, 1.0))?;
        let scalers = Scalers {
            x: DenseMatrix::new(
                layout.total_slices(),
                r1,
                draw(layout.total_slices() * r1, 1.0 / (r1 as f64).sqrt()),
            )?,
            u: DenseMatrix::new(
                cfg.embed_dim,
                r2,
                draw(cfg.embed_dim * r2, 1.0 / (r2 as f64).sqrt()),
            )?,
            v: DenseMatrix::new(
                cfg.embed_dim,
                r3,
                draw(cfg.embed_dim * r3, 1.0 / (r3 as f64).sqrt()),
            )?,
        };
        let mut template = Template { g };
        check_bottleneck(&template, &layout)?;
        // One calibration pass through the core only.
        let w = crate::template::reconstruct(&template, &scalers, &layout)?;
        let n = w.w.len() as f64;
        let mean = w.w.data().iter().sum::<f64>() / n;
        let std =
            (w.w.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        if std == 0.0 || !std.is_finite() {
            return Err(SweetError::Numeric(format!(
                "tucker init calibration got std {std}"
            )));
        }
        let c = target_std / std;
        for x in template.g.data_mut() {
            *x *= c;
        }
        Ok(WeightSource::Tucker { template, scalers })
    }

    /// Fresh Kronecker state: slice s = A_s (x) B with B of size b x b.
    pub fn init_kronecker(cfg: &ViTConfig, b_size: usize, seed: u64, target_std: f64) -> Result<WeightSource> {
        let layout = cfg.layout()?;
        let d = cfg.embed_dim;
        if b_size == 0 || d % b_size != 0 {
            return Err(SweetError::Argument(format!(
                "kronecker block size {b_size} must divide width {d}"
            )));
        }
        let a_size = d / b_size;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).map_err(|e| SweetError::Argument(e.to_string()))?;
        // std of a product of independent normals is the product of stds.
        let part = target_std.sqrt();
        let mut draw_mat = |rows: usize, cols: usize, s: f64| -> Result<DenseMatrix> {
            DenseMatrix::new(
                rows,
                cols,
                (0..rows * cols).map(|_| normal.sample(&mut rng) * s).collect(),
            )
        };
        let shared_b = draw_mat(b_size, b_size, part)?;
        let factors_a = (0..layout.total_slices())
            .map(|_| draw_mat(a_size, a_size, part))
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightSource::Kronecker { factors_a, shared_b })
    }

    pub fn init_direct(cfg: &ViTConfig, seed: u64, target_std: f64) -> Result<WeightSource> {
        let layout = cfg.layout()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, target_std).map_err(|e| SweetError::Argument(e.to_string()))?;
        let len = layout.unified_len();
        let w = DenseTensor::new(
            vec![layout.total_slices(), cfg.embed_dim, cfg.embed_dim],
            (0..len).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        Ok(WeightSource::Direct { w })
    }

    /// Registers source parameters on the tape and returns the per-layer
    /// weight nodes. The width mask multiplies the U/V scalers inside the
    /// graph; `freeze_template` keeps the core out of the gradient set.
    pub fn build_weights(
        &self,
        tape: &mut Tape,
        layout: &LayoutDescriptor,
        mask: &WidthMask,
        freeze_template: bool,
    ) -> Result<Vec<crate::vit::LayerWeightNodes>> {
        match self {
            WeightSource::Tucker { template, scalers } => {
                let g = if freeze_template {
                    tape.constant(template.g.clone())
                } else {
                    tape.param("factor/g", template.g.clone())
                };
                let x = tape.param_matrix("factor/x", &scalers.x);
                let mut u = tape.param_matrix("factor/u", &scalers.u);
                let mut v = tape.param_matrix("factor/v", &scalers.v);
                let d = scalers.u.rows();
                if mask.keep_u < d || mask.keep_v < d {
                    let mu = WidthMask::realize(mask.keep_u, d, scalers.u.cols());
                    let mv = WidthMask::realize(mask.keep_v, d, scalers.v.cols());
                    let muc = tape.constant_matrix(&mu);
                    let mvc = tape.constant_matrix(&mv);
                    u = tape.mul(u, muc)?;
                    v = tape.mul(v, mvc)?;
                }
                let t1 = tape.mode_n_product(g, x, 1)?;
                let t2 = tape.mode_n_product(t1, u, 2)?;
                let w = tape.mode_n_product(t2, v, 3)?;
                weight_nodes_from_unified(tape, w, layout)
            }
            WeightSource::Kronecker { factors_a, shared_b } => {
                let b = tape.param_matrix("factor/b", shared_b);
                let slices: Vec<NodeId> = factors_a
                    .iter()
                    .enumerate()
                    .map(|(s, a)| {
                        let an = tape.param_matrix(&format!("factor/a{s:03}"), a);
                        tape.kron(an, b)
                    })
                    .collect::<Result<_>>()?;
                // Stack via concat_rows, then reshape through fold-free path:
                // build per-layer nodes directly from the slice list.
                kron_weight_nodes(tape, &slices, layout)
            }
            WeightSource::Direct { w } => {
                let wn = tape.param("factor/w", w.clone());
                weight_nodes_from_unified(tape, wn, layout)
            }
        }
    }

    /// Materializes the unified tensor outside any tape.
    pub fn materialize(&self, layout: &LayoutDescriptor) -> Result<DenseTensor> {
        match self {
            WeightSource::Tucker { template, scalers } => {
                Ok(crate::template::reconstruct(template, scalers, layout)?.w)
            }
            WeightSource::Kronecker { factors_a, shared_b } => {
                let d = layout.embed_dim;
                let mut w = DenseTensor::zeros(vec![layout.total_slices(), d, d])?;
                for (s, a) in factors_a.iter().enumerate() {
                    let k = crate::tensor::kronecker(a, shared_b);
                    w.data_mut()[s * d * d..(s + 1) * d * d].copy_from_slice(k.data());
                }
                Ok(w)
            }
            WeightSource::Direct { w } => Ok(w.clone()),
        }
    }

    /// Factor parameter count (excludes direct params).
    pub fn factor_scalars(&self) -> usize {
        match self {
            WeightSource::Tucker { template, scalers } => {
                template.g.len() + scalers.param_count()
            }
            WeightSource::Kronecker { factors_a, shared_b } => {
                factors_a.iter().map(|a| a.data().len()).sum::<usize>() + shared_b.data().len()
            }
            WeightSource::Direct { w } => w.len(),
        }
    }

    fn apply_grads(&mut self, grads: &Gradients, opt: &mut Optimizer, lr: f64) {
        match self {
            WeightSource::Tucker { template, scalers } => {
                if let Some(g) = grads.get("factor/g") {
                    opt.update("factor/g", template.g.data_mut(), g.data(), lr);
                }
                for (name, m) in [
                    ("factor/x", &mut scalers.x),
                    ("factor/u", &mut scalers.u),
                    ("factor/v", &mut scalers.v),
                ] {
                    if let Some(g) = grads.get(name) {
                        opt.update(name, m.data_mut(), g.data(), lr);
                    }
                }
            }
            WeightSource::Kronecker { factors_a, shared_b } => {
                if let Some(g) = grads.get("factor/b") {
                    opt.update("factor/b", shared_b.data_mut(), g.data(), lr);
                }
                for (s, a) in factors_a.iter_mut().enumerate() {
                    let name = format!("factor/a{s:03}");
                    if let Some(g) = grads.get(&name) {
                        opt.update(&name, a.data_mut(), g.data(), lr);
                    }
                }
            }
            WeightSource::Direct { w } => {
                if let Some(g) = grads.get("factor/w") {
                    opt.update("factor/w", w.data_mut(), g.data(), lr);
                }
            }
        }
    }
}

/// Builds per-layer weight nodes from individual slice nodes (Kronecker
/// path, where no single unified node exists).
fn kron_weight_nodes(
    tape: &mut Tape,
    slices: &[NodeId],
    layout: &LayoutDescriptor,
) -> Result<Vec<crate::vit::LayerWeightNodes>> {
    use crate::template::SliceRole;
    let find = |l: usize, role: SliceRole| -> usize {
        layout
            .slice_table
            .iter()
            .position(|&(ll, r)| ll == l && r == role)
            .expect("slice role present")
    };
    let mut out = Vec::with_capacity(layout.layers);
    for l in 0..layout.layers {
        let win_parts: Vec<NodeId> = (0..4).map(|j| slices[find(l, SliceRole::Win(j))]).collect();
        let wout_parts: Vec<NodeId> =
            (0..4).map(|j| slices[find(l, SliceRole::Wout(j))]).collect();
        let wgate = if layout.gated_mlp {
            let parts: Vec<NodeId> =
                (0..4).map(|j| slices[find(l, SliceRole::Wgate(j))]).collect();
            Some(tape.concat_cols(&parts)?)
        } else {
            None
        };
        out.push(crate::vit::LayerWeightNodes {
            wq: slices[find(l, SliceRole::Wq)],
            wk: slices[find(l, SliceRole::Wk)],
            wv: slices[find(l, SliceRole::Wv)],
            wo: slices[find(l, SliceRole::Wo)],
            win: tape.concat_cols(&win_parts)?,
            wout: tape.concat_rows(&wout_parts)?,
            wgate,
        });
    }
    Ok(out)
}

/// AdamW moment store keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub t: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Optimizer {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Optimizer {
            moments: BTreeMap::new(),
            t: 0,
            betas,
            eps,
            weight_decay,
        }
    }

    fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        adamw_step(
            param,
            grad,
            m,
            v,
            self.t,
            lr,
            self.betas,
            self.eps,
            self.weight_decay,
        );
    }
}

/// RNG stream tags; all run randomness derives from (seed, stream).
pub mod streams {
    pub const DATA: u64 = 1;
    pub const MASK: u64 = 2;
    pub const WIDTH: u64 = 3;
    pub const INIT_DIRECT: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const INIT_FACTOR: u64 = 6;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One training run: source factors, direct params, optimizer state, and
/// the RNG streams.
pub struct TrainState {
    pub cfg: ViTConfig,
    pub train: TrainConfig,
    pub source: WeightSource,
    pub direct: DirectParams,
    pub opt: Optimizer,
    pub step: usize,
    pub freeze_template: bool,
    pub train_direct: bool,
    mask_rng: ChaCha12Rng,
    width_rng: ChaCha12Rng,
}

impl TrainState {
    pub fn new(cfg: ViTConfig, train: TrainConfig, source: WeightSource) -> Result<Self> {
        cfg.validate()?;
        train.validate()?;
        train.width_dist.validate(cfg.embed_dim)?;
        if let WeightSource::Tucker { template, .. } = &source {
            check_bottleneck(template, &cfg.layout()?)?;
        }
        let direct = DirectParams::init(&cfg, splitmix(train.seed, streams::INIT_DIRECT))?;
        let opt = Optimizer::new(train.betas, train.eps, train.weight_decay);
        Ok(TrainState {
            mask_rng: stream_rng(train.seed, streams::MASK),
            width_rng: stream_rng(train.seed, streams::WIDTH),
            cfg,
            train,
            source,
            direct,
            opt,
            step: 0,
            freeze_template: false,
            train_direct: true,
        })
    }

    /// Builds the batch loss graph on a fresh tape. Returns the loss node.
    pub fn build_loss(
        &self,
        tape: &mut Tape,
        patches: &PatchBatch,
        masks: &[MaskSpec],
        mask: &WidthMask,
        trainable: bool,
    ) -> Result<NodeId> {
        let layout = self.cfg.layout()?;
        let weights = if trainable {
            self.source
                .build_weights(tape, &layout, mask, self.freeze_template)?
        } else {
            let w = self.source.materialize(&layout)?;
            let theta = crate::template::split_weights(
                &crate::template::UnifiedWeightTensor { w },
                &layout,
            )?;
            weight_nodes_from_theta(tape, &theta, false)
        };
        let nodes = bind_direct(tape, &self.direct, trainable && self.train_direct);
        let n = self.cfg.n_patches();
        let pd = self.cfg.patch_dim();
        let mut per_image = Vec::with_capacity(patches.count);
        for img in 0..patches.count {
            let spec = &masks[img];
            if spec.masked.is_empty() {
                return Err(SweetError::Argument(
                    "training mask must cover at least one patch".into(),
                ));
            }
            let visible = spec.visible(n);
            let raw = patches.patches(img).to_vec();
            let input = tape.constant(DenseTensor::new(vec![n, pd], raw)?);
            let latents = if visible.is_empty() {
                None
            } else {
                let cache =
                    encoder_forward(tape, &self.cfg, &weights, &nodes, input, &visible)?;
                Some(cache.encoder_out)
            };
            let pred = decoder_forward(tape, &self.cfg, &nodes, latents, &visible)?;
            // Targets: optionally per-patch-normalized copies of the input.
            let target_vals = if self.train.norm_targets {
                normalize_rows(patches.patches(img), pd)
            } else {
                patches.patches(img).to_vec()
            };
            let target = tape.constant(DenseTensor::new(vec![n, pd], target_vals)?);
            let diff = tape.sub(pred, target)?;
            let row_mask = {
                let mut m = vec![0.0; n * pd];
                for &i in &spec.masked {
                    for j in 0..pd {
                        m[i * pd + j] = 1.0;
                    }
                }
                tape.constant(DenseTensor::new(vec![n, pd], m)?)
            };
            let masked = tape.mul(diff, row_mask)?;
            let ss = tape.sum_sq(masked);
            per_image.push(tape.scale(ss, 1.0 / spec.masked.len() as f64));
        }
        let total = tape.add_n(&per_image)?;
        Ok(tape.scale(total, 1.0 / patches.count as f64))
    }

    /// One optimization step on a batch of images.
    pub fn pretrain_step(&mut self, batch: &ImageBatch) -> Result<TrainStats> {
        let t0 = std::time::Instant::now();
        let patches = patchify(batch, self.cfg.patch)?;
        let n = self.cfg.n_patches();
        let width = if self.train.stochastic_scaling {
            sample_width_config(&mut self.width_rng, &self.train.width_dist, self.cfg.embed_dim)?
        } else {
            WidthMask::full(self.cfg.embed_dim)
        };
        let masks: Vec<MaskSpec> = (0..patches.count)
            .map(|_| mask_patches(n, self.train.mask_ratio, &mut self.mask_rng))
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let loss_node = self.build_loss(&mut tape, &patches, &masks, &width, true)?;
        let loss = tape.value(loss_node).data()[0];
        if !loss.is_finite() {
            return Err(SweetError::Numeric(format!(
                "non-finite loss {loss} at step {}",
                self.step
            )));
        }
        let grads = tape.backward(loss_node)?;
        let mut sq = 0.0;
        for g in grads.values() {
            for &x in g.data() {
                sq += x * x;
            }
        }
        let grad_norm = sq.sqrt();

        let lr = if self.train.cosine {
            lr_schedule(self.step, self.train.peak_lr, self.train.warmup, self.train.steps)
        } else {
            self.train.peak_lr
        };
        self.opt.t = self.step + 1;
        self.source.apply_grads(&grads, &mut self.opt, lr);
        if self.train_direct {
            apply_direct_grads(&mut self.direct.set, &grads, &mut self.opt, lr);
        }
        let stats = TrainStats {
            step: self.step,
            loss,
            lr,
            grad_norm,
            keep_u: width.keep_u,
            keep_v: width.keep_v,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(stats)
    }

    /// Mean masked loss over a held-out batch at full width, with masks
    /// drawn from a dedicated stream reseeded per call (comparable across
    /// runs and steps).
    pub fn validation_loss(&self, batch: &ImageBatch, mask_seed: u64) -> Result<f64> {
        let patches = patchify(batch, self.cfg.patch)?;
        let mut rng = stream_rng(mask_seed, streams::VALIDATION);
        let n = self.cfg.n_patches();
        let masks: Vec<MaskSpec> = (0..patches.count)
            .map(|_| mask_patches(n, self.train.mask_ratio, &mut rng))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let loss = self.build_loss(
            &mut tape,
            &patches,
            &masks,
            &WidthMask::full(self.cfg.embed_dim),
            false,
        )?;
        Ok(tape.value(loss).data()[0])
    }
}

pub fn apply_direct_grads(
    set: &mut ParamSet,
    grads: &Gradients,
    opt: &mut Optimizer,
    lr: f64,
) {
    for (name, value) in set.iter_mut() {
        let key = format!("direct/{name}");
        if let Some(g) = grads.get(&key) {
            opt.update(&key, value.data_mut(), g.data(), lr);
        }
    }
}

fn normalize_rows(data: &[f64], dim: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(dim) {
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let denom = (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    out
}

/// Cheap seed mixer for deriving independent seeds from (seed, tag).
pub fn splitmix(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
