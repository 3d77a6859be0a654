//! Desk-scale evaluation: compares initialization strategies under a fixed
//! post-initialization training budget with bit-identical data order per
//! seed, plus a linear probe on the synthetic generator's latent classes
//! and a naive weight-selection baseline.

use rand::Rng;

use crate::data::{patchify, synth_dataset, synth_dataset_labeled, ImageBatch, SYNTH_CLASSES};
use crate::error::{Result, SweetError};
use crate::init_adapt::{byte_checksum, initialize_target, InitMode, TargetConfig};
use crate::pretrain::{splitmix, streams, stream_rng, TrainConfig, TrainState, WeightSource};
use crate::template::{concat_weights, split_weights, Scalers, Template, UnifiedWeightTensor};
use crate::tensor::DenseTensor;
use crate::vit::{bind_direct, encoder_forward, weight_nodes_from_theta, DirectParams, ModelParams, ViTConfig};

/// A pre-trained artifact an initialization strategy can draw from.
#[derive(Debug, Clone)]
pub enum EvalSource {
    Template {
        id: String,
        config: ViTConfig,
        template: Template,
        scalers: Scalers,
    },
    Model {
        id: String,
        model: ModelParams,
    },
}

impl EvalSource {
    pub fn id(&self) -> &str {
        match self {
            EvalSource::Template { id, .. } => id,
            EvalSource::Model { id, .. } => id,
        }
    }
}

/// Initialization strategy under comparison.
#[derive(Debug, Clone)]
pub enum Strategy {
    /// Slice scalers from a template source.
    SweetInherit { source: String },
    /// Slice (or draw) scalers, then briefly adapt them, template frozen.
    SweetAdapt { source: String, steps: usize },
    /// Fresh random initialization of the whole model.
    RandomInit,
    /// Prefix sub-blocks of a pre-trained full model.
    WtSelect { source: String },
}

impl Strategy {
    pub fn id(&self) -> String {
        match self {
            Strategy::SweetInherit { source } => format!("sweet-inherit[{source}]"),
            Strategy::SweetAdapt { source, .. } => format!("sweet-adapt[{source}]"),
            Strategy::RandomInit => "random".to_string(),
            Strategy::WtSelect { source } => format!("wt-select[{source}]"),
        }
    }
}

/// One evaluated (strategy, target, seed) run.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub strategy: String,
    pub target: String,
    pub seed: u64,
    pub budget: usize,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub probe_accuracy: Option<f64>,
    /// Validation loss sampled every `curve_every` steps.
    pub curve: Vec<f64>,
    /// FNV hash of the training batch stream, for protocol-fairness checks.
    pub batch_stream_hash: u64,
}

/// Summary row over seeds for one (strategy, target) cell.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub strategy: String,
    pub target: String,
    pub seeds: usize,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    /// Rows backed by fewer than 3 seeds are flagged, never silent.
    pub flagged_low_seeds: bool,
}

#[derive(Debug, Clone)]
pub struct EvalTable {
    pub runs: Vec<EvalRun>,
    pub summaries: Vec<EvalSummary>,
}

impl EvalTable {
    /// Tab-separated rows ordered by target then strategy.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("target\tstrategy\tseed\tinitial_val\tfinal_val\tprobe_acc\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.9e}\t{:.9e}\t{}\n",
                r.target,
                r.strategy,
                r.seed,
                r.initial_val_loss,
                r.final_val_loss,
                r.probe_accuracy
                    .map_or("-".to_string(), |a| format!("{a:.4}")),
            ));
        }
        out.push_str("\n# summary\ntarget\tstrategy\tseeds\tmean_final\tstd_final\tflag\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.9e}\t{:.9e}\t{}\n",
                s.target,
                s.strategy,
                s.seeds,
                s.mean_final_loss,
                s.std_final_loss,
                if s.flagged_low_seeds { "LOW_SEEDS" } else { "-" }
            ));
        }
        out
    }

    pub fn summary_for(&self, strategy: &str, target: &str) -> Option<&EvalSummary> {
        self.summaries
            .iter()
            .find(|s| s.strategy == strategy && s.target == target)
    }
}

/// Protocol knobs shared by every run in a comparison.
#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub budget: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub pool: usize,
    pub image: usize,
    pub val_count: usize,
    pub with_probe: bool,
    pub curve_every: usize,
    pub adapt_lr: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            budget: 500,
            batch_size: 16,
            peak_lr: 3e-3,
            weight_decay: 0.0,
            pool: 128,
            image: 32,
            val_count: 16,
            with_probe: false,
            curve_every: 100,
            adapt_lr: 3e-3,
        }
    }
}

/// Instantiates a target model for one (strategy, seed).
fn build_initial_model(
    strategy: &Strategy,
    sources: &[EvalSource],
    tgt: &TargetConfig,
    src_cfg: &ViTConfig,
    seed: u64,
    protocol: &EvalProtocol,
) -> Result<ModelParams> {
    let find = |id: &str| -> Result<&EvalSource> {
        sources
            .iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| SweetError::Protocol(format!("unknown source {id}")))
    };
    match strategy {
        Strategy::SweetInherit { source } => match find(source)? {
            EvalSource::Template {
                config,
                template,
                scalers,
                ..
            } => {
                let t = TargetConfig {
                    mode: InitMode::Inherit,
                    ..tgt.clone()
                };
                let (model, _, _, _) =
                    initialize_target(template, scalers, config, &t, None, seed, None)?;
                Ok(model)
            }
            EvalSource::Model { .. } => Err(SweetError::Protocol(format!(
                "strategy sweet-inherit needs a template source, {source} is a model"
            ))),
        },
        Strategy::SweetAdapt { source, steps } => match find(source)? {
            EvalSource::Template {
                config,
                template,
                scalers,
                ..
            } => {
                let t = TargetConfig {
                    mode: InitMode::Adapt,
                    adapt_steps: *steps,
                    ..tgt.clone()
                };
                // Adaptation data comes from a stream disjoint from the
                // budget-training stream.
                let adapt_data = synth_dataset(
                    splitmix(seed, 0xADAF),
                    protocol.pool.max(4 * protocol.batch_size),
                    protocol.image,
                )?;
                let mut train =
                    TrainConfig::desk_default(*steps, protocol.batch_size, seed, tgt.embed_dim());
                train.peak_lr = protocol.adapt_lr;
                train.weight_decay = 0.0;
                let (model, _, _, _) = initialize_target(
                    template,
                    scalers,
                    config,
                    &t,
                    Some(&adapt_data),
                    seed,
                    Some(&train),
                )?;
                Ok(model)
            }
            EvalSource::Model { .. } => Err(SweetError::Protocol(format!(
                "strategy sweet-adapt needs a template source, {source} is a model"
            ))),
        },
        Strategy::RandomInit => {
            let cfg = tgt.vit_config(src_cfg)?;
            let mut rng = stream_rng(splitmix(seed, 0x5EED), streams::INIT_FACTOR);
            let layout = cfg.layout()?;
            let normal = rand_distr::Normal::new(0.0, 0.02)
                .map_err(|e| SweetError::Argument(e.to_string()))?;
            let len = layout.unified_len();
            let w = DenseTensor::new(
                vec![layout.total_slices(), cfg.embed_dim, cfg.embed_dim],
                (0..len)
                    .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
                    .collect(),
            )?;
            let theta = split_weights(&UnifiedWeightTensor { w }, &layout)?;
            let direct = DirectParams::init(&cfg, splitmix(seed, streams::INIT_DIRECT))?;
            Ok(ModelParams {
                config: cfg,
                theta,
                direct,
            })
        }
        Strategy::WtSelect { source } => match find(source)? {
            EvalSource::Model { model, .. } => weight_selection_baseline(model, tgt),
            EvalSource::Template { .. } => Err(SweetError::Protocol(format!(
                "strategy wt-select needs a model source, {source} is a template"
            ))),
        },
    }
}

/// Naive transfer baseline: copies prefix sub-blocks of every weight
/// matrix and prefix slices of the direct params into the target shape.
pub fn weight_selection_baseline(full: &ModelParams, tgt: &TargetConfig) -> Result<ModelParams> {
    let src_cfg = &full.config;
    let d_star = tgt.embed_dim();
    if tgt.layers > src_cfg.layers || d_star > src_cfg.embed_dim {
        return Err(SweetError::Capability(format!(
            "weight selection requires target within source ({} layers, width {})",
            src_cfg.layers, src_cfg.embed_dim
        )));
    }
    let tgt_cfg = tgt.vit_config(src_cfg)?;
    // Slice through the unified tensor so Win/Wout blocks stay aligned
    // with the layout semantics.
    let src_layout = src_cfg.layout()?;
    let tgt_layout = tgt_cfg.layout()?;
    let unified = concat_weights(&full.theta, &src_layout)?;
    let s = src_layout.slices_per_layer;
    let mut w = DenseTensor::zeros(vec![tgt_layout.total_slices(), d_star, d_star])?;
    for l in 0..tgt.layers {
        for k in 0..s {
            let src_slice = l * s + k;
            let dst_slice = l * s + k;
            for b in 0..d_star {
                for c in 0..d_star {
                    let v = unified.w.at3(src_slice, b, c);
                    w.set3(dst_slice, b, c, v);
                }
            }
        }
    }
    let theta = split_weights(&UnifiedWeightTensor { w }, &tgt_layout)?;

    // Direct params: fresh shapes, prefix-copied where dimensions align.
    let mut direct = DirectParams::init(&tgt_cfg, 0)?;
    let src_set = &full.direct.set;
    for (name, dst) in direct.set.iter_mut() {
        if let Ok(src) = src_set.get(name) {
            copy_prefix(src, dst);
        }
    }
    Ok(ModelParams {
        config: tgt_cfg,
        theta,
        direct,
    })
}

/// Copies the overlapping prefix block of `src` into `dst` (any rank).
fn copy_prefix(src: &DenseTensor, dst: &mut DenseTensor) {
    if src.shape().len() != dst.shape().len() {
        return;
    }
    let ss = src.shape().to_vec();
    let ds = dst.shape().to_vec();
    match ss.len() {
        1 => {
            let n = ss[0].min(ds[0]);
            let s = &src.data()[..n];
            dst.data_mut()[..n].copy_from_slice(s);
        }
        2 => {
            let (r, c) = (ss[0].min(ds[0]), ss[1].min(ds[1]));
            for i in 0..r {
                for j in 0..c {
                    let v = src.data()[i * ss[1] + j];
                    dst.data_mut()[i * ds[1] + j] = v;
                }
            }
        }
        _ => {}
    }
}

/// Trains one initialized model for the budget with the seed-determined
/// data stream and reports validation losses.
fn budget_train(
    model: ModelParams,
    seed: u64,
    protocol: &EvalProtocol,
) -> Result<(EvalRun, ModelParams)> {
    let cfg = model.config.clone();
    let mut train = TrainConfig::desk_default(protocol.budget, protocol.batch_size, seed, cfg.embed_dim);
    train.peak_lr = protocol.peak_lr;
    train.weight_decay = protocol.weight_decay;
    train.stochastic_scaling = false;
    train.warmup = (protocol.budget / 10).max(1);
    let layout = cfg.layout()?;
    let source = WeightSource::Direct {
        w: concat_weights(&model.theta, &layout)?.w,
    };
    let mut state = TrainState::new(cfg.clone(), train, source)?;
    state.direct = model.direct;

    // Budget-training data; identical across strategies for a fixed seed.
    let data = synth_dataset(splitmix(seed, 0xDA7A), protocol.pool, protocol.image)?;
    let val = synth_dataset(0xBA5E, protocol.val_count, protocol.image)?;

    let initial = state.validation_loss(&val, 0xCAFE)?;
    let mut curve = Vec::new();
    let mut stream_hash = 0xcbf2_9ce4_8422_2325u64;
    for step in 0..protocol.budget {
        let lo = (step * protocol.batch_size) % protocol.pool;
        let hi = (lo + protocol.batch_size).min(protocol.pool);
        let batch = data.slice(lo, hi);
        stream_hash ^= byte_checksum(&batch.pixels);
        stream_hash = stream_hash.wrapping_mul(0x0000_0100_0000_01b3);
        state.pretrain_step(&batch)?;
        if (step + 1) % protocol.curve_every == 0 {
            curve.push(state.validation_loss(&val, 0xCAFE)?);
        }
    }
    let final_val = state.validation_loss(&val, 0xCAFE)?;

    let theta = split_weights(
        &UnifiedWeightTensor {
            w: state.source.materialize(&layout)?,
        },
        &layout,
    )?;
    let trained = ModelParams {
        config: cfg,
        theta,
        direct: state.direct.clone(),
    };
    Ok((
        EvalRun {
            strategy: String::new(),
            target: String::new(),
            seed,
            budget: protocol.budget,
            initial_val_loss: initial,
            final_val_loss: final_val,
            probe_accuracy: None,
            curve,
            batch_stream_hash: stream_hash,
        },
        trained,
    ))
}

/// Full comparison: every (strategy, target, seed) trained under the same
/// budget and bit-identical data order, summarized per cell.
pub fn compare_inits(
    sources: &[EvalSource],
    src_cfg: &ViTConfig,
    targets: &[TargetConfig],
    strategies: &[Strategy],
    seeds: &[u64],
    protocol: &EvalProtocol,
) -> Result<EvalTable> {
    if strategies.len() < 2 {
        return Err(SweetError::Protocol(format!(
            "comparison needs at least 2 strategies, got {}",
            strategies.len()
        )));
    }
    if seeds.is_empty() {
        return Err(SweetError::Protocol("comparison needs at least 1 seed".into()));
    }
    let mut runs = Vec::new();
    for tgt in targets {
        let target_id = format!("L{}H{}d{}", tgt.layers, tgt.heads, tgt.head_dim);
        let mut hash_per_seed: Vec<(u64, u64)> = Vec::new();
        for strategy in strategies {
            for &seed in seeds {
                let model =
                    build_initial_model(strategy, sources, tgt, src_cfg, seed, protocol)?;
                let (mut run, trained) = budget_train(model, seed, protocol)?;
                run.strategy = strategy.id();
                run.target = target_id.clone();
                if protocol.with_probe {
                    run.probe_accuracy = Some(linear_probe(
                        &trained,
                        splitmix(seed, 0x9B0B),
                        protocol.pool.max(64),
                        protocol.image,
                    )?);
                }
                // Protocol fairness: identical batch streams across
                // strategies for the same seed.
                match hash_per_seed.iter().find(|(s, _)| *s == seed) {
                    Some((_, h)) => {
                        if *h != run.batch_stream_hash {
                            return Err(SweetError::Protocol(format!(
                                "batch stream diverged for seed {seed}"
                            )));
                        }
                    }
                    None => hash_per_seed.push((seed, run.batch_stream_hash)),
                }
                runs.push(run);
            }
        }
    }

    let mut summaries = Vec::new();
    for tgt in targets {
        let target_id = format!("L{}H{}d{}", tgt.layers, tgt.heads, tgt.head_dim);
        for strategy in strategies {
            let sid = strategy.id();
            let finals: Vec<f64> = runs
                .iter()
                .filter(|r| r.strategy == sid && r.target == target_id)
                .map(|r| r.final_val_loss)
                .collect();
            if finals.is_empty() {
                continue;
            }
            if finals.iter().any(|r| r.is_nan()) {
                return Err(SweetError::Numeric(format!(
                    "nan final loss in {sid} on {target_id}"
                )));
            }
            let n = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let var = finals.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            summaries.push(EvalSummary {
                strategy: sid,
                target: target_id.clone(),
                seeds: finals.len(),
                mean_final_loss: mean,
                std_final_loss: var.sqrt(),
                flagged_low_seeds: finals.len() < 3,
            });
        }
    }
    Ok(EvalTable { runs, summaries })
}

/// Mean-pooled encoder features for every image (no masking).
pub fn encoder_features(model: &ModelParams, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let patches = patchify(images, cfg.patch)?;
    let n = cfg.n_patches();
    let visible: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(images.count);
    for i in 0..images.count {
        let mut tape = crate::autodiff::Tape::new();
        let weights = weight_nodes_from_theta(&mut tape, &model.theta, false);
        let nodes = bind_direct(&mut tape, &model.direct, false);
        let input = tape.constant(DenseTensor::new(
            vec![n, cfg.patch_dim()],
            patches.patches(i).to_vec(),
        )?)
        ;
        let cache = encoder_forward(&mut tape, cfg, &weights, &nodes, input, &visible)?;
        let v = tape.value(cache.encoder_out);
        let d = cfg.embed_dim;
        let mut pooled = vec![0.0; d];
        for row in 0..n {
            for j in 0..d {
                pooled[j] += v.data()[row * d + j] / n as f64;
            }
        }
        out.push(pooled);
    }
    Ok(out)
}

/// Multinomial logistic regression on fixed feature vectors; deterministic
/// full-batch gradient descent. Returns held-out accuracy.
pub fn probe_on_features(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    epochs: usize,
) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(SweetError::Argument("features/labels mismatch".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(SweetError::Argument(
            "probe task is degenerate: fewer than two classes present".into(),
        ));
    }
    let n = features.len();
    let split = (n * 4) / 5;
    if split == 0 || split == n {
        return Err(SweetError::Argument("probe set too small to split".into()));
    }
    let d = features[0].len();
    // Standardize features on the training split.
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for f in &features[..split] {
        for j in 0..d {
            mean[j] += f[j] / split as f64;
        }
    }
    for f in &features[..split] {
        for j in 0..d {
            var[j] += (f[j] - mean[j]) * (f[j] - mean[j]) / split as f64;
        }
    }
    let norm = |f: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| (f[j] - mean[j]) / (var[j] + 1e-8).sqrt())
            .collect()
    };

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let lr = 0.5;
    for _ in 0..epochs {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for (f, &y) in features[..split].iter().zip(&labels[..split]) {
            let x = norm(f);
            let mut logits = b.clone();
            for j in 0..d {
                for c in 0..classes {
                    logits[c] += x[j] * w[j * classes + c];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let z: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= z;
            }
            for c in 0..classes {
                let err = p[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += err / split as f64;
                for j in 0..d {
                    gw[j * classes + c] += err * x[j] / split as f64;
                }
            }
        }
        for i in 0..w.len() {
            w[i] -= lr * gw[i];
        }
        for c in 0..classes {
            b[c] -= lr * gb[c];
        }
    }
    let mut correct = 0usize;
    for (f, &y) in features[split..].iter().zip(&labels[split..]) {
        let x = norm(f);
        let mut logits = b.clone();
        for j in 0..d {
            for c in 0..classes {
                logits[c] += x[j] * w[j * classes + c];
            }
        }
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / (n - split) as f64)
}

/// Trains a linear head on frozen encoder features over the synthetic
/// labeling task and reports held-out accuracy.
pub fn linear_probe(model: &ModelParams, seed: u64, count: usize, image: usize) -> Result<f64> {
    let (images, labels) = synth_dataset_labeled(seed, count, image)?;
    let features = encoder_features(model, &images)?;
    probe_on_features(&features, &labels, SYNTH_CLASSES, 300)
}

/// Probe on raw flattened pixels, the reference point for feature quality.
pub fn pixel_probe(seed: u64, count: usize, image: usize) -> Result<f64> {
    let (images, labels) = synth_dataset_labeled(seed, count, image)?;
    let features: Vec<Vec<f64>> = (0..count).map(|i| images.image(i).to_vec()).collect();
    probe_on_features(&features, &labels, SYNTH_CLASSES, 300)
}

/// Chance-level sanity check: accuracy on shuffled labels.
pub fn shuffled_label_probe(model: &ModelParams, seed: u64, count: usize, image: usize) -> Result<f64> {
    let (images, mut labels) = synth_dataset_labeled(seed, count, image)?;
    let mut rng = stream_rng(seed, 0x51AB);
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let features = encoder_features(model, &images)?;
    probe_on_features(&features, &labels, SYNTH_CLASSES, 300)
}
