//! Scalable target-model initialization: inherit or randomize scalers,
//! optionally adapt them briefly with the template frozen, then
//! materialize a standalone model with no remaining dependence on the
//! template.
//!
//! The factor-to-model boundary snaps template and scalers to f32 (the
//! storage precision) before reconstructing, so weights recomputed from a
//! saved factor checkpoint are bit-identical to the materialized ones.

use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::ImageBatch;
use crate::error::{Result, SweetError};
use crate::params::ParamSet;
use crate::pretrain::{splitmix, streams, stream_rng, TrainConfig, TrainState, WeightSource};
use crate::template::{
    random_scalers, slice_scalers, DepthStrategy, LayoutDescriptor, Scalers, Template,
    UnifiedWeightTensor,
};
use crate::tensor::{DenseMatrix, DenseTensor};
use crate::vit::{DirectParams, ModelParams, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Inherit,
    Random,
    Adapt,
}

impl InitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inherit" => Ok(InitMode::Inherit),
            "random" => Ok(InitMode::Random),
            "adapt" => Ok(InitMode::Adapt),
            other => Err(SweetError::Usage(format!(
                "unknown mode {other}; expected inherit|random|adapt"
            ))),
        }
    }
}

/// Target architecture plus initialization strategy.
#[derive(Debug, Clone)]
pub struct TargetConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mode: InitMode,
    pub adapt_steps: usize,
    pub depth_strategy: DepthStrategy,
    /// Std target for randomly drawn scalers.
    pub random_std: f64,
}

impl TargetConfig {
    pub fn new(layers: usize, heads: usize, head_dim: usize, mode: InitMode) -> Self {
        TargetConfig {
            layers,
            heads,
            head_dim,
            mode,
            adapt_steps: 200,
            depth_strategy: DepthStrategy::FirstK,
            random_std: 0.02,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Target ViT config inheriting patching and enhancement flags from
    /// the source.
    pub fn vit_config(&self, src: &ViTConfig) -> Result<ViTConfig> {
        let cfg = ViTConfig::new(
            self.layers,
            self.heads,
            self.head_dim,
            src.patch,
            src.image,
            src.channels,
        )?
        .with_flags(src.swiglu, src.rmsnorm, src.rope);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome record emitted alongside every initialization.
#[derive(Debug, Clone)]
pub struct InitReport {
    pub mode: InitMode,
    pub adapt_steps_run: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub template_params: usize,
    pub scaler_params: usize,
    pub model_params: usize,
}

impl InitReport {
    /// Structured text record, one key=value per line.
    pub fn render(&self) -> String {
        let mode = match self.mode {
            InitMode::Inherit => "inherit",
            InitMode::Random => "random",
            InitMode::Adapt => "adapt",
        };
        let mut out = String::new();
        out.push_str(&format!("mode={mode}\n"));
        out.push_str(&format!("adapt_steps={}\n", self.adapt_steps_run));
        if let Some(l) = self.initial_loss {
            out.push_str(&format!("initial_loss={l:.9e}\n"));
        }
        if let Some(l) = self.final_loss {
            out.push_str(&format!("final_loss={l:.9e}\n"));
        }
        out.push_str(&format!("template_params={}\n", self.template_params));
        out.push_str(&format!("scaler_params={}\n", self.scaler_params));
        out.push_str(&format!("model_params={}\n", self.model_params));
        out
    }
}

fn snap_template(t: &Template) -> Template {
    let mut g = t.g.clone();
    for v in g.data_mut() {
        *v = *v as f32 as f64;
    }
    Template { g }
}

fn snap_scalers(s: &Scalers) -> Scalers {
    let snap = |m: &DenseMatrix| {
        let data: Vec<f64> = m.data().iter().map(|&v| v as f32 as f64).collect();
        DenseMatrix::new(m.rows(), m.cols(), data).unwrap()
    };
    Scalers {
        x: snap(&s.x),
        u: snap(&s.u),
        v: snap(&s.v),
    }
}

/// FNV-1a over the raw f64 bytes; used for frozen-template contracts.
pub fn byte_checksum(data: &[f64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in data {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Brief scaler-only optimization: gradients update the scalers and target
/// direct params while the template stays bit-frozen; the best-validation
/// iterate is returned.
///
/// The last batch-worth of `data` is held out for iterate selection.
pub fn adapt_scalers(
    template: &Template,
    scalers: Scalers,
    direct: DirectParams,
    tgt_cfg: &ViTConfig,
    data: &ImageBatch,
    budget: usize,
    train_cfg: &TrainConfig,
) -> Result<(Scalers, DirectParams, f64, f64)> {
    if budget == 0 {
        return Err(SweetError::Argument("adaptation budget must be >= 1".into()));
    }
    let batch = train_cfg.batch_size.min(data.count.max(1));
    if data.count < 2 * batch {
        return Err(SweetError::Argument(format!(
            "adaptation data must hold at least two batches of {batch}, got {} images",
            data.count
        )));
    }
    let g_before = byte_checksum(template.g.data());
    let holdout = data.slice(data.count - batch, data.count);
    let pool = data.count - batch;

    let source = WeightSource::Tucker {
        template: template.clone(),
        scalers,
    };
    let mut cfg = train_cfg.clone();
    cfg.steps = budget;
    cfg.warmup = (budget / 10).max(1);
    cfg.stochastic_scaling = false;
    let mut state = TrainState::new(tgt_cfg.clone(), cfg, source)?;
    state.freeze_template = true;
    state.direct = direct;

    let initial = state.validation_loss(&holdout, train_cfg.seed)?;
    let mut best = initial;
    let mut best_state: (Scalers, DirectParams) = match &state.source {
        WeightSource::Tucker { scalers, .. } => (scalers.clone(), state.direct.clone()),
        _ => unreachable!(),
    };
    let eval_every = (budget / 20).max(1);
    for step in 0..budget {
        let lo = (step * batch) % pool.max(1);
        let hi = (lo + batch).min(pool);
        let b = data.slice(lo, hi);
        state.pretrain_step(&b)?;
        if (step + 1) % eval_every == 0 || step + 1 == budget {
            let v = state.validation_loss(&holdout, train_cfg.seed)?;
            if v < best {
                best = v;
                best_state = match &state.source {
                    WeightSource::Tucker { scalers, .. } => {
                        (scalers.clone(), state.direct.clone())
                    }
                    _ => unreachable!(),
                };
            }
        }
    }
    // Frozen-template contract.
    let g_after = match &state.source {
        WeightSource::Tucker { template, .. } => byte_checksum(template.g.data()),
        _ => unreachable!(),
    };
    if g_before != g_after {
        return Err(SweetError::Contract(
            "template mutated during scaler adaptation".into(),
        ));
    }
    Ok((best_state.0, best_state.1, initial, best))
}

/// Produces a fully materialized target model plus the snapped factor
/// system it came from and a report. `data` is required for adapt mode.
pub fn initialize_target(
    template: &Template,
    src_scalers: &Scalers,
    src_cfg: &ViTConfig,
    tgt: &TargetConfig,
    data: Option<&ImageBatch>,
    seed: u64,
    adapt_train: Option<&TrainConfig>,
) -> Result<(ModelParams, Template, Scalers, InitReport)> {
    let tgt_cfg = tgt.vit_config(src_cfg)?;
    let src_layout = src_cfg.layout()?;
    let tgt_layout = tgt_cfg.layout()?;
    let d_star = tgt.embed_dim();

    let fits = tgt.layers <= src_cfg.layers && d_star <= src_cfg.embed_dim;
    let mut rng: ChaCha12Rng = stream_rng(seed, streams::INIT_FACTOR);

    let start_scalers = match tgt.mode {
        InitMode::Inherit => {
            if !fits {
                return Err(SweetError::Capability(format!(
                    "inherit requires target ({} layers, width {d_star}) within source ({} layers, width {}); use random or adapt mode",
                    tgt.layers, src_cfg.layers, src_cfg.embed_dim
                )));
            }
            slice_scalers(src_scalers, &src_layout, tgt.layers, d_star, tgt.depth_strategy)?
        }
        InitMode::Random => random_scalers(&mut rng, template, &tgt_layout, tgt.random_std)?,
        InitMode::Adapt => {
            if fits {
                slice_scalers(src_scalers, &src_layout, tgt.layers, d_star, tgt.depth_strategy)?
            } else {
                random_scalers(&mut rng, template, &tgt_layout, tgt.random_std)?
            }
        }
    };

    let mut direct = DirectParams::init(&tgt_cfg, splitmix(seed, streams::INIT_DIRECT))?;
    let mut report = InitReport {
        mode: tgt.mode,
        adapt_steps_run: 0,
        initial_loss: None,
        final_loss: None,
        template_params: template.g.len(),
        scaler_params: start_scalers.param_count(),
        model_params: 0,
    };

    let final_scalers = if tgt.mode == InitMode::Adapt && tgt.adapt_steps > 0 {
        let data = data.ok_or_else(|| {
            SweetError::Argument("adapt mode requires adaptation data".into())
        })?;
        let base = TrainConfig::desk_default(tgt.adapt_steps, 8, seed, d_star);
        let train_cfg = adapt_train.cloned().unwrap_or(base);
        let (s, d2, init_loss, final_loss) = adapt_scalers(
            template,
            start_scalers,
            direct,
            &tgt_cfg,
            data,
            tgt.adapt_steps,
            &train_cfg,
        )?;
        direct = d2;
        report.adapt_steps_run = tgt.adapt_steps;
        report.initial_loss = Some(init_loss);
        report.final_loss = Some(final_loss);
        s
    } else {
        start_scalers
    };

    // Factor-to-model boundary: snap to storage precision, then realize.
    let snapped_t = snap_template(template);
    let snapped_s = snap_scalers(&final_scalers);
    report.scaler_params = snapped_s.param_count();
    let w = crate::template::reconstruct(&snapped_t, &snapped_s, &tgt_layout)?;
    let theta = crate::template::split_weights(&w, &tgt_layout)?;
    let mut model = ModelParams {
        config: tgt_cfg,
        theta,
        direct,
    };
    // The exported model stores f32; keep the in-memory copy consistent.
    model.direct.set.snap_to_f32();
    for lw in &mut model.theta {
        for m in [&mut lw.wq, &mut lw.wk, &mut lw.wv, &mut lw.wo, &mut lw.win, &mut lw.wout] {
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        if let Some(g) = &mut lw.wgate {
            for v in g.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
    report.model_params = model.total_scalars();
    Ok((model, snapped_t, snapped_s, report))
}

/// Serializes a materialized model as a standalone checkpoint; loading
/// reproduces it bit-exactly at f32.
pub fn export_model(model: &ModelParams, run: Vec<(String, String)>, path: &std::path::Path) -> Result<()> {
    let mut tensors = ParamSet::new();
    for (l, lw) in model.theta.iter().enumerate() {
        let mats: Vec<(&str, &DenseMatrix)> = {
            let mut v = vec![
                ("wq", &lw.wq),
                ("wk", &lw.wk),
                ("wv", &lw.wv),
                ("wo", &lw.wo),
                ("win", &lw.win),
            ];
            if let Some(g) = &lw.wgate {
                v.push(("wgate", g));
            }
            v.push(("wout", &lw.wout));
            v
        };
        for (name, m) in mats {
            tensors.insert(
                &format!("theta/l{l}/{name}"),
                DenseTensor::from_matrix(m),
            )?;
        }
    }
    for (name, t) in model.direct.set.iter() {
        tensors.insert(&format!("direct/{name}"), t.clone())?;
    }
    let ck = Checkpoint {
        kind: CheckpointKind::Model,
        config: model.config.clone(),
        ranks: None,
        run,
        tensors,
    };
    ck.save(path)
}

/// Rebuilds `ModelParams` from a model checkpoint.
pub fn import_model(ck: &Checkpoint) -> Result<ModelParams> {
    if ck.kind != CheckpointKind::Model {
        return Err(SweetError::Format {
            offset: 0,
            message: "expected a model checkpoint".into(),
        });
    }
    let cfg = ck.config.clone();
    let layout: LayoutDescriptor = cfg.layout()?;
    let mut theta = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let get = |name: &str| -> Result<DenseMatrix> {
            ck.tensors.get(&format!("theta/l{l}/{name}"))?.to_matrix()
        };
        theta.push(crate::template::LayerWeights {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            win: get("win")?,
            wout: get("wout")?,
            wgate: if layout.gated_mlp {
                Some(get("wgate")?)
            } else {
                None
            },
        });
    }
    let mut set = ParamSet::new();
    for (name, t) in ck.tensors.iter() {
        if let Some(stripped) = name.strip_prefix("direct/") {
            set.insert(stripped, t.clone())?;
        }
    }
    Ok(ModelParams {
        config: cfg,
        theta,
        direct: DirectParams { set },
    })
}

/// Serializes a template system (factors + direct params of the source).
pub fn export_template(
    template: &Template,
    scalers: &Scalers,
    direct: &DirectParams,
    config: &ViTConfig,
    run: Vec<(String, String)>,
    path: &std::path::Path,
) -> Result<()> {
    let mut tensors = ParamSet::new();
    tensors.insert("template/g", template.g.clone())?;
    tensors.insert("scalers/x", DenseTensor::from_matrix(&scalers.x))?;
    tensors.insert("scalers/u", DenseTensor::from_matrix(&scalers.u))?;
    tensors.insert("scalers/v", DenseTensor::from_matrix(&scalers.v))?;
    for (name, t) in direct.set.iter() {
        tensors.insert(&format!("direct/{name}"), t.clone())?;
    }
    let (r1, r2, r3) = template.ranks();
    let ck = Checkpoint {
        kind: CheckpointKind::Template,
        config: config.clone(),
        ranks: Some((r1, r2, r3)),
        run,
        tensors,
    };
    ck.save(path)
}

/// Rebuilds the template system from a template checkpoint.
pub fn import_template(ck: &Checkpoint) -> Result<(Template, Scalers, DirectParams)> {
    if ck.kind != CheckpointKind::Template {
        return Err(SweetError::Format {
            offset: 0,
            message: "expected a template checkpoint".into(),
        });
    }
    let template = Template {
        g: ck.tensors.get("template/g")?.clone(),
    };
    let scalers = Scalers {
        x: ck.tensors.get("scalers/x")?.to_matrix()?,
        u: ck.tensors.get("scalers/u")?.to_matrix()?,
        v: ck.tensors.get("scalers/v")?.to_matrix()?,
    };
    let mut set = ParamSet::new();
    for (name, t) in ck.tensors.iter() {
        if let Some(stripped) = name.strip_prefix("direct/") {
            set.insert(stripped, t.clone())?;
        }
    }
    Ok((template, scalers, DirectParams { set }))
}

/// Realizes the unified tensor for a model built from factors; used by
/// tests to compare against prefix slices of the full-width realization.
pub fn realized_unified(model: &ModelParams) -> Result<UnifiedWeightTensor> {
    crate::template::concat_weights(&model.theta, &model.config.layout()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::pretrain::{splitmix, streams, WeightSource};

    fn source_system(seed: u64) -> (ViTConfig, Template, Scalers) {
        let cfg = ViTConfig::new(4, 4, 8, 4, 32, 1).unwrap();
        match WeightSource::init_tucker(&cfg, (12, 16, 16), splitmix(seed, streams::INIT_FACTOR), 0.05)
            .unwrap()
        {
            WeightSource::Tucker { template, scalers } => (cfg, template, scalers),
            _ => unreachable!(),
        }
    }

    #[test]
    fn identity_transfer_is_bit_exact() {
        let (cfg, template, scalers) = source_system(1);
        let tgt = TargetConfig::new(4, 4, 8, InitMode::Inherit);
        let (model, snapped_t, snapped_s, report) =
            initialize_target(&template, &scalers, &cfg, &tgt, None, 7, None).unwrap();
        // The realized weights equal the reconstruction from the snapped
        // factors, bit-exactly at storage precision.
        let layout = cfg.layout().unwrap();
        let w = crate::template::reconstruct(&snapped_t, &snapped_s, &layout).unwrap();
        let theta = crate::template::split_weights(&w, &layout).unwrap();
        for (got, want) in model.theta.iter().zip(&theta) {
            for (gm, wm) in [
                (&got.wq, &want.wq),
                (&got.wk, &want.wk),
                (&got.wv, &want.wv),
                (&got.wo, &want.wo),
                (&got.win, &want.win),
                (&got.wout, &want.wout),
            ] {
                for (a, b) in gm.data().iter().zip(wm.data()) {
                    assert_eq!(*a, *b as f32 as f64);
                }
            }
        }
        assert_eq!(report.scaler_params, snapped_s.param_count());
    }

    #[test]
    fn half_width_inherit_matches_prefix_blocks() {
        let (cfg, template, scalers) = source_system(2);
        let full = TargetConfig::new(4, 4, 8, InitMode::Inherit);
        let half = TargetConfig::new(4, 2, 8, InitMode::Inherit);
        let (m_full, _, _, _) =
            initialize_target(&template, &scalers, &cfg, &full, None, 7, None).unwrap();
        let (m_half, _, _, _) =
            initialize_target(&template, &scalers, &cfg, &half, None, 7, None).unwrap();
        let d = 16;
        for (lw_f, lw_h) in m_full.theta.iter().zip(&m_half.theta) {
            for (mf, mh) in [
                (&lw_f.wq, &lw_h.wq),
                (&lw_f.wk, &lw_h.wk),
                (&lw_f.wv, &lw_h.wv),
                (&lw_f.wo, &lw_h.wo),
            ] {
                let pre = mf.prefix(d, d).unwrap();
                for (a, b) in pre.data().iter().zip(mh.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            // Win blocks: target block j is the prefix of source block j.
            for j in 0..4 {
                for r in 0..d {
                    for c in 0..d {
                        let a = lw_f.win.at(r, j * 32 + c);
                        let b = lw_h.win.at(r, j * d + c);
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn random_mode_is_reproducible() {
        let (cfg, template, scalers) = source_system(3);
        let tgt = TargetConfig::new(2, 2, 8, InitMode::Random);
        let (m1, _, _, _) =
            initialize_target(&template, &scalers, &cfg, &tgt, None, 11, None).unwrap();
        let (m2, _, _, _) =
            initialize_target(&template, &scalers, &cfg, &tgt, None, 11, None).unwrap();
        assert_eq!(m1.theta, m2.theta);
        assert_eq!(m1.direct, m2.direct);
    }

    #[test]
    fn inherit_oversize_is_capability_error() {
        let (cfg, template, scalers) = source_system(4);
        let tgt = TargetConfig::new(6, 4, 8, InitMode::Inherit);
        assert!(matches!(
            initialize_target(&template, &scalers, &cfg, &tgt, None, 7, None),
            Err(SweetError::Capability(_))
        ));
    }

    #[test]
    fn adapt_zero_lr_keeps_scalers() {
        let (cfg, template, scalers) = source_system(5);
        let tgt_cfg = TargetConfig::new(2, 2, 8, InitMode::Inherit)
            .vit_config(&cfg)
            .unwrap();
        let sliced = slice_scalers(
            &scalers,
            &cfg.layout().unwrap(),
            2,
            16,
            DepthStrategy::FirstK,
        )
        .unwrap();
        let direct = DirectParams::init(&tgt_cfg, 3).unwrap();
        let data = synth_dataset(8, 24, 32).unwrap();
        let mut train = TrainConfig::desk_default(20, 4, 5, 16);
        train.peak_lr = 0.0;
        let g0 = byte_checksum(template.g.data());
        let (s, _, init, fin) =
            adapt_scalers(&template, sliced.clone(), direct, &tgt_cfg, &data, 20, &train)
                .unwrap();
        assert_eq!(s, sliced);
        assert_eq!(byte_checksum(template.g.data()), g0);
        assert_eq!(init, fin);
    }

    #[test]
    fn adapt_improves_heldout_and_freezes_template() {
        let (cfg, template, scalers) = source_system(6);
        let tgt = TargetConfig {
            adapt_steps: 120,
            ..TargetConfig::new(2, 2, 8, InitMode::Adapt)
        };
        let data = synth_dataset(9, 48, 32).unwrap();
        let mut train = TrainConfig::desk_default(120, 4, 5, 16);
        train.peak_lr = 3e-3;
        train.weight_decay = 0.0;
        let g0 = byte_checksum(template.g.data());
        let (_, _, _, report) =
            initialize_target(&template, &scalers, &cfg, &tgt, Some(&data), 13, Some(&train))
                .unwrap();
        assert_eq!(byte_checksum(template.g.data()), g0);
        let (init, fin) = (report.initial_loss.unwrap(), report.final_loss.unwrap());
        assert!(fin <= init, "best-iterate contract: {fin} vs {init}");
    }

    #[test]
    fn export_import_round_trip() {
        let (cfg, template, scalers) = source_system(7);
        let tgt = TargetConfig::new(2, 2, 8, InitMode::Inherit);
        let (model, _, _, _) =
            initialize_target(&template, &scalers, &cfg, &tgt, None, 7, None).unwrap();
        let dir = std::env::temp_dir().join("sweet_init_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.swt");
        export_model(&model, vec![("seed".into(), "7".into())], &path).unwrap();
        let back = import_model(&Checkpoint::load(&path).unwrap()).unwrap();
        // Model was snapped to f32 at materialization, so the round trip
        // is exact.
        assert_eq!(back.theta, model.theta);
        assert_eq!(back.direct, model.direct);

        // Deterministic serialization.
        let p2 = dir.join("model2.swt");
        export_model(&model, vec![("seed".into(), "7".into())], &p2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn export_to_unwritable_path_is_io_error() {
        let (cfg, template, scalers) = source_system(8);
        let tgt = TargetConfig::new(2, 2, 8, InitMode::Inherit);
        let (model, _, _, _) =
            initialize_target(&template, &scalers, &cfg, &tgt, None, 7, None).unwrap();
        let path = std::path::Path::new("/nonexistent-dir/model.swt");
        assert!(matches!(
            export_model(&model, vec![], path),
            Err(SweetError::Io { .. })
        ));
    }

    #[test]
    fn materialized_model_survives_template_drop() {
        let (cfg, template, scalers) = source_system(10);
        let tgt = TargetConfig::new(2, 2, 8, InitMode::Inherit);
        let (model, _, _, report) =
            initialize_target(&template, &scalers, &cfg, &tgt, None, 7, None).unwrap();
        // Desk-scale scaler budget stays within a few thousand entries.
        assert!(report.scaler_params <= 4096, "{}", report.scaler_params);
        drop(template);
        drop(scalers);
        let imgs = crate::data::synth_dataset(4, 2, 32).unwrap();
        let feats = crate::eval::encoder_features(&model, &imgs).unwrap();
        assert!(feats.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn template_checkpoint_round_trip() {
        let (cfg, template, scalers) = source_system(9);
        let direct = DirectParams::init(&cfg, 4).unwrap();
        let dir = std::env::temp_dir().join("sweet_init_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tpl.swt");
        export_template(&template, &scalers, &direct, &cfg, vec![], &path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.ranks, Some((12, 16, 16)));
        let (t2, s2, d2) = import_template(&ck).unwrap();
        for (a, b) in t2.g.data().iter().zip(template.g.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(s2.x.rows(), scalers.x.rows());
        assert_eq!(d2.set.len(), direct.set.len());
    }
}
