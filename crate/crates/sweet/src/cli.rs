//! Command-line workflows: pretrain, init/adapt, eval, verify, and
//! export-images, plus the key=value config file and the stable exit-code
//! contract (0 ok, 2 usage, 3 format, 4 numeric, 5 capability).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{
    patchify, synth_dataset, unpatchify, write_raw_dataset, ImageBatch, RawDatasetReader,
};
use crate::error::{Result, SweetError};
use crate::eval::{compare_inits, EvalProtocol, EvalSource, Strategy};
use crate::init_adapt::{
    export_model, export_template, import_model, import_template, initialize_target, InitMode,
    TargetConfig,
};
use crate::pretrain::{
    mask_patches, splitmix, streams, stream_rng, MaskSpec, TrainConfig, TrainState, WeightSource,
};
use crate::template::WidthDistribution;
use crate::vit::ViTConfig;

pub const SEED_ENV: &str = "SWEET_SEED";
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(
    name = "sweet",
    about = "Tucker-factorized weight templates for scalable ViT initialization",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a weight template on masked-patch reconstruction.
    Pretrain(PretrainArgs),
    /// Initialize a target model from a template checkpoint.
    Init(InitArgs),
    /// Alias of `init --mode adapt`.
    Adapt(InitArgs),
    /// Compare initialization strategies under a fixed budget.
    Eval(EvalArgs),
    /// Run the numeric oracle suites.
    Verify(VerifyArgs),
    /// Dump masked-reconstruction triples as a raw dataset file.
    ExportImages(ExportImagesArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run seed (falls back to $SWEET_SEED, then 42).
    #[arg(long)]
    seed: Option<u64>,
    /// key=value config file; flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Step log path (defaults to <out>.log).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Raw dataset file (SWTD). Mutually exclusive with --synth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use N deterministic synthetic images instead of --data.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Peak learning rate (default: the batch-scaled desk rule).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    /// Encoder depth.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Template ranks r1,r2,r3.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    ranks: Option<Vec<usize>>,
    /// Allowed width keep values (uniform distribution).
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Disable width-wise stochastic scaling.
    #[arg(long)]
    no_stochastic_scaling: bool,
    /// Constraint kind: tucker, kron, none.
    #[arg(long, default_value = "tucker")]
    constraint: String,
    #[arg(long)]
    swiglu: bool,
    #[arg(long)]
    rmsnorm: bool,
    #[arg(long)]
    rope: bool,
    /// Decoder depth / width / heads.
    #[arg(long, default_value_t = 2)]
    dec_depth: usize,
    #[arg(long)]
    dec_dim: Option<usize>,
    #[arg(long)]
    dec_heads: Option<usize>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Source template checkpoint.
    #[arg(long)]
    template: PathBuf,
    /// Target depth.
    #[arg(long)]
    depth: usize,
    /// Target head count.
    #[arg(long)]
    heads: usize,
    /// Target head dim (defaults to the source's).
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long, default_value = "inherit")]
    mode: String,
    #[arg(long, default_value_t = 200)]
    adapt_steps: usize,
    /// Adaptation data: raw dataset path, or synthetic when omitted.
    #[arg(long)]
    adapt_data: Option<PathBuf>,
    /// Depth selection: first or stride.
    #[arg(long, default_value = "first")]
    depth_strategy: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the init report here (always printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Template checkpoint trained with stochastic scaling.
    #[arg(long)]
    template: PathBuf,
    /// Optional template trained without stochastic scaling.
    #[arg(long)]
    no_stoch_template: Option<PathBuf>,
    /// Optional unconstrained full-model checkpoint for wt-select.
    #[arg(long)]
    baseline_model: Option<PathBuf>,
    /// Comma-separated strategies: sweet-inherit, sweet-adapt, random,
    /// wt-select, sweet-inherit-nostoch.
    #[arg(long, value_delimiter = ',', required = true)]
    strategies: Vec<String>,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 500)]
    budget: usize,
    #[arg(long, default_value_t = 200)]
    adapt_steps: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long)]
    head_dim: Option<usize>,
    /// Include the linear-probe accuracy column.
    #[arg(long)]
    probe: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Print check names without running.
    #[arg(long)]
    list: bool,
    /// Inject a fault into the named path (supported: tucker).
    #[arg(long)]
    poison: Option<String>,
}

#[derive(Args)]
struct ExportImagesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model or template checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw dataset input; synthetic images when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of images to reconstruct.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses a key=value config file. `#` starts a comment line.
fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| SweetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SweetError::Usage(format!(
                "config {} line {}: expected key=value",
                path.display(),
                i + 1
            ))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn resolve_seed(common: &CommonArgs, file: &BTreeMap<String, String>) -> Result<u64> {
    if let Some(s) = common.seed {
        return Ok(s);
    }
    if let Some(v) = file.get("seed") {
        return v
            .parse::<u64>()
            .map_err(|e| SweetError::Usage(format!("config seed: {e}")));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|e| SweetError::Usage(format!("${SEED_ENV}: {e}"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn load_images(
    data: &Option<PathBuf>,
    synth: Option<usize>,
    seed: u64,
    image_size: usize,
) -> Result<ImageBatch> {
    match (data, synth) {
        (Some(path), None) => {
            let mut reader = RawDatasetReader::open(path)?;
            let count = reader.count;
            reader
                .next_batch(count)?
                .ok_or_else(|| SweetError::Format {
                    offset: 0,
                    message: "dataset holds no images".into(),
                })
        }
        (None, Some(n)) => synth_dataset(splitmix(seed, streams::DATA), n.max(1), image_size),
        (Some(_), Some(_)) => Err(SweetError::Usage(
            "--data and --synth are mutually exclusive".into(),
        )),
        (None, None) => Err(SweetError::Usage(
            "a dataset is required: pass --data PATH or --synth COUNT".into(),
        )),
    }
}

fn run_record(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let file = match &args.common.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let seed = resolve_seed(&args.common, &file)?;
    let mut cfg = ViTConfig::new(
        args.depth,
        args.heads,
        args.head_dim,
        args.patch,
        args.image_size,
        1,
    )?
    .with_flags(args.swiglu, args.rmsnorm, args.rope);
    cfg.dec_depth = args.dec_depth;
    if let Some(d) = args.dec_dim {
        cfg.dec_dim = d;
    }
    if let Some(h) = args.dec_heads {
        cfg.dec_heads = h;
    }
    cfg.validate()?;

    let mut train = TrainConfig::desk_default(args.steps, args.batch, seed, cfg.embed_dim);
    if let Some(lr) = args.lr {
        train.peak_lr = lr;
    }
    if let Some(wd) = args.weight_decay {
        train.weight_decay = wd;
    }
    if let Some(w) = args.warmup {
        train.warmup = w;
    }
    train.mask_ratio = args.mask_ratio;
    if let Some(widths) = &args.widths {
        train.width_dist = WidthDistribution::uniform(widths.clone())?;
    }
    train.stochastic_scaling = !args.no_stochastic_scaling;

    let ranks = match &args.ranks {
        Some(r) => (r[0], r[1], r[2]),
        None => (
            cfg.layout()?.slices_per_layer,
            cfg.embed_dim / 2,
            cfg.embed_dim / 2,
        ),
    };
    let source = match args.constraint.as_str() {
        "tucker" => WeightSource::init_tucker(
            &cfg,
            ranks,
            splitmix(seed, streams::INIT_FACTOR),
            0.05,
        )?,
        "kron" => WeightSource::init_kronecker(
            &cfg,
            cfg.embed_dim / 4,
            splitmix(seed, streams::INIT_FACTOR),
            0.05,
        )?,
        "none" => WeightSource::init_direct(&cfg, splitmix(seed, streams::INIT_FACTOR), 0.05)?,
        other => {
            return Err(SweetError::Usage(format!(
                "unknown constraint {other}; expected tucker|kron|none"
            )))
        }
    };

    let images = load_images(&args.data, args.synth, seed, args.image_size)?;
    if images.height != args.image_size || images.width != args.image_size {
        return Err(SweetError::Argument(format!(
            "dataset images are {}x{}, expected {}x{}",
            images.height, images.width, args.image_size, args.image_size
        )));
    }

    let mut state = TrainState::new(cfg.clone(), train.clone(), source)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log"));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| {
        SweetError::Io {
            path: log_path.display().to_string(),
            source: e,
        }
    })?);
    let io_err = |e: std::io::Error| SweetError::Io {
        path: log_path.display().to_string(),
        source: e,
    };
    let run = run_record(&[
        ("seed", seed.to_string()),
        ("steps", args.steps.to_string()),
        ("batch", args.batch.to_string()),
        ("lr", format!("{:.9e}", train.peak_lr)),
        ("weight_decay", format!("{:.9e}", train.weight_decay)),
        ("warmup", train.warmup.to_string()),
        ("mask_ratio", format!("{}", train.mask_ratio)),
        ("constraint", args.constraint.clone()),
        (
            "widths",
            train
                .width_dist
                .widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "stochastic_scaling",
            (train.stochastic_scaling as u8).to_string(),
        ),
        ("ranks", format!("{},{},{}", ranks.0, ranks.1, ranks.2)),
    ]);
    writeln!(
        log,
        "# sweet pretrain\t{}",
        run.iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\t")
    )
    .map_err(io_err)?;
    writeln!(log, "# step\tloss\tlr\tkeep_u\tkeep_v\tgrad_norm").map_err(io_err)?;

    let pool = images.count;
    for step in 0..args.steps {
        let lo = (step * args.batch) % pool;
        let hi = (lo + args.batch).min(pool);
        let batch = images.slice(lo, hi);
        let stats = match state.pretrain_step(&batch) {
            Ok(s) => s,
            Err(e) => {
                // Diagnostic snapshot next to the intended output.
                let diag = args.out.with_extension("diag.swt");
                let _ = save_state(&state, &run, &diag);
                return Err(e);
            }
        };
        writeln!(log, "{}", stats.log_line()).map_err(io_err)?;
    }
    log.flush().map_err(io_err)?;
    save_state(&state, &run, &args.out)?;
    println!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

fn save_state(state: &TrainState, run: &[(String, String)], path: &Path) -> Result<()> {
    match &state.source {
        WeightSource::Tucker { template, scalers } => export_template(
            template,
            scalers,
            &state.direct,
            &state.cfg,
            run.to_vec(),
            path,
        ),
        other => {
            // Ablation sources export as materialized models.
            let layout = state.cfg.layout()?;
            let theta = crate::template::split_weights(
                &crate::template::UnifiedWeightTensor {
                    w: other.materialize(&layout)?,
                },
                &layout,
            )?;
            let model = crate::vit::ModelParams {
                config: state.cfg.clone(),
                theta,
                direct: state.direct.clone(),
            };
            export_model(&model, run.to_vec(), path)
        }
    }
}

fn cmd_init(mut args: InitArgs, force_adapt: bool) -> Result<()> {
    let file = match &args.common.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let seed = resolve_seed(&args.common, &file)?;
    if force_adapt {
        args.mode = "adapt".to_string();
    }
    let mode = InitMode::parse(&args.mode)?;
    let ck = Checkpoint::load(&args.template)?;
    let (template, scalers, _direct) = import_template(&ck)?;
    let src_cfg = ck.config.clone();
    let head_dim = args.head_dim.unwrap_or(src_cfg.head_dim);
    let mut tgt = TargetConfig::new(args.depth, args.heads, head_dim, mode);
    tgt.adapt_steps = args.adapt_steps;
    tgt.depth_strategy = match args.depth_strategy.as_str() {
        "first" => crate::template::DepthStrategy::FirstK,
        "stride" => crate::template::DepthStrategy::EvenStride,
        other => {
            return Err(SweetError::Usage(format!(
                "unknown depth strategy {other}; expected first|stride"
            )))
        }
    };

    let adapt_data = if mode == InitMode::Adapt && tgt.adapt_steps > 0 {
        Some(match &args.adapt_data {
            Some(p) => {
                let mut r = RawDatasetReader::open(p)?;
                let count = r.count;
                r.next_batch(count)?.ok_or_else(|| SweetError::Format {
                    offset: 0,
                    message: "adaptation dataset holds no images".into(),
                })?
            }
            None => synth_dataset(splitmix(seed, streams::DATA), 128, src_cfg.image)?,
        })
    } else {
        None
    };

    let (model, _t, _s, report) = initialize_target(
        &template,
        &scalers,
        &src_cfg,
        &tgt,
        adapt_data.as_ref(),
        seed,
        None,
    )?;
    let run = run_record(&[
        ("seed", seed.to_string()),
        ("mode", args.mode.clone()),
        ("depth", args.depth.to_string()),
        ("heads", args.heads.to_string()),
        ("head_dim", head_dim.to_string()),
        ("adapt_steps", report.adapt_steps_run.to_string()),
        ("template", args.template.display().to_string()),
    ]);
    export_model(&model, run, &args.out)?;
    let rendered = report.render();
    print!("{rendered}");
    if let Some(rp) = &args.report {
        std::fs::write(rp, &rendered).map_err(|e| SweetError::Io {
            path: rp.display().to_string(),
            source: e,
        })?;
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = match &args.common.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let seed = resolve_seed(&args.common, &file)?;
    if args.seeds < 3 {
        eprintln!(
            "warning: protocol asks for >= 3 seeds, got {}; rows will be flagged",
            args.seeds
        );
    }
    let ck = Checkpoint::load(&args.template)?;
    let (template, scalers, _) = import_template(&ck)?;
    let src_cfg = ck.config.clone();
    let mut sources = vec![EvalSource::Template {
        id: "stoch".into(),
        config: src_cfg.clone(),
        template,
        scalers,
    }];
    if let Some(p) = &args.no_stoch_template {
        let ck2 = Checkpoint::load(p)?;
        let (t2, s2, _) = import_template(&ck2)?;
        sources.push(EvalSource::Template {
            id: "nostoch".into(),
            config: ck2.config.clone(),
            template: t2,
            scalers: s2,
        });
    }
    if let Some(p) = &args.baseline_model {
        let ck3 = Checkpoint::load(p)?;
        let model = import_model(&ck3)?;
        sources.push(EvalSource::Model {
            id: "unconstrained".into(),
            model,
        });
    }

    let mut strategies = Vec::new();
    for s in &args.strategies {
        strategies.push(match s.as_str() {
            "sweet-inherit" => Strategy::SweetInherit {
                source: "stoch".into(),
            },
            "sweet-adapt" => Strategy::SweetAdapt {
                source: "stoch".into(),
                steps: args.adapt_steps,
            },
            "sweet-inherit-nostoch" => Strategy::SweetInherit {
                source: "nostoch".into(),
            },
            "random" => Strategy::RandomInit,
            "wt-select" => Strategy::WtSelect {
                source: "unconstrained".into(),
            },
            other => {
                return Err(SweetError::Usage(format!(
                    "unknown strategy {other}; expected sweet-inherit|sweet-adapt|sweet-inherit-nostoch|random|wt-select"
                )))
            }
        });
    }
    let head_dim = args.head_dim.unwrap_or(src_cfg.head_dim);
    let targets = vec![TargetConfig::new(
        args.depth,
        args.heads,
        head_dim,
        InitMode::Inherit,
    )];
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| splitmix(seed, 100 + i)).collect();
    let protocol = EvalProtocol {
        budget: args.budget,
        image: src_cfg.image,
        with_probe: args.probe,
        ..EvalProtocol::default()
    };
    let table = compare_inits(&sources, &src_cfg, &targets, &strategies, &seeds, &protocol)?;
    let rendered = table.render();
    print!("{rendered}");
    if let Some(out) = &args.out {
        std::fs::write(out, &rendered).map_err(|e| SweetError::Io {
            path: out.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_export_images(args: ExportImagesArgs) -> Result<()> {
    let file = match &args.common.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let seed = resolve_seed(&args.common, &file)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = match ck.kind {
        crate::checkpoint::CheckpointKind::Model => import_model(&ck)?,
        crate::checkpoint::CheckpointKind::Template => {
            let (template, scalers, direct) = import_template(&ck)?;
            let layout = ck.config.layout()?;
            let w = crate::template::reconstruct(&template, &scalers, &layout)?;
            let theta = crate::template::split_weights(&w, &layout)?;
            crate::vit::ModelParams {
                config: ck.config.clone(),
                theta,
                direct,
            }
        }
    };
    let cfg = &model.config;
    let images = match &args.data {
        Some(p) => {
            let mut r = RawDatasetReader::open(p)?;
            let n = args.count.min(r.count);
            r.next_batch(n)?.ok_or_else(|| SweetError::Format {
                offset: 0,
                message: "dataset holds no images".into(),
            })?
        }
        None => synth_dataset(splitmix(seed, streams::DATA), args.count, cfg.image)?,
    };

    let patches = patchify(&images, cfg.patch)?;
    let n = cfg.n_patches();
    let pd = cfg.patch_dim();
    let mut mask_rng = stream_rng(seed, streams::MASK);
    // For each input: original, masked view, and the composite where
    // masked patches come from the model's reconstruction.
    let mut out_pixels = Vec::new();
    for i in 0..images.count {
        let spec: MaskSpec = mask_patches(n, args.mask_ratio, &mut mask_rng)?;
        let visible = spec.visible(n);
        let mut tape = crate::autodiff::Tape::new();
        let weights = crate::vit::weight_nodes_from_theta(&mut tape, &model.theta, false);
        let nodes = crate::vit::bind_direct(&mut tape, &model.direct, false);
        let input = tape.constant(crate::tensor::DenseTensor::new(
            vec![n, pd],
            patches.patches(i).to_vec(),
        )?)
        ;
        let latents = if visible.is_empty() {
            None
        } else {
            Some(
                crate::vit::encoder_forward(&mut tape, cfg, &weights, &nodes, input, &visible)?
                    .encoder_out,
            )
        };
        let pred = crate::vit::decoder_forward(&mut tape, cfg, &nodes, latents, &visible)?;
        let pred_vals = tape.value(pred).data();

        // Undo the per-patch target normalization using input statistics.
        let orig = patches.patches(i);
        let mut composite = orig.to_vec();
        let mut masked_view = orig.to_vec();
        for &p in &spec.masked {
            let row = &orig[p * pd..(p + 1) * pd];
            let mean = row.iter().sum::<f64>() / pd as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / pd as f64;
            let denom = (var + 1e-6).sqrt();
            for j in 0..pd {
                composite[p * pd + j] = (pred_vals[p * pd + j] * denom + mean).clamp(0.0, 1.0);
                masked_view[p * pd + j] = 0.5;
            }
        }
        for row in [orig, &masked_view, &composite] {
            let pb = crate::data::PatchBatch {
                count: 1,
                n_patches: n,
                patch_dim: pd,
                patch: cfg.patch,
                height: images.height,
                width: images.width,
                channels: images.channels,
                data: row.to_vec(),
            };
            out_pixels.extend_from_slice(&unpatchify(&pb)?.pixels);
        }
    }
    let out_batch = ImageBatch::new(
        images.count * 3,
        images.height,
        images.width,
        images.channels,
        out_pixels,
    )?;
    write_raw_dataset(&args.out, &out_batch)?;
    println!(
        "wrote {} ({} rows of original/masked/reconstruction)",
        args.out.display(),
        images.count
    );
    Ok(())
}

/// Entry point used by `main`; maps errors to the exit-code contract.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; help/version are success.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Init(args) => cmd_init(args, false),
        Command::Adapt(args) => cmd_init(args, true),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify(args) => crate::verify::cmd_verify(&args.poison, args.list),
        Command::ExportImages(args) => cmd_export_images(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let dir = std::env::temp_dir().join("sweet_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("run.conf");
        std::fs::write(&p, "# comment\nseed=9\nsteps = 12\n").unwrap();
        let map = read_config_file(&p).unwrap();
        assert_eq!(map["seed"], "9");
        assert_eq!(map["steps"], "12");
        std::fs::write(&p, "broken line\n").unwrap();
        assert!(matches!(
            read_config_file(&p),
            Err(SweetError::Usage(_))
        ));
    }

    #[test]
    fn seed_resolution_order() {
        let dir = std::env::temp_dir().join("sweet_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("seed.conf");
        std::fs::write(&p, "seed=7\n").unwrap();
        let file = read_config_file(&p).unwrap();
        let explicit = CommonArgs {
            seed: Some(3),
            config: None,
        };
        assert_eq!(resolve_seed(&explicit, &file).unwrap(), 3);
        let from_file = CommonArgs {
            seed: None,
            config: None,
        };
        assert_eq!(resolve_seed(&from_file, &file).unwrap(), 7);
    }
}
