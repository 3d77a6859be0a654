//! Self-contained oracle suites behind `sweet verify`: brute-force tensor
//! checks, gradient checks, layout round trips, and masking semantics.
//! Each check prints its tolerance and observed error; any failure exits
//! nonzero through the numeric error path.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{grad_check_detailed, Tape};
use crate::data::synth_dataset;
use crate::error::{Result, SweetError};
use crate::pretrain::{mask_patches, MaskSpec, TrainConfig, TrainState, WeightSource};
use crate::template::{concat_weights, split_weights, LayerWeights, LayoutDescriptor};
use crate::tensor::{
    flatten_blocks, kronecker, kronecker_as_tucker, rel_frobenius_err, tucker_reconstruct,
    DenseMatrix, DenseTensor,
};
use crate::vit::ViTConfig;

pub struct CheckOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
}

pub const CHECK_NAMES: [&str; 7] = [
    "tucker-brute-force",
    "kronecker-as-tucker",
    "fold-unfold-roundtrip",
    "mode-identity",
    "layout-roundtrip",
    "mask-semantics",
    "gradcheck-mae-toy",
];

fn rand_tensor(r: &mut ChaCha12Rng, shape: &[usize]) -> DenseTensor {
    let n: usize = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_matrix(r: &mut ChaCha12Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// 50 random instances against the quadruple-loop sum.
fn check_tucker(poisoned: bool) -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x7C4E);
    let tol = 1e-10;
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let (r1, r2, r3) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let (a, b, c) = (
            rng.gen_range(1..=24),
            rng.gen_range(1..=24),
            rng.gen_range(1..=24),
        );
        let g = rand_tensor(&mut rng, &[r1, r2, r3]);
        let x = rand_matrix(&mut rng, a, r1);
        let u = rand_matrix(&mut rng, b, r2);
        let v = rand_matrix(&mut rng, c, r3);
        let mut got = tucker_reconstruct(&g, &x, &u, &v)?;
        if poisoned {
            got.data_mut()[0] += 1e-3;
        }
        let mut want = DenseTensor::zeros(vec![a, b, c])?;
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let mut acc = 0.0;
                    for p in 0..r1 {
                        for q in 0..r2 {
                            for s in 0..r3 {
                                acc += g.at3(p, q, s) * x.at(i, p) * u.at(j, q) * v.at(k, s);
                            }
                        }
                    }
                    want.set3(i, j, k, acc);
                }
            }
        }
        worst = worst.max(rel_frobenius_err(got.data(), want.data()));
    }
    Ok(CheckOutcome {
        name: "tucker-brute-force",
        tolerance: tol,
        observed: worst,
        passed: worst < tol,
    })
}

/// 20 random pairs: block-flattened reconstruction vs the direct product.
fn check_kronecker_as_tucker() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x04B0);
    let tol = 1e-10;
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let (p, q) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = rand_matrix(&mut rng, m, n);
        let b = rand_matrix(&mut rng, p, q);
        let (g, x, u, v) = kronecker_as_tucker(&a, &b);
        let w = tucker_reconstruct(&g, &x, &u, &v)?;
        let flat = flatten_blocks(&w, m, n)?;
        let want = kronecker(&a, &b);
        worst = worst.max(rel_frobenius_err(flat.data(), want.data()));
    }
    Ok(CheckOutcome {
        name: "kronecker-as-tucker",
        tolerance: tol,
        observed: worst,
        passed: worst < tol,
    })
}

fn check_fold_unfold() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0xF01D);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let shape = [
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        ];
        let t = rand_tensor(&mut rng, &shape);
        for mode in 1..=3 {
            let m = crate::tensor::unfold(&t, mode)?;
            let back = crate::tensor::fold(&m, mode, &shape)?;
            // Bit-exact: any difference is a failure.
            let diff = t
                .data()
                .iter()
                .zip(back.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
            worst = worst.max(diff as f64);
        }
    }
    Ok(CheckOutcome {
        name: "fold-unfold-roundtrip",
        tolerance: 0.5,
        observed: worst,
        passed: worst == 0.0,
    })
}

fn check_mode_identity() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x1DE4);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let shape = [
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        ];
        let t = rand_tensor(&mut rng, &shape);
        for mode in 1..=3 {
            let id = DenseMatrix::identity(shape[mode - 1]);
            let out = crate::tensor::mode_n_product(&t, &id, mode)?;
            let diff = t
                .data()
                .iter()
                .zip(out.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
            worst = worst.max(diff as f64);
        }
    }
    Ok(CheckOutcome {
        name: "mode-identity",
        tolerance: 0.5,
        observed: worst,
        passed: worst == 0.0,
    })
}

fn check_layout_roundtrip() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x1A70);
    let mut worst = 0.0_f64;
    for gated in [false, true] {
        for (layers, d) in [(1usize, 4usize), (2, 8), (4, 4)] {
            let layout = LayoutDescriptor::new(layers, d, gated)?;
            let params: Vec<LayerWeights> = (0..layers)
                .map(|_| LayerWeights {
                    wq: rand_matrix(&mut rng, d, d),
                    wk: rand_matrix(&mut rng, d, d),
                    wv: rand_matrix(&mut rng, d, d),
                    wo: rand_matrix(&mut rng, d, d),
                    win: rand_matrix(&mut rng, d, 4 * d),
                    wout: rand_matrix(&mut rng, 4 * d, d),
                    wgate: gated.then(|| rand_matrix(&mut rng, d, 4 * d)),
                })
                .collect();
            let w = concat_weights(&params, &layout)?;
            let back = split_weights(&w, &layout)?;
            if back != params {
                worst = 1.0;
            }
        }
    }
    Ok(CheckOutcome {
        name: "layout-roundtrip",
        tolerance: 0.5,
        observed: worst,
        passed: worst == 0.0,
    })
}

fn check_mask_semantics() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x3A5C);
    let mut worst = 0.0_f64;
    for n in [16usize, 64, 196] {
        let spec = mask_patches(n, 0.75, &mut rng)?;
        let want = (0.75 * n as f64).round() as usize;
        if spec.masked.len() != want {
            worst = worst.max(1.0);
        }
    }
    // Loss semantics: zero at identity, invariant to visible perturbation.
    let spec = MaskSpec {
        masked: vec![1, 3],
        ratio: 0.5,
        degenerate: false,
    };
    let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let zero = crate::pretrain::mae_loss(&target, &target, 4, &spec)?;
    worst = worst.max(zero.abs());
    let mut pred = target.clone();
    pred[0] += 100.0; // patch 0 is visible
    let a = crate::pretrain::mae_loss(&pred, &target, 4, &spec)?;
    if a.to_bits() != zero.to_bits() {
        worst = worst.max(1.0);
    }
    Ok(CheckOutcome {
        name: "mask-semantics",
        tolerance: 1e-12,
        observed: worst,
        passed: worst < 1e-12,
    })
}

/// Central finite differences through the full masked-reconstruction loss
/// on a toy model, all factor and direct parameters.
pub fn check_mae_gradients(
    layers: usize,
    heads: usize,
    head_dim: usize,
    image: usize,
    max_coords: Option<usize>,
) -> Result<CheckOutcome> {
    let cfg = ViTConfig::new(layers, heads, head_dim, 4, image, 1)?;
    let d = cfg.embed_dim;
    let ranks = (cfg.layout()?.slices_per_layer, d / 2, d / 2);
    let source = WeightSource::init_tucker(&cfg, ranks, 0xBEEF, 0.05)?;
    let mut train = TrainConfig::desk_default(10, 2, 0xBEEF, d);
    train.stochastic_scaling = false;
    let state = TrainState::new(cfg.clone(), train, source)?;

    let images = synth_dataset(0x10AD, 2, image)?;
    let patches = crate::data::patchify(&images, cfg.patch)?;
    let mut mask_rng = ChaCha12Rng::seed_from_u64(0x3A5D);
    let masks: Vec<MaskSpec> = (0..2)
        .map(|_| mask_patches(cfg.n_patches(), 0.75, &mut mask_rng))
        .collect::<Result<_>>()?;

    // Parameter set: factors plus direct params, as the tape names them.
    let mut params: BTreeMap<String, DenseTensor> = BTreeMap::new();
    if let WeightSource::Tucker { template, scalers } = &state.source {
        params.insert("factor/g".into(), template.g.clone());
        params.insert("factor/x".into(), DenseTensor::from_matrix(&scalers.x));
        params.insert("factor/u".into(), DenseTensor::from_matrix(&scalers.u));
        params.insert("factor/v".into(), DenseTensor::from_matrix(&scalers.v));
    }
    for (name, t) in state.direct.set.iter() {
        params.insert(format!("direct/{name}"), t.clone());
    }

    let cfg2 = cfg.clone();
    let build = move |tape: &mut Tape, p: &BTreeMap<String, DenseTensor>| {
        // Rebind the state parameters from `p` and rebuild the loss graph.
        let template = crate::template::Template {
            g: p["factor/g"].clone(),
        };
        let scalers = crate::template::Scalers {
            x: p["factor/x"].to_matrix()?,
            u: p["factor/u"].to_matrix()?,
            v: p["factor/v"].to_matrix()?,
        };
        let mut direct = crate::vit::DirectParams {
            set: crate::params::ParamSet::new(),
        };
        for (name, _t) in state.direct.set.iter() {
            direct.set.insert(name, p[&format!("direct/{name}")].clone())?;
        }
        let mut probe = TrainState::new(
            cfg2.clone(),
            state.train.clone(),
            WeightSource::Tucker { template, scalers },
        )?;
        probe.direct = direct;
        probe.build_loss(
            tape,
            &patches,
            &masks,
            &crate::template::WidthMask::full(cfg2.embed_dim),
            true,
        )
    };

    // Every coordinate must match finite differences to 1e-4 relative or
    // to the absolute resolution limit of the probe, whichever is larger;
    // the reported number is the worst ratio against that bound.
    let report = grad_check_detailed(build, &params, 1e-5, max_coords, 1e-4, 1e-8)?;
    Ok(CheckOutcome {
        name: "gradcheck-mae-toy",
        tolerance: 1.0,
        observed: report.max_excess,
        passed: report.max_excess < 1.0,
    })
}

/// Runs every check (or lists them) with an optional injected fault.
pub fn run_checks(poison: &Option<String>) -> Result<Vec<CheckOutcome>> {
    if let Some(p) = poison {
        if p != "tucker" {
            return Err(SweetError::Usage(format!(
                "unknown poison target {p}; supported: tucker"
            )));
        }
    }
    let poisoned = poison.as_deref() == Some("tucker");
    Ok(vec![
        check_tucker(poisoned)?,
        check_kronecker_as_tucker()?,
        check_fold_unfold()?,
        check_mode_identity()?,
        check_layout_roundtrip()?,
        check_mask_semantics()?,
        // Small toy instance with a sampled coordinate subset keeps the
        // command quick; the acceptance suite runs the full sweep.
        check_mae_gradients(1, 2, 4, 8, Some(24))?,
    ])
}

pub fn cmd_verify(poison: &Option<String>, list: bool) -> Result<()> {
    if list {
        for name in CHECK_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    let outcomes = run_checks(poison)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "{} {:<22} tolerance {:.1e}  observed {:.3e}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.tolerance,
            o.observed
        );
        if !o.passed {
            failed.push(o.name);
        }
    }
    if !failed.is_empty() {
        return Err(SweetError::Numeric(format!(
            "verification failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_all() {
        let outcomes = run_checks(&None).unwrap();
        assert_eq!(outcomes.len(), CHECK_NAMES.len());
        for o in &outcomes {
            assert!(o.passed, "{} failed: {}", o.name, o.observed);
        }
    }

    #[test]
    fn poison_fails_exactly_tucker() {
        let outcomes = run_checks(&Some("tucker".into())).unwrap();
        for o in &outcomes {
            if o.name == "tucker-brute-force" {
                assert!(!o.passed);
            } else {
                assert!(o.passed, "{} unexpectedly failed", o.name);
            }
        }
    }

    #[test]
    fn unknown_poison_is_usage_error() {
        assert!(matches!(
            run_checks(&Some("softmax".into())),
            Err(SweetError::Usage(_))
        ));
    }
}
