//! End-to-end command-line workflows driven through the binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sweet")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("sweet_cli_it");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().unwrap()
}

/// Tiny template checkpoint shared by the init/eval/export tests.
fn small_template() -> PathBuf {
    let out = tmp("tpl.swt");
    if !out.exists() {
        let st = run(&[
            "pretrain",
            "--synth",
            "16",
            "--steps",
            "8",
            "--batch",
            "4",
            "--depth",
            "2",
            "--heads",
            "2",
            "--head-dim",
            "8",
            "--image-size",
            "16",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(st.status.success(), "{st:?}");
    }
    out
}

#[test]
fn pretrain_zero_steps_writes_initial_state() {
    let out = tmp("zero.swt");
    let st = run(&[
        "pretrain",
        "--synth",
        "8",
        "--steps",
        "0",
        "--batch",
        "4",
        "--depth",
        "1",
        "--heads",
        "2",
        "--head-dim",
        "4",
        "--image-size",
        "16",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{st:?}");
    let ck = sweet::checkpoint::Checkpoint::load(&out).unwrap();
    assert_eq!(ck.kind, sweet::checkpoint::CheckpointKind::Template);
    assert!(ck.tensors.contains("template/g"));
    // The log exists and holds only header lines.
    let log = std::fs::read_to_string(out.with_extension("log")).unwrap();
    assert!(log.lines().all(|l| l.starts_with('#')));
}

#[test]
fn seed_env_fallback_matches_flag() {
    let a = tmp("env_a.swt");
    let b = tmp("env_b.swt");
    let common = |out: &Path| {
        vec![
            "pretrain".to_string(),
            "--synth".into(),
            "8".into(),
            "--steps".into(),
            "4".into(),
            "--batch".into(),
            "4".into(),
            "--depth".into(),
            "1".into(),
            "--heads".into(),
            "2".into(),
            "--head-dim".into(),
            "4".into(),
            "--image-size".into(),
            "16".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let mut args_a = common(&a);
    args_a.extend(["--seed".to_string(), "77".to_string()]);
    let st = Command::new(bin()).args(&args_a).output().unwrap();
    assert!(st.status.success());
    let st = Command::new(bin())
        .args(common(&b))
        .env("SWEET_SEED", "77")
        .output()
        .unwrap();
    assert!(st.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn init_inherit_and_adapt_alias() {
    let tpl = small_template();
    let out1 = tmp("m_inherit.swt");
    let st = run(&[
        "init",
        "--template",
        tpl.to_str().unwrap(),
        "--depth",
        "1",
        "--heads",
        "1",
        "--mode",
        "inherit",
        "--seed",
        "3",
        "--out",
        out1.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{st:?}");
    let report = String::from_utf8(st.stdout).unwrap();
    assert!(report.contains("mode=inherit"));
    assert!(report.contains("scaler_params="));

    // adapt with a zero budget degenerates to inherit.
    let out2 = tmp("m_adapt0.swt");
    let st = run(&[
        "adapt",
        "--template",
        tpl.to_str().unwrap(),
        "--depth",
        "1",
        "--heads",
        "1",
        "--adapt-steps",
        "0",
        "--seed",
        "3",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{st:?}");
    let m1 = sweet::init_adapt::import_model(
        &sweet::checkpoint::Checkpoint::load(&out1).unwrap(),
    )
    .unwrap();
    let m2 = sweet::init_adapt::import_model(
        &sweet::checkpoint::Checkpoint::load(&out2).unwrap(),
    )
    .unwrap();
    assert_eq!(m1.theta, m2.theta);
}

#[test]
fn init_at_source_size_reproduces_realized_weights() {
    let tpl = small_template();
    let out = tmp("m_same.swt");
    let st = run(&[
        "init",
        "--template",
        tpl.to_str().unwrap(),
        "--depth",
        "2",
        "--heads",
        "2",
        "--mode",
        "inherit",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{st:?}");
    // Realized weights equal the reconstruction from the stored factors.
    let ck = sweet::checkpoint::Checkpoint::load(&tpl).unwrap();
    let (t, s, _) = sweet::init_adapt::import_template(&ck).unwrap();
    let layout = ck.config.layout().unwrap();
    let w = sweet::template::reconstruct(&t, &s, &layout).unwrap();
    let theta = sweet::template::split_weights(&w, &layout).unwrap();
    let model = sweet::init_adapt::import_model(
        &sweet::checkpoint::Checkpoint::load(&out).unwrap(),
    )
    .unwrap();
    for (got, want) in model.theta.iter().zip(&theta) {
        for (gm, wm) in [(&got.wq, &want.wq), (&got.win, &want.win)] {
            for (a, b) in gm.data().iter().zip(wm.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }
}

#[test]
fn eval_grid_shape_and_determinism() {
    let tpl = small_template();
    let out1 = tmp("table1.tsv");
    let out2 = tmp("table2.tsv");
    let args = |out: &Path| {
        vec![
            "eval".to_string(),
            "--template".into(),
            tpl.display().to_string(),
            "--strategies".into(),
            "sweet-inherit,random".into(),
            "--seeds".into(),
            "3".into(),
            "--budget".into(),
            "6".into(),
            "--depth".into(),
            "1".into(),
            "--heads".into(),
            "1".into(),
            "--seed".into(),
            "11".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let st = Command::new(bin()).args(args(&out1)).output().unwrap();
    assert!(st.status.success(), "{st:?}");
    let st = Command::new(bin()).args(args(&out2)).output().unwrap();
    assert!(st.status.success(), "{st:?}");
    let t1 = std::fs::read_to_string(&out1).unwrap();
    assert_eq!(t1, std::fs::read_to_string(&out2).unwrap());
    // 2 strategies x 3 seeds = 6 run rows, plus one summary per strategy.
    let runs = t1
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .count();
    assert_eq!(runs, 6);
    let summaries = t1
        .lines()
        .skip_while(|l| !l.starts_with("# summary"))
        .skip(2)
        .filter(|l| !l.is_empty())
        .count();
    assert_eq!(summaries, 2);
}

#[test]
fn eval_unknown_strategy_is_usage_error() {
    let tpl = small_template();
    let st = run(&[
        "eval",
        "--template",
        tpl.to_str().unwrap(),
        "--strategies",
        "definitely-wrong",
        "--seeds",
        "3",
        "--budget",
        "2",
    ]);
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn eval_few_seeds_warns_and_flags() {
    let tpl = small_template();
    let st = run(&[
        "eval",
        "--template",
        tpl.to_str().unwrap(),
        "--strategies",
        "sweet-inherit,random",
        "--seeds",
        "1",
        "--budget",
        "2",
        "--depth",
        "1",
        "--heads",
        "1",
        "--seed",
        "2",
    ]);
    assert!(st.status.success(), "{st:?}");
    assert!(String::from_utf8(st.stderr).unwrap().contains("3 seeds"));
    assert!(String::from_utf8(st.stdout).unwrap().contains("LOW_SEEDS"));
}

#[test]
fn verify_passes_and_lists() {
    let st = run(&["verify", "--list"]);
    assert!(st.status.success());
    let names = String::from_utf8(st.stdout).unwrap();
    assert!(names.contains("tucker-brute-force"));
    let st = run(&["verify"]);
    assert!(st.status.success(), "{st:?}");
    let out = String::from_utf8(st.stdout).unwrap();
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 7);
}

#[test]
fn export_images_writes_triple_rows() {
    let tpl = small_template();
    let out = tmp("recon.swtd");
    let st = run(&[
        "export-images",
        "--checkpoint",
        tpl.to_str().unwrap(),
        "--count",
        "3",
        "--seed",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "{st:?}");
    let mut reader = sweet::data::RawDatasetReader::open(&out).unwrap();
    assert_eq!(reader.count, 9); // original, masked, reconstruction per input
    let batch = reader.next_batch(9).unwrap().unwrap();
    assert!(batch.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn config_file_supplies_seed() {
    let conf = tmp("run.conf");
    std::fs::write(&conf, "seed=55\n").unwrap();
    let a = tmp("conf_a.swt");
    let b = tmp("conf_b.swt");
    for (out, extra) in [(&a, Some(&conf)), (&b, None)] {
        let mut args = vec![
            "pretrain".to_string(),
            "--synth".into(),
            "8".into(),
            "--steps".into(),
            "3".into(),
            "--batch".into(),
            "4".into(),
            "--depth".into(),
            "1".into(),
            "--heads".into(),
            "2".into(),
            "--head-dim".into(),
            "4".into(),
            "--image-size".into(),
            "16".into(),
            "--out".into(),
            out.display().to_string(),
        ];
        match extra {
            Some(c) => args.extend(["--config".to_string(), c.display().to_string()]),
            None => args.extend(["--seed".to_string(), "55".to_string()]),
        }
        let st = Command::new(bin()).args(&args).output().unwrap();
        assert!(st.status.success(), "{st:?}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
