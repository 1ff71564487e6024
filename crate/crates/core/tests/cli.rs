use std::fs;
use std::path::Path;

use clap::Parser;

use cpc_align::cli::{run, Cli, RunConfig};
use cpc_align::datamodel::load_manifest;
use cpc_align::nets::load_checkpoint;
use cpc_align::Error;

fn invoke(args: &[&str]) -> cpc_align::Result<()> {
    let mut argv = vec!["cpc-align"];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv).expect("argv parses"))
}

fn synth_small(out: &Path, seed: &str) {
    invoke(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        seed,
        "--n-pairs",
        "36",
    ])
    .unwrap();
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "3");
    let manifest = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.records.len(), 36);
    for rec in &manifest.records {
        assert!(manifest.resolve(&rec.wl_path).exists());
        assert!(manifest.resolve(&rec.nbi_path).exists());
    }
}

#[test]
fn synth_is_byte_identical_across_reruns() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    synth_small(d1.path(), "9");
    synth_small(d2.path(), "9");
    let m1 = fs::read(d1.path().join("manifest.jsonl")).unwrap();
    let m2 = fs::read(d2.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m1, m2);
    let img1 = fs::read(d1.path().join("wl/pair_00000.png")).unwrap();
    let img2 = fs::read(d2.path().join("wl/pair_00000.png")).unwrap();
    assert_eq!(img1, img2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.out = dir.path().join("from_config");
    cfg.synth.n_pairs = 10;
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    // Config alone.
    invoke(&["synth", "--config", cfg_path.to_str().unwrap()]).unwrap();
    let m = load_manifest(&cfg.out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 10);

    // Flag beats config.
    let flag_out = dir.path().join("from_flag");
    invoke(&[
        "synth",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        flag_out.to_str().unwrap(),
        "--n-pairs",
        "12",
    ])
    .unwrap();
    let m = load_manifest(&flag_out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 12);
}

#[test]
fn unknown_keys_in_the_config_file_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, r#"{"no_such_knob": 1}"#).unwrap();
    assert!(matches!(
        invoke(&["synth", "--config", cfg_path.to_str().unwrap()]),
        Err(Error::Config(_))
    ));
}

#[test]
fn unknown_flags_fail_to_parse() {
    assert!(Cli::try_parse_from(["cpc-align", "synth", "--no-such-flag"]).is_err());
    assert!(Cli::try_parse_from(["cpc-align", "no-such-subcommand"]).is_err());
}

#[test]
fn malformed_weights_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "1");
    let err = invoke(&[
        "pretrain-teacher",
        "--manifest",
        dir.path().join("manifest.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--weights",
        "1,1",
    ]);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn training_subcommands_require_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        invoke(&[
            "pretrain-unaligned",
            "--out",
            dir.path().join("run").to_str().unwrap(),
        ]),
        Err(Error::Config(_))
    ));
}

#[test]
fn full_pipeline_sequence_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    synth_small(&data, "5");
    let manifest = data.join("manifest.jsonl");
    let m = manifest.to_str().unwrap();
    let out = run_dir.to_str().unwrap();
    let base: &[&str] = &[
        "--manifest", m, "--out", out, "--k", "2", "--fold", "0", "--seed", "5", "--epochs", "1",
    ];
    fn with<'a>(head: &[&'a str], base: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
        let mut v: Vec<&str> = head.to_vec();
        v.extend_from_slice(base);
        v.extend_from_slice(tail);
        v
    }

    invoke(&with(&["pretrain-teacher"], base, &[])).unwrap();
    invoke(&with(&["pretrain-unaligned"], base, &[])).unwrap();
    let teacher = run_dir.join("checkpoints/teacher_fold0.ckpt");
    let unaligned = run_dir.join("checkpoints/unaligned_fold0.ckpt");
    assert!(teacher.exists() && unaligned.exists());
    assert!(run_dir.join("logs/pretrain_teacher_fold0.csv").exists());
    assert!(run_dir.join("fold_plan.json").exists());

    invoke(&with(
        &["align"],
        base,
        &[
            "--teacher",
            teacher.to_str().unwrap(),
            "--unaligned",
            unaligned.to_str().unwrap(),
        ],
    ))
    .unwrap();
    let aligned = run_dir.join("checkpoints/aligned_fold0.ckpt");
    assert!(aligned.exists());
    assert!(run_dir.join("logs/align_fold0.csv").exists());

    invoke(&with(&["eval"], base, &["--ckpt", aligned.to_str().unwrap()])).unwrap();
    let eval_json = run_dir.join("reports/eval_fold0.json");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&eval_json).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["n_valid"].as_u64().unwrap(), 18);

    invoke(&with(
        &["viz"],
        base,
        &["--ckpt", aligned.to_str().unwrap(), "--n-samples", "2"],
    ))
    .unwrap();
    assert!(run_dir.join("viz/feature_grid.png").exists());

    invoke(&with(
        &["bench"],
        base,
        &["--ckpt", aligned.to_str().unwrap(), "--n-images", "30", "--warmup", "1"],
    ))
    .unwrap();

    // The aligned checkpoint carries every branch for later inspection.
    let ckpt = load_checkpoint(&aligned).unwrap();
    for prefix in ["student", "f1", "d", "teacher", "unaligned", "f2"] {
        assert!(ckpt.has_prefix(prefix), "missing {prefix}");
    }
}

#[test]
fn rerunning_a_stage_reproduces_identical_logs_and_fold_plans() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, "6");
    let m = data.join("manifest.jsonl");

    let run_once = |out: &Path| {
        invoke(&[
            "pretrain-unaligned",
            "--manifest",
            m.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--k",
            "2",
            "--seed",
            "6",
            "--epochs",
            "2",
        ])
        .unwrap();
    };
    let o1 = dir.path().join("r1");
    let o2 = dir.path().join("r2");
    run_once(&o1);
    run_once(&o2);
    for rel in ["fold_plan.json", "logs/pretrain_unaligned_fold0.csv"] {
        let a = fs::read(o1.join(rel)).unwrap();
        let b = fs::read(o2.join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between reruns");
    }
    let c1 = fs::read(o1.join("checkpoints/unaligned_fold0.ckpt")).unwrap();
    let c2 = fs::read(o2.join("checkpoints/unaligned_fold0.ckpt")).unwrap();
    assert_eq!(c1, c2);
}

#[test]
fn cv_writes_table_and_json_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, "7");
    let out = dir.path().join("cv");
    invoke(&[
        "cv",
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--k",
        "2",
        "--seed",
        "7",
        "--epochs",
        "1",
    ])
    .unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("reports/report.json")).unwrap())
            .unwrap();
    assert_eq!(json["folds"].as_array().unwrap().len(), 2);
    assert_eq!(json["method"].as_str().unwrap(), "full");
    let table = fs::read_to_string(out.join("reports/report.txt")).unwrap();
    assert!(table.contains("FOLD1") && table.contains("Mean"));
}
