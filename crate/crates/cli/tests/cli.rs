use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fewlora(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewlora")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny dataset plus a one-layer checkpoint.
fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let gen = fewlora(&["gen", "--out", "ds", "--images-per-class", "8", "--pretrain-images-per-combo", "2"], dir.path());
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    fs::write(
        dir.path().join("p.json"),
        r#"{"model":{"depth":1,"width":16,"heads":2,"embed_dim":8},"pretrain":{"epochs":1}}"#,
    )
    .unwrap();
    let pre = fewlora(&["pretrain", "--dataset", "ds", "--out", "ck", "--config", "p.json"], dir.path());
    assert_eq!(code(&pre), 0, "{}", stderr(&pre));
    dir
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fewlora(&["--help"], dir.path())), 0);
    assert_eq!(code(&fewlora(&["--version"], dir.path())), 0);
    assert_eq!(code(&fewlora(&["finetune", "--help"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fewlora(&[], dir.path())), 1);
    assert_eq!(code(&fewlora(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&fewlora(&["gen"], dir.path())), 1);
    assert_eq!(code(&fewlora(&["gen", "--out", "x", "--seed", "minus-one"], dir.path())), 1);
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    assert_eq!(code(&fewlora(&["gen", "--out", "x", "--config", "bad.json"], dir.path())), 1);
    fs::write(dir.path().join("typo.json"), r#"{"images_per_clas": 3}"#).unwrap();
    let out = fewlora(&["gen", "--out", "x", "--config", "typo.json"], dir.path());
    assert_eq!(code(&out), 1, "unknown config keys are rejected: {}", stderr(&out));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = fewlora(&["zeroshot", "--checkpoint", "missing", "--dataset", "also-missing"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));
    assert_eq!(code(&fewlora(&["report", "nothing.csv"], dir.path())), 2);
    fs::write(dir.path().join("junk.csv"), "method,config\nlora\n").unwrap();
    assert_eq!(code(&fewlora(&["report", "junk.csv"], dir.path())), 2);
}

#[test]
fn gen_writes_the_dataset_layout_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"seed": 5, "images_per_class": 4}"#).unwrap();
    let out = fewlora(&["gen", "--out", "ds", "--config", "spec.json", "--seed", "9"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = dir.path().join("ds");
    for f in ["manifest.json", "images.bin", "labels.csv", "captions.txt"] {
        assert!(ds.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ds.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pool_images"], 32);
    let text = fs::read_to_string(ds.join("manifest.json")).unwrap();
    assert!(text.contains("\"seed\": 9"), "flag wins over config file");
    let pixels = fs::metadata(ds.join("images.bin")).unwrap().len();
    assert_eq!(pixels, manifest["num_images"].as_u64().unwrap() * 256 * 4);
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&fewlora(&["gen", "--out", out, "--images-per-class", "4"], dir.path())), 0);
    }
    for f in ["manifest.json", "images.bin", "labels.csv", "captions.txt"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn full_pipeline_runs_every_subcommand() {
    let dir = setup();
    let p = dir.path();
    assert!(p.join("ck/pretrain_log.csv").is_file());
    assert!(p.join("ck/vocab.json").is_file());

    let zs = fewlora(&["zeroshot", "--checkpoint", "ck", "--dataset", "ds", "--seeds", "0,1", "--out", "zs.csv"], p);
    assert_eq!(code(&zs), 0, "{}", stderr(&zs));
    let zs_csv = fs::read_to_string(p.join("zs.csv")).unwrap();
    assert!(zs_csv.starts_with("method,config,shots,seed,zs_acc,acc,trainable,total,iters,seconds\n"));
    assert_eq!(zs_csv.lines().count(), 4, "header, two seeds, mean");

    let ft = fewlora(
        &["finetune", "--checkpoint", "ck", "--dataset", "ds", "--iterations", "4", "--seeds", "0", "--out", "ft", "--no-timing"],
        p,
    );
    assert_eq!(code(&ft), 0, "{}", stderr(&ft));
    let runs = fs::read_to_string(p.join("ft/runs.csv")).unwrap();
    assert!(runs.lines().nth(1).unwrap().starts_with("lora,qkv/all/both/r2,4,0,"));
    assert!(p.join("ft/history_lora_seed0.csv").is_file());
    assert!(p.join("ft/lora_seed0/manifest.json").is_file());
    assert!(p.join("ft/merged_seed0/weights.bin").is_file());

    let bias = fewlora(
        &["finetune", "--checkpoint", "ck", "--dataset", "ds", "--method", "bias-only", "--iterations", "2", "--seeds", "0", "--out", "bias"],
        p,
    );
    assert_eq!(code(&bias), 0, "{}", stderr(&bias));

    let ab = fewlora(
        &["ablate", "--checkpoint", "ck", "--dataset", "ds", "--groups", "q,v", "--ranks", "1", "--seeds", "0", "--iterations", "2", "--out", "ab.csv"],
        p,
    );
    assert_eq!(code(&ab), 0, "{}", stderr(&ab));
    let ab_csv = fs::read_to_string(p.join("ab.csv")).unwrap();
    assert!(ab_csv.starts_with("method,config,shots,seed,zs_acc,acc,trainable,total,iters,seconds,group,rank,span,encoders\n"));
    assert_eq!(ab_csv.lines().count(), 3);

    let rep = fewlora(&["report", "zs.csv", "ft/runs.csv", "bias/runs.csv", "ab.csv", "--json", "table.json"], p);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    let table = String::from_utf8(rep.stdout).unwrap();
    for m in ["zero-shot", "lora", "bias-only"] {
        assert!(table.contains(m), "{m} missing from\n{table}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("table.json")).unwrap()).unwrap();
    assert!(json["rows"].is_array());
}

#[test]
fn finetune_flag_validation_is_a_usage_error() {
    let dir = setup();
    let p = dir.path();
    for args in [
        &["--rank", "0"][..],
        &["--span", "middle"][..],
        &["--matrices", "qz"][..],
        &["--method", "dreambooth"][..],
        &["--dropout", "1.5"][..],
    ] {
        let mut full = vec!["finetune", "--checkpoint", "ck", "--dataset", "ds", "--iterations", "1"];
        full.extend_from_slice(args);
        let out = fewlora(&full, p);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn ablation_without_timing_is_byte_identical() {
    let dir = setup();
    let p = dir.path();
    let args = |out: &'static str| {
        vec!["ablate", "--checkpoint", "ck", "--dataset", "ds", "--groups", "q,qk", "--ranks", "1,2", "--seeds", "0", "--iterations", "2", "--out", out]
    };
    assert_eq!(code(&fewlora(&args("a.csv"), p)), 0);
    assert_eq!(code(&fewlora(&[args("b.csv"), vec!["--jobs", "2"]].concat(), p)), 0);
    assert_eq!(fs::read(p.join("a.csv")).unwrap(), fs::read(p.join("b.csv")).unwrap());
}
