//! End-to-end tests of the `decloud` binary: exit codes, determinism, and
//! the gen-data -> train -> sample -> eval pipeline on a tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_decloud"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn gen(dir: &Path, name: &str, seed: u64, n: usize, hw: usize) -> PathBuf {
    let base = dir.join(name);
    let out = run(&[
        "gen-data",
        "--out",
        base.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--n",
        &n.to_string(),
        "--hw",
        &hw.to_string(),
        "--N",
        "2",
        "--channels",
        "3",
    ]);
    assert_ok(&out);
    base.with_extension("json")
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", 7, 5, 16);
    let b = gen(dir.path(), "b", 7, 5, 16);
    let read = |p: &Path| {
        (
            fs::read(p.with_extension("bin")).unwrap(),
            fs::read_to_string(p).unwrap(),
        )
    };
    let (bin_a, man_a) = read(&a);
    let (bin_b, man_b) = read(&b);
    assert_eq!(bin_a, bin_b);
    // manifests differ only in the blob file name
    assert_eq!(man_a.replace("a.bin", "X"), man_b.replace("b.bin", "X"));
    let manifest: serde_json::Value = serde_json::from_str(&man_a).unwrap();
    assert_eq!(manifest["count"], 5);
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 5);
}

#[test]
fn gen_data_rejects_bad_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--seed",
        "1",
        "--n",
        "2",
        "--hw",
        "30",
    ]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("multiple of 8"), "stderr: {err}");
}

fn write_config(
    dir: &Path,
    train_ds: &Path,
    out_dir: &Path,
    max_steps: usize,
    name: &str,
) -> PathBuf {
    let cfg = serde_json::json!({
        "version": 1,
        "model": {
            "width": 4,
            "in_channels": 3,
            "n_temporal": 2
        },
        "train": {
            "lr": 1e-3,
            "batch_size": 2,
            "t_max": 50,
            "seed": 11,
            "max_steps": max_steps
        },
        "schedule": { "kind": "sigmoid", "t_max": 50 },
        "sampler": { "steps": 1, "seed": 0, "use_ema": true },
        "data": { "train": train_ds },
        "output_dir": out_dir,
        "checkpoint_every": 5,
        "log_every": 1
    });
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_losses(log: &Path) -> Vec<(u64, f64)> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["step"].as_u64().unwrap(), v["loss"].as_f64().unwrap())
        })
        .collect()
}

// One flow exercises train / resume / sample / eval so the tiny training
// cost is paid once.
#[test]
fn train_resume_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), "train", 3, 6, 16);

    // straight run to 10 steps
    let out_a = dir.path().join("run_a");
    let cfg_a = write_config(dir.path(), &ds, &out_a, 10, "a.json");
    assert_ok(&run(&["train", "--config", cfg_a.to_str().unwrap()]));
    let losses_a = read_losses(&out_a.join("train_log.jsonl"));
    assert_eq!(losses_a.len(), 10);
    assert!(out_a.join("ckpt_0000005.json").exists());
    assert!(out_a.join("ckpt_0000010.json").exists());

    // interrupted at 5, then resumed to 10: identical loss sequence
    let out_b = dir.path().join("run_b");
    let cfg_b5 = write_config(dir.path(), &ds, &out_b, 5, "b5.json");
    assert_ok(&run(&["train", "--config", cfg_b5.to_str().unwrap()]));
    let cfg_b10 = write_config(dir.path(), &ds, &out_b, 10, "b10.json");
    let resume = out_b.join("ckpt_0000005.json");
    assert_ok(&run(&[
        "train",
        "--config",
        cfg_b10.to_str().unwrap(),
        "--resume",
        resume.to_str().unwrap(),
    ]));
    let losses_b = read_losses(&out_b.join("train_log.jsonl"));
    assert_eq!(losses_a, losses_b, "resume must replay the loss sequence");

    // sampling: steps=1 and steps=4 emit full outputs; wall time grows
    let ckpt = out_a.join("ckpt_0000010.json");
    let s1 = dir.path().join("s1");
    let s4 = dir.path().join("s4");
    assert_ok(&run(&[
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--steps",
        "1",
        "--out",
        s1.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--steps",
        "4",
        "--out",
        s4.to_str().unwrap(),
    ]));
    for i in 0..6 {
        assert!(s1.join(format!("s{:05}.png", i)).exists());
    }
    let timing = |p: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(p.join("timing.json")).unwrap()).unwrap()
    };
    let (t1, t4) = (timing(&s1), timing(&s4));
    assert_eq!(t1["steps"], 1);
    assert_eq!(t4["steps"], 4);
    assert!(
        t4["wall_ms_total"].as_u64().unwrap() > t1["wall_ms_total"].as_u64().unwrap(),
        "wall clock must grow with step count: {t1} vs {t4}"
    );

    // fixed seed reproduces identical bytes (PNG and container)
    let s1b = dir.path().join("s1b");
    assert_ok(&run(&[
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--steps",
        "1",
        "--out",
        s1b.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(s1.join("s00000.png")).unwrap(),
        fs::read(s1b.join("s00000.png")).unwrap()
    );
    assert_eq!(
        fs::read(s1.join("pred.bin")).unwrap(),
        fs::read(s1b.join("pred.bin")).unwrap()
    );

    // eval: report parses and carries one row per sample
    let report_path = dir.path().join("report.json");
    assert_ok(&run(&[
        "eval",
        "--pred",
        s1.join("pred.json").to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["count"], 6);
    assert!(report["mean_psnr_db"].as_f64().unwrap() > 0.0);
    assert_eq!(report["per_sample"].as_array().unwrap().len(), 6);
}

#[test]
fn train_missing_dataset_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        Path::new("/nonexistent/ds.json"),
        &out_dir,
        5,
        "cfg.json",
    );
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("not found"),
        "stderr should name the missing path"
    );
    assert!(!out_dir.exists(), "no output may be created on config errors");
}

#[test]
fn eval_identity_and_missing_ids() {
    use decloud_core::data::container::save_store;
    use decloud_core::data::load_dataset;

    let dir = tempfile::tempdir().unwrap();
    let ds_path = gen(dir.path(), "ds", 5, 3, 16);
    let ds = load_dataset(&ds_path).unwrap();

    // identity predictions: infinite PSNR serializes as null, ssim is 1
    let tensors: Vec<(String, decloud_core::numerics::Tensor<f32>)> = ds
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.y0.clone()))
        .collect();
    let pred = dir.path().join("ident");
    save_store(&pred, &tensors, Default::default()).unwrap();
    let report_path = dir.path().join("ident_report.json");
    assert_ok(&run(&[
        "eval",
        "--pred",
        pred.with_extension("json").to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["mean_psnr_db"].is_null());
    assert_eq!(report["exact_matches"], 3);
    assert!((report["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    // shuffled prediction order: identical report (id-keyed join)
    let mut reversed = tensors.clone();
    reversed.reverse();
    let pred_rev = dir.path().join("ident_rev");
    save_store(&pred_rev, &reversed, Default::default()).unwrap();
    let report_rev = dir.path().join("ident_rev_report.json");
    assert_ok(&run(&[
        "eval",
        "--pred",
        pred_rev.with_extension("json").to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--out",
        report_rev.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read_to_string(&report_path).unwrap(),
        fs::read_to_string(&report_rev).unwrap()
    );

    // a prediction with an unknown id is rejected, naming the id
    let mut extra = tensors.clone();
    extra.push(("ghost".to_string(), ds.samples[0].y0.clone()));
    let pred_bad = dir.path().join("bad");
    save_store(&pred_bad, &extra, Default::default()).unwrap();
    let out = run(&[
        "eval",
        "--pred",
        pred_bad.with_extension("json").to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}

#[test]
fn count_matches_hand_config_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let model_cfg = serde_json::json!({
        "width": 2,
        "in_channels": 1,
        "n_temporal": 1
    });
    let cfg_path = dir.path().join("model.json");
    fs::write(&cfg_path, model_cfg.to_string()).unwrap();
    let out = run(&["count", "--config", cfg_path.to_str().unwrap(), "--hw", "8"]);
    assert_ok(&out);
    let v: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(v["params"], 14_499);
    assert_eq!(v["macs"], 39_534);

    // doubling width roughly quadruples parameters
    let params_at = |w: u64| -> f64 {
        let cfg = serde_json::json!({"width": w, "in_channels": 3, "n_temporal": 3});
        let p = dir.path().join(format!("w{w}.json"));
        fs::write(&p, cfg.to_string()).unwrap();
        let out = run(&["count", "--config", p.to_str().unwrap(), "--hw", "32"]);
        assert_ok(&out);
        let v: serde_json::Value =
            serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
        v["params"].as_f64().unwrap()
    };
    let ratio = params_at(32) / params_at(16);
    assert!((3.5..=4.5).contains(&ratio), "width scaling ratio {ratio}");
}

#[test]
fn self_check_passes() {
    let out = run(&["check"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("all self-checks passed"));
}

#[test]
fn out_dir_env_redirects_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-data", "--out", "sub/ds", "--seed", "1", "--n", "1", "--hw", "16", "--N", "1"])
        .env("DECLOUD_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(dir.path().join("sub/ds.json").exists());
    assert!(dir.path().join("sub/ds.bin").exists());
}
