//! Command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use decloud_core::data::container::{load_store, save_store};
use decloud_core::data::{gen_synthetic, load_dataset, save_dataset};
use decloud_core::error::{Error, Result};
use decloud_core::metrics::{psnr, ssim, SampleMetrics};
use decloud_core::model::{count::efficiency_report, Model, ModelConfig, SPATIAL_DIVISOR};
use decloud_core::numerics::Tensor;
use decloud_core::sampler::{sample, SamplerConfig};
use decloud_core::training::{load_checkpoint, run_training, save_checkpoint, TrainState};

use crate::config::{resolve_out, RunConfig};
use crate::png::write_png;

pub fn cmd_gen_data(
    out: &Path,
    seed: u64,
    n: usize,
    hw: usize,
    n_temporal: usize,
    channels: usize,
    split: &str,
) -> Result<()> {
    if hw == 0 || hw % SPATIAL_DIVISOR != 0 {
        return Err(Error::InvalidConfig(format!(
            "--hw must be a positive multiple of {SPATIAL_DIVISOR} (got {hw})"
        )));
    }
    let out = resolve_out(out);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let ds = gen_synthetic(seed, n, hw, hw, n_temporal, channels)?.with_split(split);
    save_dataset(&ds, &out)?;
    println!(
        "wrote {} samples ({}x{}, N={}, C={}) to {}",
        n,
        hw,
        hw,
        n_temporal,
        channels,
        out.display()
    );
    Ok(())
}

pub fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let out_dir = resolve_out(&cfg.output_dir);
    let dataset = load_dataset(&cfg.data.train)?;
    let model = Model::new(cfg.model.clone())?;
    decloud_core::training::check_dataset_compat(&model, &dataset)?;
    let schedule = cfg.schedule.build()?;

    let mut state = match resume {
        Some(ckpt_path) => {
            let ck = load_checkpoint(ckpt_path)?;
            if ck.model_config != cfg.model {
                return Err(Error::InvalidConfig(
                    "checkpoint model config differs from the run config".into(),
                ));
            }
            if ck.schedule != cfg.schedule {
                return Err(Error::InvalidConfig(
                    "checkpoint schedule differs from the run config".into(),
                ));
            }
            // resuming may extend max_steps; every other knob must match
            let mut ck_train = ck.train_config.clone();
            ck_train.max_steps = cfg.train.max_steps;
            if ck_train != cfg.train {
                return Err(Error::InvalidConfig(
                    "checkpoint train config differs from the run config".into(),
                ));
            }
            ck.state
        }
        None => TrainState::<f32>::new(&model, &cfg.train)?,
    };

    if state.step as usize >= cfg.train.max_steps {
        println!("nothing to do: checkpoint already at step {}", state.step);
        return Ok(());
    }
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    // train in chunks so a checkpoint lands every `checkpoint_every` steps;
    // an abort (non-finite loss) leaves the last good checkpoint on disk
    let log_every = cfg.log_every as u64;
    let max_steps = cfg.train.max_steps;
    while (state.step as usize) < max_steps {
        let done = state.step as usize;
        let until_ckpt = cfg.checkpoint_every - done % cfg.checkpoint_every;
        let chunk = until_ckpt.min(max_steps - done);
        run_training(
            &model,
            &schedule,
            &cfg.train,
            &dataset,
            &mut state,
            chunk,
            |record| {
                if record.step % log_every == 0 || record.step as usize == max_steps {
                    let line = serde_json::to_string(record)?;
                    writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                }
                Ok(())
            },
        )?;
        let base = out_dir.join(format!("ckpt_{:07}", state.step));
        save_checkpoint(&base, &model, &cfg.train, &cfg.schedule, &state)?;
    }
    let final_base = out_dir.join(format!("ckpt_{:07}", state.step));
    println!(
        "trained to step {}; final checkpoint {}",
        state.step,
        final_base.with_extension("json").display()
    );
    Ok(())
}

pub fn cmd_sample(
    checkpoint: &Path,
    dataset_path: &Path,
    steps: usize,
    out: &Path,
    seed: u64,
    use_ema: bool,
    limit: Option<usize>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let model = Model::new(ck.model_config.clone())?;
    let schedule = ck.schedule.build()?;
    let dataset = load_dataset(dataset_path)?;
    decloud_core::training::check_dataset_compat(&model, &dataset)?;
    let target = ck.train_config.target;
    let params = ck.state.inference_params(use_ema);
    let cfg = SamplerConfig {
        steps,
        seed,
        use_ema,
    };

    let out = resolve_out(out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let n = limit.unwrap_or(dataset.samples.len()).min(dataset.samples.len());

    let t0 = std::time::Instant::now();
    let mut tensors = Vec::with_capacity(n);
    for (i, s) in dataset.samples.iter().take(n).enumerate() {
        let y = sample(&model, params, target, &s.x, &schedule, &cfg, i as u64)?;
        write_png(&out.join(format!("{}.png", s.id)), &y)?;
        tensors.push((s.id.clone(), y));
    }
    let wall_ms = t0.elapsed().as_millis() as u64;

    let mut meta = serde_json::Map::new();
    meta.insert("format".into(), "predictions".into());
    meta.insert("steps".into(), serde_json::json!(steps));
    meta.insert("seed".into(), serde_json::json!(seed));
    meta.insert("use_ema".into(), serde_json::json!(use_ema));
    meta.insert("target".into(), serde_json::json!(target.to_string()));
    save_store(&out.join("pred"), &tensors, meta)?;

    let timing = serde_json::json!({
        "steps": steps,
        "samples": n,
        "wall_ms_total": wall_ms,
        "wall_ms_per_sample": wall_ms as f64 / n.max(1) as f64,
    });
    let timing_path = out.join("timing.json");
    fs::write(&timing_path, format!("{:#}\n", timing)).map_err(|e| Error::io(&timing_path, e))?;
    println!(
        "sampled {} outputs at k={} in {} ms -> {}",
        n,
        steps,
        wall_ms,
        out.display()
    );
    Ok(())
}

/// JSON-safe PSNR: infinite values (exact matches) serialize as null.
fn psnr_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

pub fn cmd_eval(pred: &Path, dataset_path: &Path, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(dataset_path)?;
    let (pred_tensors, _) = load_store(pred)?;
    let refs = dataset.by_id();

    let mut missing = Vec::new();
    let mut rows: Vec<SampleMetrics> = Vec::new();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut exact = 0usize;
    for (id, tensor) in &pred_tensors {
        let Some(reference) = refs.get(id.as_str()) else {
            missing.push(id.clone());
            continue;
        };
        // metrics run in the [0, 1] display domain
        let p01 = decloud_core::data::denormalize(tensor, 0.0, 1.0)?;
        let r01 = decloud_core::data::denormalize(&reference.y0, 0.0, 1.0)?;
        let p = psnr(&p01, &r01, 1.0)?;
        let s = ssim(&p01, &r01, 1.0)?;
        if p.is_infinite() {
            exact += 1;
        }
        psnr_sum += p;
        ssim_sum += s;
        rows.push(SampleMetrics {
            id: id.clone(),
            psnr_db: p,
            ssim: s,
        });
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::InvalidConfig(format!(
            "predictions reference ids missing from the dataset: {}",
            missing.join(", ")
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("no predictions to evaluate".into()));
    }
    // aggregate over a stable id order so shuffled inputs give identical
    // reports
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let count = rows.len();
    let mean_psnr = psnr_sum / count as f64;
    let report = serde_json::json!({
        "version": 1,
        "count": count,
        "mean_psnr_db": psnr_json(mean_psnr),
        "mean_ssim": ssim_sum / count as f64,
        "exact_matches": exact,
        "per_sample": rows
            .iter()
            .map(|r| serde_json::json!({
                "id": r.id,
                "psnr_db": psnr_json(r.psnr_db),
                "ssim": r.ssim,
            }))
            .collect::<Vec<_>>(),
    });
    let text = format!("{:#}\n", report);
    match out {
        Some(path) => {
            let path = resolve_out(path);
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            println!(
                "evaluated {} samples: mean PSNR {}, mean SSIM {:.4} -> {}",
                count,
                if mean_psnr.is_finite() {
                    format!("{:.3} dB", mean_psnr)
                } else {
                    "inf (exact)".into()
                },
                ssim_sum / count as f64,
                path.display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_count(config: &Path, hw: usize, sections: bool) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    // accept either a full run config or a bare model config
    let model_cfg: ModelConfig = match serde_json::from_str::<RunConfig>(&text) {
        Ok(rc) => rc.model,
        Err(_) => serde_json::from_str::<ModelConfig>(&text)?,
    };
    if hw == 0 || hw % SPATIAL_DIVISOR != 0 {
        return Err(Error::InvalidConfig(format!(
            "--hw must be a positive multiple of {SPATIAL_DIVISOR} (got {hw})"
        )));
    }
    let report = efficiency_report(&model_cfg, hw, hw)?;
    let mut body = BTreeMap::new();
    body.insert("params", serde_json::json!(report.params));
    body.insert("macs", serde_json::json!(report.macs));
    body.insert(
        "params_m",
        serde_json::json!(report.params as f64 / 1e6),
    );
    body.insert("macs_g", serde_json::json!(report.macs as f64 / 1e9));
    body.insert("hw", serde_json::json!(hw));
    if sections {
        body.insert(
            "sections",
            serde_json::json!(report
                .sections
                .iter()
                .map(|s| serde_json::json!({
                    "name": s.name,
                    "params": s.params,
                    "macs": s.macs,
                }))
                .collect::<Vec<_>>()),
        );
    }
    println!("{:#}", serde_json::json!(body));
    Ok(())
}

pub fn cmd_check() -> Result<()> {
    use decloud_core::model::blocks::{tcf_block_forward, TcfBlockVars};
    use decloud_core::numerics::gradcheck::{grad_check, DEFAULT_STEP};
    use rand::SeedableRng;

    let mut failures = 0;
    let mut run = |name: &str, tol: f64, err: Result<f64>| match err {
        Ok(e) if e < tol => println!("[PASS] {name}: rel err {e:.3e} < {tol:.1e}"),
        Ok(e) => {
            failures += 1;
            println!("[FAIL] {name}: rel err {e:.3e} >= {tol:.1e}");
        }
        Err(e) => {
            failures += 1;
            println!("[FAIL] {name}: {e}");
        }
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let x = Tensor::<f64>::randn(vec![4, 4, 4], &mut rng);
    let seed_rng = rng.clone();

    run(
        "fusion block input gradient",
        1e-4,
        grad_check(&x, DEFAULT_STEP, |t, x| {
            let mut r = seed_rng.clone();
            let vars = TcfBlockVars::init_random(t, 4, 2, &mut r)?;
            let y = tcf_block_forward(t, x, None, None, &vars)?;
            t.sum(y)
        }),
    );

    let xs = Tensor::<f64>::randn(vec![2, 3, 3], &mut rng);
    run(
        "conv2d input gradient",
        1e-6,
        grad_check(&xs, DEFAULT_STEP, |t, x| {
            let spec = decloud_core::numerics::ops::ConvSpec::depthwise(2, 3, 1);
            let w = t.leaf(Tensor::full(spec.weight_shape().to_vec(), 0.3));
            let b = t.leaf(Tensor::zeros(vec![2]));
            let y = t.conv2d(x, spec, w, b)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    );

    run(
        "layer norm input gradient",
        1e-6,
        grad_check(&xs, DEFAULT_STEP, |t, x| {
            // per-channel affine: a uniform gamma would make this probe
            // constant in x (the normalized square-sum is fixed)
            let g = t.leaf(Tensor::new(vec![2], vec![1.2, 0.7])?);
            let b = t.leaf(Tensor::new(vec![2], vec![-0.1, 0.4])?);
            let y = t.layer_norm(x, g, b, 1e-6)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    );

    if failures > 0 {
        Err(Error::NonFinite(format!("{failures} self-checks failed")))
    } else {
        println!("all self-checks passed");
        Ok(())
    }
}

