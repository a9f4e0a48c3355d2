use std::path::Path;

use rand::seq::SliceRandom;
use radiosynth_core::denoiser::{loss_csv, train_step, Denoiser, TrainRecord};
use radiosynth_core::diffusion::{diagnostics_csv, noising_diagnostics, sample_seeds};
use radiosynth_core::nn::{EmaParams, OptimizerState};
use radiosynth_core::rng::rng_from_seed;
use radiosynth_core::ImageGrid;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::io::{fit, load_checkpoint, load_corpus, save, write_text};
use crate::record::{DirLock, InputSet, RunRecord};

pub const DENOISER_FILE: &str = "denoiser.ckpt";

/// Trains on the LR corpus in `data` and writes `denoiser.ckpt` (live and
/// EMA weights), `loss.csv` and `config.kv`.
pub fn cmd_train_diffusion(cfg: &PipelineConfig, data: &Path, output: &Path) -> CliResult<Vec<TrainRecord<f32>>> {
    cfg.validate()?;
    let sched = cfg.noise_schedule()?;
    let ema_sched = cfg.ema_schedule(cfg.diffusion_iters)?;
    let lr_res = cfg.lr_resolution()?;
    let corpus = load_corpus::<f32>(data)?;
    let images = corpus.iter().map(|(_, g)| fit(g, lr_res)).collect::<CliResult<Vec<_>>>()?;
    let _lock = DirLock::acquire(output)?;

    let inputs: Vec<_> = corpus.iter().map(|(p, _)| p.clone()).collect();
    let mut rec = RunRecord::new("train-diffusion", cfg, InputSet::hash(&inputs)?);
    let mut init_rng = rng_from_seed(rec.seed("denoiser-init", cfg.seed));
    let mut net = Denoiser::<f32>::new(cfg.denoiser()?, &mut init_rng)?;
    let mut opt = OptimizerState::new(&net.params, cfg.adamw(cfg.learning_rate));
    let mut ema = EmaParams::new(&net.params);
    let mut rng = rng_from_seed(rec.seed("diffusion-train", cfg.seed));

    // Epoch-style batching over a reshuffled order.
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.diffusion_iters);
    for _ in 0..cfg.diffusion_iters {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(images[order.pop().expect("refilled")].clone());
        }
        records.push(train_step(&mut net, &mut opt, &mut ema, &ema_sched, &batch, &sched, &mut rng)?);
    }

    let mut ck = net.to_checkpoint(Some(&ema));
    ck.config["trained_steps"] = serde_json::json!(cfg.diffusion_iters);
    ck.save(&output.join(DENOISER_FILE))?;
    write_text(&output.join("loss.csv"), &loss_csv(&records))?;
    write_text(&output.join("config.kv"), &cfg.to_kv())?;
    let last = records.last().map(|r| r.loss as f64).unwrap_or(f64::NAN);
    rec.extra = serde_json::json!({ "iterations": cfg.diffusion_iters, "final_loss": last, "images": images.len() });
    rec.write(output)?;
    Ok(records)
}

/// Loads a denoiser checkpoint; the EMA weights when present.
pub fn load_denoiser(path: &Path) -> CliResult<(Denoiser<f32>, u64)> {
    let ck = load_checkpoint(path)?;
    let steps = ck.config.get("trained_steps").and_then(|v| v.as_u64()).unwrap_or(0);
    let (net, ema) = Denoiser::from_checkpoint(&ck)?;
    let net = match ema {
        Some(e) => net.with_params(e.shadow)?,
        None => net,
    };
    Ok((net, steps))
}

/// Seed of the `i`-th sample of a run.
pub fn sample_seed(root: u64, i: usize) -> u64 {
    radiosynth_core::rng::derive_seed(root, &format!("sample-{i}"))
}

/// `count` samples named `{seed}_{step}.png`, plus `samples.csv`.
pub fn cmd_sample(cfg: &PipelineConfig, checkpoint: &Path, output: &Path, count: Option<usize>) -> CliResult<Vec<ImageGrid<f32>>> {
    cfg.validate()?;
    let sched = cfg.noise_schedule()?;
    let sampler = cfg.sampler()?;
    let count = count.unwrap_or(cfg.sample_count);
    if count == 0 {
        return Err(CliError::Config("sample count must be positive".into()));
    }
    let (net, step) = load_denoiser(checkpoint)?;
    if net.config().steps != sched.steps() {
        return Err(CliError::Config(format!(
            "checkpoint was trained with T={} but the config has steps={}",
            net.config().steps,
            sched.steps()
        )));
    }
    let _lock = DirLock::acquire(output)?;
    let mut rec = RunRecord::new("sample", cfg, InputSet::hash(&[checkpoint.to_path_buf()])?);
    let seeds: Vec<u64> = (0..count).map(|i| rec.seed(&format!("sample-{i}"), cfg.seed)).collect();
    let images = sample_seeds(&net, &sched, &sampler, cfg.lr_resolution()?, &seeds)?;
    let mut csv = String::from("index,seed,file\n");
    for (i, (img, seed)) in images.iter().zip(&seeds).enumerate() {
        let name = format!("{seed}_{step}.png");
        save(img, &output.join(&name))?;
        csv.push_str(&format!("{i},{seed},{name}\n"));
    }
    write_text(&output.join("samples.csv"), &csv)?;
    rec.extra = serde_json::json!({ "count": count, "trained_steps": step });
    rec.write(output)?;
    Ok(images)
}

/// Forward-noising statistics of one image at every `stride`-th timestep.
pub fn cmd_diagnostics(cfg: &PipelineConfig, image: &Path, output: &Path, stride: usize) -> CliResult<String> {
    let sched = cfg.noise_schedule_as::<f64>()?;
    let g = fit(&radiosynth_core::grid::load_png::<f64>(image)
        .map_err(|e| CliError::Data(format!("{}: {e}", image.display())))?
        .to_grayscale(), cfg.lr_resolution()?)?;
    let _lock = DirLock::acquire(output)?;
    let mut rec = RunRecord::new("diagnostics", cfg, InputSet::hash(&[image.to_path_buf()])?);
    let mut rng = rng_from_seed(rec.seed("diagnostics", cfg.seed));
    let mut ts: Vec<usize> = (1..=sched.steps()).step_by(stride.max(1)).collect();
    if ts.last() != Some(&sched.steps()) {
        ts.push(sched.steps());
    }
    let rows = noising_diagnostics(&g, &sched, &ts, &mut rng)?;
    let csv = diagnostics_csv(&rows);
    write_text(&output.join("diagnostics.csv"), &csv)?;
    rec.write(output)?;
    Ok(csv)
}
