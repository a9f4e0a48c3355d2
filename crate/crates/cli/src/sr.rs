use std::path::Path;

use radiosynth_core::degradation::{degrade_pair, pool_draw, PairPool};
use radiosynth_core::losses::{
    adversarial_step_on_pair, loss_trace_csv, supervised_train_step, AdversarialOptimizers, StepLosses,
    ToyExtractor,
};
use radiosynth_core::nn::OptimizerState;
use radiosynth_core::rng::{derive_seed, rng_from_seed};
use radiosynth_core::sr::{Discriminator, SrGenerator};
use radiosynth_core::ImageGrid;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::io::{fit, load_checkpoint, load_corpus, mkdir, save, stem, write_text};
use crate::record::{DirLock, InputSet, RunRecord};

pub const GENERATOR_FILE: &str = "sr.ckpt";
pub const DISCRIMINATOR_FILE: &str = "disc.ckpt";

fn load_pool(cfg: &PipelineConfig, pool: Option<&Path>) -> CliResult<PairPool> {
    match pool {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read pool {}: {e}", p.display())))?;
            PairPool::from_kv(&text).map_err(|e| CliError::Config(format!("pool {}: {e}", p.display())))
        }
        None => cfg.default_pool(),
    }
}

fn hr_corpus(cfg: &PipelineConfig, dir: &Path) -> CliResult<(Vec<std::path::PathBuf>, Vec<ImageGrid<f32>>)> {
    let hr_res = cfg.hr_resolution()?;
    let corpus = load_corpus::<f32>(dir)?;
    let images = corpus.iter().map(|(_, g)| fit(g, hr_res)).collect::<CliResult<Vec<_>>>()?;
    Ok((corpus.into_iter().map(|(p, _)| p).collect(), images))
}

/// One degraded LR per HR image, recipe drawn from the pool by weight.
/// Writes `lr/{id}.png`, `pairs.csv` and the pool dump `pool.txt`.
pub fn cmd_degrade(cfg: &PipelineConfig, hr_dir: &Path, output: &Path, pool: Option<&Path>) -> CliResult<usize> {
    let pool = load_pool(cfg, pool)?;
    let (paths, images) = hr_corpus(cfg, hr_dir)?;
    let _lock = DirLock::acquire(output)?;
    let lr_dir = output.join("lr");
    mkdir(&lr_dir)?;
    let mut rec = RunRecord::new("degrade", cfg, InputSet::hash(&paths)?);
    let root = rec.seed("degrade", cfg.seed);
    let mut csv = String::from("id,recipe,scale,lr_width,lr_height\n");
    for (path, hr) in paths.iter().zip(&images) {
        let id = stem(path);
        let mut rng = rng_from_seed(derive_seed(root, &id));
        let k = pool.draw_recipe(&mut rng);
        let recipe = &pool.recipes()[k];
        let (_, lr) = degrade_pair(hr, recipe, &mut rng)?;
        save(&lr, &lr_dir.join(format!("{id}.png")))?;
        csv.push_str(&format!("{id},{k},{},{},{}\n", recipe.scale, lr.width(), lr.height()));
    }
    write_text(&output.join("pairs.csv"), &csv)?;
    write_text(&output.join("pool.txt"), &pool.to_kv())?;
    rec.write(output)?;
    Ok(images.len())
}

/// Trains the generator on pairs drawn from the pool. With `lambda3 > 0`
/// the discriminator is trained alongside and saved too.
pub fn cmd_train_sr(cfg: &PipelineConfig, hr_dir: &Path, output: &Path, pool: Option<&Path>) -> CliResult<Vec<StepLosses<f32>>> {
    cfg.validate()?;
    let pool = load_pool(cfg, pool)?;
    let weights = cfg.loss_weights()?;
    let gen_cfg = cfg.sr_generator()?;
    gen_cfg.validate().map_err(crate::error::config_err)?;
    let (paths, images) = hr_corpus(cfg, hr_dir)?;
    let _lock = DirLock::acquire(output)?;

    let mut rec = RunRecord::new("train-sr", cfg, InputSet::hash(&paths)?);
    let mut gen = SrGenerator::<f32>::new(gen_cfg, &mut rng_from_seed(rec.seed("sr-init", cfg.seed)))?;
    let phi = ToyExtractor::<f32>::new(1, rec.seed("perceptual", cfg.seed));
    let mut rng = rng_from_seed(rec.seed("sr-train", cfg.seed));
    let adversarial = weights.lambda3 > 0.0;
    let mut disc = if adversarial {
        Some(Discriminator::<f32>::new(cfg.discriminator(), &mut rng_from_seed(rec.seed("disc-init", cfg.seed)))?)
    } else {
        None
    };
    let adam = cfg.adamw(cfg.sr_learning_rate);
    let mut opts = AdversarialOptimizers {
        gen: OptimizerState::new(&gen.params, adam),
        disc: OptimizerState::new(disc.as_ref().map(|d| &d.params).unwrap_or(&gen.params), adam),
    };
    let mut trace = Vec::with_capacity(cfg.sr_steps);
    for _ in 0..cfg.sr_steps {
        let pair = pool_draw(&pool, &images, &mut rng)?;
        let row = match disc.as_mut() {
            Some(d) => adversarial_step_on_pair(&mut gen, d, &phi, &weights, &mut opts, &pair.hr, &pair.lr)?,
            None => supervised_train_step(&mut gen, &mut opts.gen, &phi, &weights, &pair.hr, &pair.lr)?,
        };
        trace.push(row);
    }
    gen.to_checkpoint().save(&output.join(GENERATOR_FILE))?;
    if let Some(d) = &disc {
        d.to_checkpoint().save(&output.join(DISCRIMINATOR_FILE))?;
    }
    write_text(&output.join("loss.csv"), &loss_trace_csv(&trace))?;
    write_text(&output.join("pool.txt"), &pool.to_kv())?;
    rec.extra = serde_json::json!({
        "steps": cfg.sr_steps,
        "adversarial": adversarial,
        "final_total": trace.last().map(|r| r.total as f64),
    });
    rec.write(output)?;
    Ok(trace)
}

pub fn load_generator(path: &Path) -> CliResult<SrGenerator<f32>> {
    Ok(SrGenerator::from_checkpoint(&load_checkpoint(path)?)?)
}

/// Upscales every PNG in `input`, keeping file names.
pub fn cmd_upscale(cfg: &PipelineConfig, checkpoint: &Path, input: &Path, output: &Path) -> CliResult<Vec<ImageGrid<f32>>> {
    let gen = load_generator(checkpoint)?;
    let corpus = load_corpus::<f32>(input)?;
    let _lock = DirLock::acquire(output)?;
    let mut inputs: Vec<_> = corpus.iter().map(|(p, _)| p.clone()).collect();
    inputs.push(checkpoint.to_path_buf());
    let rec = RunRecord::new("upscale", cfg, InputSet::hash(&inputs)?);
    let mut out = Vec::with_capacity(corpus.len());
    for (path, lr) in &corpus {
        let hr = gen.forward(lr)?;
        let name = path.file_name().expect("listed file has a name");
        save(&hr, &output.join(name))?;
        out.push(hr);
    }
    rec.write(output)?;
    Ok(out)
}
