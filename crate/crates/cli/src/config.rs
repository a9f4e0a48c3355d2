//! Flat `key = value` pipeline configuration. Precedence: `--set` flags,
//! then the config file, then the defaults below.

use std::path::Path;

use radiosynth_core::degradation::{parse_kv, DegradationRanges, PairPool};
use radiosynth_core::denoiser::DenoiserConfig;
use radiosynth_core::diffusion::SamplerConfig;
use radiosynth_core::losses::LossWeights;
use radiosynth_core::nn::AdamWConfig;
use radiosynth_core::sr::{DiscriminatorConfig, SrGeneratorConfig};
use radiosynth_core::{EmaSchedule, NoiseSchedule, Resolution, Scalar};

use crate::error::{config_err, CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Root seed; every stream is derived from it by label.
    pub seed: u64,

    pub schedule: String,
    pub steps: usize,
    pub cosine_offset: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub linear_beta_start: f64,
    pub linear_beta_end: f64,

    pub eta: f64,
    pub inference_steps: usize,
    pub clip_denoised: bool,

    pub hr_width: usize,
    pub hr_height: usize,
    pub lr_width: usize,
    pub lr_height: usize,

    pub denoiser_widths: Vec<usize>,
    pub denoiser_embed: usize,
    pub denoiser_attention: bool,
    pub diffusion_iters: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_gamma0: f64,
    pub sample_count: usize,

    pub sr_scale: usize,
    pub sr_embed: usize,
    pub sr_window: usize,
    pub sr_overlap: f64,
    pub sr_groups: usize,
    pub sr_blocks: usize,
    pub sr_heads: usize,
    pub sr_upsample_features: usize,
    pub sr_steps: usize,
    pub sr_learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub disc_channels: usize,
    pub disc_depth: usize,

    pub pool_per_scale: usize,
    pub pool_capacity: usize,

    pub embedder_seed: u64,
    pub is_splits: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,

    pub port: u16,
    pub n_each: usize,
    pub deadline_secs: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sr = SrGeneratorConfig::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            schedule: "cosine".into(),
            steps: 1000,
            cosine_offset: 0.008,
            beta_min: 0.0,
            beta_max: 0.999,
            linear_beta_start: 1e-4,
            linear_beta_end: 0.02,
            eta: 0.0,
            inference_steps: 250,
            clip_denoised: true,
            hr_width: 1024,
            hr_height: 512,
            lr_width: 256,
            lr_height: 128,
            denoiser_widths: DenoiserConfig::default().widths,
            denoiser_embed: 32,
            denoiser_attention: true,
            diffusion_iters: 1000,
            batch: 4,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            ema_gamma0: 0.995,
            sample_count: 16,
            sr_scale: sr.scale,
            sr_embed: sr.embed_dim,
            sr_window: sr.window,
            sr_overlap: sr.overlap_ratio,
            sr_groups: sr.n_groups,
            sr_blocks: sr.blocks_per_group,
            sr_heads: sr.heads,
            sr_upsample_features: sr.upsample_features,
            sr_steps: 500,
            sr_learning_rate: 1e-4,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            disc_channels: 16,
            disc_depth: 3,
            pool_per_scale: 16,
            pool_capacity: 64,
            embedder_seed: 0,
            is_splits: 10,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            port: 8080,
            n_each: 100,
            deadline_secs: 12.0,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> CliResult<V> {
    value.trim().parse().map_err(|_| CliError::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("bad boolean for {key}: {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

macro_rules! fields {
    ($m:ident) => {
        $m! {
            seed: num, schedule: text, steps: num, cosine_offset: num, beta_min: num, beta_max: num,
            linear_beta_start: num, linear_beta_end: num, eta: num, inference_steps: num,
            clip_denoised: flag, hr_width: num, hr_height: num, lr_width: num, lr_height: num,
            denoiser_widths: list, denoiser_embed: num, denoiser_attention: flag, diffusion_iters: num,
            batch: num, learning_rate: num, weight_decay: num, clip_norm: num, ema_gamma0: num,
            sample_count: num, sr_scale: num, sr_embed: num, sr_window: num, sr_overlap: num,
            sr_groups: num, sr_blocks: num, sr_heads: num, sr_upsample_features: num, sr_steps: num,
            sr_learning_rate: num, lambda1: num, lambda2: num, lambda3: num, disc_channels: num,
            disc_depth: num, pool_per_scale: num, pool_capacity: num, embedder_seed: num,
            is_splits: num, tsne_perplexity: num, tsne_iterations: num, port: num, n_each: num,
            deadline_secs: num
        }
    };
}

macro_rules! setter {
    ($($name:ident: $kind:ident),* $(,)?) => {
        fn set_field(&mut self, key: &str, value: &str) -> CliResult<()> {
            match key {
                $(stringify!($name) => { setter!(@$kind self, $name, key, value); })*
                _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
            }
            Ok(())
        }

        /// Every key in sorted order, the reproducibility snapshot.
        pub fn to_kv(&self) -> String {
            let mut rows: Vec<(&str, String)> = vec![$((stringify!($name), setter!(@show $kind self.$name))),*];
            rows.sort_by(|a, b| a.0.cmp(b.0));
            rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
        }
    };
    (@num $s:ident, $name:ident, $k:ident, $v:ident) => { $s.$name = parse($k, $v)?; };
    (@text $s:ident, $name:ident, $k:ident, $v:ident) => { $s.$name = $v.trim().to_string(); };
    (@flag $s:ident, $name:ident, $k:ident, $v:ident) => { $s.$name = parse_bool($k, $v)?; };
    (@list $s:ident, $name:ident, $k:ident, $v:ident) => { $s.$name = parse_list($k, $v)?; };
    (@show num $e:expr) => { $e.to_string() };
    (@show text $e:expr) => { $e.clone() };
    (@show flag $e:expr) => { $e.to_string() };
    (@show list $e:expr) => { $e.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") };
}

impl PipelineConfig {
    fields!(setter);

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        self.set_field(key.trim(), value)
    }

    pub fn apply_kv(&mut self, text: &str) -> CliResult<()> {
        let map = parse_kv(text).map_err(config_err)?;
        for (k, v) in map {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Desk-scale settings for the end-to-end toy run: 128×64 HR, 32×16 LR,
    /// small networks and short training.
    pub fn toy() -> Self {
        Self {
            hr_width: 128,
            hr_height: 64,
            lr_width: 32,
            lr_height: 16,
            denoiser_widths: vec![8, 16],
            denoiser_embed: 16,
            diffusion_iters: 3000,
            learning_rate: 2e-3,
            ema_gamma0: 0.9,
            inference_steps: 50,
            sample_count: 32,
            sr_embed: 16,
            sr_groups: 1,
            sr_blocks: 1,
            sr_upsample_features: 8,
            sr_steps: 400,
            sr_learning_rate: 1e-3,
            disc_channels: 8,
            disc_depth: 2,
            pool_per_scale: 8,
            is_splits: 4,
            tsne_perplexity: 10.0,
            ..Self::default()
        }
    }

    /// Defaults, then `file`, then `overrides` (`key=value` strings).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        Self::load_onto(Self::default(), file, overrides)
    }

    /// [`PipelineConfig::load`] starting from `base` instead of the defaults.
    pub fn load_onto(base: Self, file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = base;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_kv(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.noise_schedule()?;
        self.sampler()?;
        self.denoiser()?.validate().map_err(config_err)?;
        self.sr_generator()?.validate().map_err(config_err)?;
        self.loss_weights()?;
        self.ema_schedule(self.diffusion_iters.max(1))?;
        self.lr_resolution()?;
        self.hr_resolution()?;
        let ok = self.batch > 0
            && self.learning_rate > 0.0
            && self.sr_learning_rate > 0.0
            && self.sample_count > 0
            && self.is_splits > 0
            && self.pool_per_scale > 0
            && self.n_each > 0
            && self.deadline_secs > 0.0
            && self.disc_depth >= 2
            && self.disc_channels > 0;
        if !ok {
            return Err(CliError::Config("counts, rates and deadlines must be positive; disc_depth at least 2".into()));
        }
        let multiple = self.denoiser()?.size_multiple();
        if !self.lr_width.is_multiple_of(multiple) || !self.lr_height.is_multiple_of(multiple) {
            return Err(CliError::Config(format!("LR size must be divisible by {multiple} for the denoiser")));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> CliResult<NoiseSchedule<f32>> {
        self.noise_schedule_as()
    }

    pub fn noise_schedule_as<T: Scalar>(&self) -> CliResult<NoiseSchedule<T>> {
        let s = match self.schedule.as_str() {
            "cosine" => NoiseSchedule::cosine(self.steps, T::lit(self.cosine_offset), T::lit(self.beta_min), T::lit(self.beta_max)),
            "linear" => NoiseSchedule::linear(self.steps, T::lit(self.linear_beta_start), T::lit(self.linear_beta_end)),
            other => return Err(CliError::Config(format!("schedule must be cosine or linear, got {other:?}"))),
        };
        s.map_err(config_err)
    }

    pub fn sampler(&self) -> CliResult<SamplerConfig<f32>> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(CliError::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.inference_steps == 0 || self.inference_steps > self.steps {
            return Err(CliError::Config(format!("inference_steps must be in 1..={}", self.steps)));
        }
        Ok(SamplerConfig { eta: self.eta as f32, inference_steps: self.inference_steps, clip_denoised: self.clip_denoised })
    }

    pub fn denoiser(&self) -> CliResult<DenoiserConfig> {
        Ok(DenoiserConfig {
            widths: self.denoiser_widths.clone(),
            image_channels: 1,
            steps: self.steps,
            embed_dim: self.denoiser_embed,
            attention: self.denoiser_attention,
        })
    }

    pub fn sr_generator(&self) -> CliResult<SrGeneratorConfig> {
        Ok(SrGeneratorConfig {
            embed_dim: self.sr_embed,
            window: self.sr_window,
            overlap_ratio: self.sr_overlap,
            n_groups: self.sr_groups,
            blocks_per_group: self.sr_blocks,
            heads: self.sr_heads,
            scale: self.sr_scale,
            upsample_features: self.sr_upsample_features,
            ..SrGeneratorConfig::default()
        })
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig { base_channels: self.disc_channels, depth: self.disc_depth, ..DiscriminatorConfig::default() }
    }

    pub fn loss_weights(&self) -> CliResult<LossWeights> {
        LossWeights::new(self.lambda1, self.lambda2, self.lambda3).map_err(config_err)
    }

    pub fn ema_schedule(&self, total: usize) -> CliResult<EmaSchedule<f32>> {
        EmaSchedule::new(self.ema_gamma0 as f32, total).map_err(config_err)
    }

    pub fn adamw(&self, lr: f64) -> AdamWConfig<f32> {
        AdamWConfig {
            lr: lr as f32,
            weight_decay: self.weight_decay as f32,
            clip_norm: self.clip_norm as f32,
            ..AdamWConfig::default()
        }
    }

    pub fn lr_resolution(&self) -> CliResult<Resolution> {
        Resolution::new(self.lr_width, self.lr_height).map_err(config_err)
    }

    pub fn hr_resolution(&self) -> CliResult<Resolution> {
        Resolution::new(self.hr_width, self.hr_height).map_err(config_err)
    }

    /// A randomized pool at the generator scale.
    pub fn default_pool(&self) -> CliResult<PairPool> {
        PairPool::randomized(
            &[self.sr_scale],
            self.pool_per_scale,
            &DegradationRanges::default(),
            self.pool_capacity,
            radiosynth_core::rng::derive_seed(self.seed, "pool"),
        )
        .map_err(config_err)
    }
}
