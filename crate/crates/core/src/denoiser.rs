//! Small U-Net noise predictor and its training loop.
//!
//! Layout: a 3×3 input conv, one residual block per level on the way down
//! (average-pool between levels), one self-attention block at the coarsest
//! level, then nearest-neighbour upsampling with concatenated skips and a
//! residual block per level on the way up. Each residual block adds a learned
//! per-timestep embedding, projected to its channel count.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{noise_with, Concurrency, NoisePredictor};
use crate::error::bail_arg;
use crate::nn::layers::{from_tokens, to_tokens};
use crate::nn::{
    attention, check_gradients, grid_to_tensor, tensor_to_grid, Checkpoint, Conv, EmaParams,
    GradCheckReport, Gradients, Graph, LayerNorm, Linear, OptimizerState, ParamId, ParamStore,
    Tensor, Var,
};
use crate::rng::normal_vec;
use crate::schedule::{EmaSchedule, NoiseSchedule};
use crate::{Error, ImageGrid, Result, Scalar};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channel width per level, strictly increasing.
    pub widths: Vec<usize>,
    pub image_channels: usize,
    /// Diffusion steps covered by the embedding table.
    pub steps: usize,
    pub embed_dim: usize,
    pub attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            image_channels: 1,
            steps: 1000,
            embed_dim: 32,
            attention: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.windows(2).any(|w| w[0] >= w[1]) || self.widths[0] == 0 {
            bail_arg!("widths must be nonempty and strictly increasing, got {:?}", self.widths);
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            bail_arg!("image channels must be 1 or 3, got {}", self.image_channels);
        }
        if self.steps == 0 || self.embed_dim == 0 {
            bail_arg!("steps and embed_dim must be positive");
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    time: Linear,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        s: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        embed: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv::new(s, &format!("{name}.conv1"), c_in, c_out, 3, rng),
            conv2: Conv::new(s, &format!("{name}.conv2"), c_out, c_out, 3, rng),
            time: Linear::new(s, &format!("{name}.time"), embed, c_out, rng),
            skip: (c_in != c_out).then(|| Conv::new(s, &format!("{name}.skip"), c_in, c_out, 1, rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, emb: Var) -> Result<Var> {
        let a = g.silu(x);
        let h = self.conv1.forward(g, s, a)?;
        let te = self.time.forward(g, s, emb)?;
        let c = g.shape(te)[1];
        let te = g.reshape(te, vec![c])?;
        let h = g.add_channel(h, te)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, s, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttnBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(s: &mut ParamStore<T>, c: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(s, "attn.norm", c),
            q: Linear::new(s, "attn.q", c, c, rng),
            k: Linear::new(s, "attn.k", c, c, rng),
            v: Linear::new(s, "attn.v", c, c, rng),
            out: Linear::new(s, "attn.out", c, c, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
        let tokens = to_tokens(g, x)?;
        let n = self.norm.forward(g, s, tokens)?;
        let q = self.q.forward(g, s, n)?;
        let k = self.k.forward(g, s, n)?;
        let v = self.v.forward(g, s, n)?;
        let a = attention(g, q, k, v)?;
        let o = self.out.forward(g, s, a)?;
        let o = from_tokens(g, o, h, w)?;
        g.add(x, o)
    }
}

#[derive(Debug, Clone)]
struct Arch {
    time_table: ParamId,
    conv_in: Conv,
    down: Vec<ResBlock>,
    attn: Option<AttnBlock>,
    up: Vec<ResBlock>,
    conv_out: Conv,
}

/// Noise predictor `ε_θ(x_t, t)` with live weights; evaluate EMA weights via
/// [`Denoiser::with_params`].
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    arch: Arch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let w = &config.widths;
        let e = config.embed_dim;
        let table = normal_vec(rng, config.steps * e);
        let time_table = s.add("time_table", Tensor::new(vec![config.steps, e], table)?);
        let conv_in = Conv::new(&mut s, "conv_in", config.image_channels, w[0], 3, rng);
        let mut down = Vec::new();
        for (l, &c) in w.iter().enumerate() {
            let c_in = if l == 0 { w[0] } else { w[l - 1] };
            down.push(ResBlock::new(&mut s, &format!("down{l}"), c_in, c, e, rng));
        }
        let attn = config.attention.then(|| AttnBlock::new(&mut s, *w.last().expect("nonempty"), rng));
        let mut up = Vec::new();
        for l in (0..w.len() - 1).rev() {
            up.push(ResBlock::new(&mut s, &format!("up{l}"), w[l + 1] + w[l], w[l], e, rng));
        }
        let conv_out = Conv::new(&mut s, "conv_out", w[0], config.image_channels, 3, rng);
        Ok(Self {
            arch: Arch { time_table, conv_in, down, attn, up, conv_out },
            config,
            params: s,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Same architecture evaluated with other weights (typically the EMA shadow).
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if !params.same_layout(&self.params) {
            bail_arg!("parameter layout does not match the denoiser architecture");
        }
        Ok(Self {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params,
        })
    }

    fn check_input(&self, x_t: &ImageGrid<T>, t: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if !x_t.height().is_multiple_of(m) || !x_t.width().is_multiple_of(m) {
            bail_arg!("input {}x{} not divisible by {m}", x_t.width(), x_t.height());
        }
        if x_t.channels() != self.config.image_channels {
            bail_arg!("expected {} channels, got {}", self.config.image_channels, x_t.channels());
        }
        if t == 0 || t > self.config.steps {
            bail_arg!("timestep {t} outside 1..={}", self.config.steps);
        }
        Ok(())
    }

    /// Records the forward pass for `store` on `g`; returns `[c, h, w]` output.
    pub fn build(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_t: &ImageGrid<T>, t: usize) -> Result<Var> {
        self.check_input(x_t, t)?;
        let a = &self.arch;
        let e = self.config.embed_dim;
        let table = g.param(store, a.time_table);
        let row: Arc<[usize]> = ((t - 1) * e..t * e).collect::<Vec<_>>().into();
        let emb = g.gather(table, row, vec![1, e])?;

        let x = g.input(grid_to_tensor(x_t));
        let mut h = a.conv_in.forward(g, store, x)?;
        let mut skips = Vec::new();
        let last = a.down.len() - 1;
        for (l, block) in a.down.iter().enumerate() {
            h = block.forward(g, store, h, emb)?;
            if l < last {
                skips.push(h);
                h = g.avg_pool2(h)?;
            }
        }
        if let Some(attn) = &a.attn {
            h = attn.forward(g, store, h)?;
        }
        for block in &a.up {
            let skip = skips.pop().expect("one skip per level");
            let u = g.upsample2(h)?;
            let cat = g.concat(&[u, skip])?;
            h = block.forward(g, store, cat, emb)?;
        }
        let h = g.silu(h);
        a.conv_out.forward(g, store, h)
    }

    pub fn forward(&self, x_t: &ImageGrid<T>, t: usize) -> Result<ImageGrid<T>> {
        let mut g = Graph::new();
        let out = self.build(&mut g, &self.params, x_t, t)?;
        tensor_to_grid(g.value(out))
    }

    /// Independent per-item predictions.
    pub fn forward_batch(&self, batch: &[(ImageGrid<T>, usize)]) -> Result<Vec<ImageGrid<T>>> {
        batch.iter().map(|(x, t)| self.forward(x, *t)).collect()
    }

    /// Mean `|ε̂ − ε|` for one noised item and its gradients; `delta > 0`
    /// smooths the absolute value as `sqrt(r² + δ²)`.
    pub fn noise_loss(
        &self,
        store: &ParamStore<T>,
        probe: &Probe<T>,
        sched: &NoiseSchedule<T>,
        delta: T,
    ) -> Result<(T, Gradients<T>)> {
        let x_t = noise_with(&probe.x0.to_model_domain(), sched.alpha_bar(probe.t), &probe.eps)?;
        let mut g = Graph::new();
        let pred = self.build(&mut g, store, &x_t, probe.t)?;
        let eps = g.input(grid_to_tensor(&probe.eps));
        let r = g.sub(pred, eps)?;
        let a = g.abs(r, delta);
        let loss = g.mean(a);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at t={}", probe.t)));
        }
        Ok((value, g.backward(loss)?))
    }

    pub fn to_checkpoint(&self, ema: Option<&EmaParams<T>>) -> Checkpoint<T> {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            live: self.params.clone(),
            ema: ema.map(|e| e.shadow.clone()),
        }
    }

    /// Rebuilds the network from a checkpoint; returns it with the EMA shadow if stored.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, Option<EmaParams<T>>)> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: DenoiserConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format(format!("denoiser config: {e}")))?;
        let net = Self::new(config, &mut crate::rng::rng_from_seed(0))?.with_params(ck.live.clone())?;
        let ema = match &ck.ema {
            Some(s) if !s.same_layout(&net.params) => {
                return Err(Error::Format("EMA layout differs from live weights".into()))
            }
            Some(s) => Some(EmaParams { shadow: s.clone() }),
            None => None,
        };
        Ok((net, ema))
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn predict(&self, x_t: &ImageGrid<T>, t: usize) -> Result<ImageGrid<T>> {
        self.forward(x_t, t)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

/// A fixed training example: display-domain `x0`, timestep and noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe<T> {
    pub x0: ImageGrid<T>,
    pub t: usize,
    pub eps: ImageGrid<T>,
}

impl<T: Scalar> Probe<T> {
    /// Draws `t` uniformly from `1..=T` and a fresh noise image.
    pub fn draw<R: Rng + ?Sized>(x0: &ImageGrid<T>, steps: usize, rng: &mut R) -> Self {
        let t = rng.random_range(1..=steps);
        let eps = x0.with_data(normal_vec(rng, x0.len()));
        Self { x0: x0.clone(), t, eps }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord<T> {
    pub step: u64,
    pub loss: T,
    pub grad_norm: T,
    pub gamma: T,
}

/// L1 noise loss on a batch, backprop, clip + AdamW, then the EMA blend with
/// `γ_k` for the optimizer's step count (held at 1 past the schedule end).
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    net: &mut Denoiser<T>,
    opt: &mut OptimizerState<T>,
    ema: &mut EmaParams<T>,
    ema_schedule: &EmaSchedule<T>,
    batch: &[ImageGrid<T>],
    sched: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<TrainRecord<T>> {
    let probes: Vec<_> = batch.iter().map(|x0| Probe::draw(x0, sched.steps(), rng)).collect();
    train_on_probes(net, opt, ema, ema_schedule, &probes, sched)
}

/// [`train_step`] with the timesteps and noise already drawn.
pub fn train_on_probes<T: Scalar>(
    net: &mut Denoiser<T>,
    opt: &mut OptimizerState<T>,
    ema: &mut EmaParams<T>,
    ema_schedule: &EmaSchedule<T>,
    probes: &[Probe<T>],
    sched: &NoiseSchedule<T>,
) -> Result<TrainRecord<T>> {
    if probes.is_empty() {
        bail_arg!("training batch is empty");
    }
    let mut total = T::zero();
    let mut grads = Gradients::default();
    for p in probes {
        let (l, g) = net.noise_loss(&net.params, p, sched, T::zero())?;
        total += l;
        grads.merge(&g);
    }
    let inv = T::one() / T::count(probes.len());
    grads.scale(inv);
    let grad_norm = opt.apply(&mut net.params, &mut grads)?;
    let k = (opt.step_count() as usize).min(ema_schedule.total_steps);
    let gamma = ema_schedule.gamma(k)?;
    ema_update(ema, &net.params, gamma)?;
    Ok(TrainRecord { step: opt.step_count(), loss: total * inv, grad_norm, gamma })
}

/// `shadow ← γ·shadow + (1−γ)·live`.
pub fn ema_update<T: Scalar>(ema: &mut EmaParams<T>, live: &ParamStore<T>, gamma: T) -> Result<()> {
    ema.update(live, gamma)
}

/// Mean L1 noise loss over fixed probes, without gradients' side effects.
pub fn evaluate_loss<T: Scalar>(net: &Denoiser<T>, probes: &[Probe<T>], sched: &NoiseSchedule<T>) -> Result<T> {
    if probes.is_empty() {
        bail_arg!("no probes to evaluate");
    }
    let mut total = T::zero();
    for p in probes {
        let x_t = noise_with(&p.x0.to_model_domain(), sched.alpha_bar(p.t), &p.eps)?;
        let pred = net.forward(&x_t, p.t)?;
        let diff: T = pred.data().iter().zip(p.eps.data()).map(|(&a, &b)| (a - b).abs()).sum();
        total += diff / T::count(pred.len());
    }
    Ok(total / T::count(probes.len()))
}

/// Smoothing for the absolute value during gradient checks only.
pub const GRAD_CHECK_DELTA: f64 = 1e-8;

/// Central-difference check of the smoothed L1 loss on one probe, sampling
/// `per_tensor` weights from every parameter tensor.
pub fn grad_check<T: Scalar, R: Rng + ?Sized>(
    net: &Denoiser<T>,
    probe: &Probe<T>,
    sched: &NoiseSchedule<T>,
    epsilon: T,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    if !(epsilon >= T::lit(1e-6) && epsilon <= T::lit(1e-3)) {
        bail_arg!("epsilon must lie in [1e-6, 1e-3], got {epsilon}");
    }
    let mut store = net.params.clone();
    let delta = T::lit(GRAD_CHECK_DELTA);
    check_gradients(&mut store, |s| net.noise_loss(s, probe, sched, delta), epsilon, per_tensor, rng)
}

/// `step,loss,grad_norm,gamma_k` rows.
pub fn loss_csv<T: Scalar>(records: &[TrainRecord<T>]) -> String {
    let mut out = String::from("step,loss,grad_norm,gamma_k\n");
    for r in records {
        writeln!(out, "{},{},{},{}", r.step, r.loss, r.grad_norm, r.gamma).expect("write to string");
    }
    out
}
