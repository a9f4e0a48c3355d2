//! Super-resolution objective: pixel L1, perceptual distance over a pluggable
//! feature extractor, the sigmoid GAN losses, and the adversarial step.

use std::fmt::Write as _;

use rand::Rng;

use crate::degradation::{pool_draw, PairPool};
use crate::error::bail_arg;
use crate::grid::{resize_lanczos, DEFAULT_LOBES};
use crate::nn::kernels::softplus;
use crate::nn::{grid_to_tensor, Gradients, Graph, OptimizerState, Tensor, Var};
use crate::rng::{normal_vec, rng_from_seed};
use crate::sr::{Discriminator, SrGenerator};
use crate::{Error, ImageGrid, Resolution, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, lambda3: 0.1 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2, lambda3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || l.iter().all(|&v| v == 0.0) {
            bail_arg!("loss weights must be nonnegative and not all zero, got {l:?}");
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(gen: &ImageGrid<T>, gt: &ImageGrid<T>) -> Result<T> {
    if !gen.same_shape(gt) {
        bail_arg!("l1 loss shape mismatch");
    }
    let s: T = gen.data().iter().zip(gt.data()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(s / T::count(gen.len()))
}

/// Deterministic differentiable image embedding at one or more layers.
pub trait FeatureExtractor<T: Scalar> {
    /// Feature maps for a `[c, h, w]` image already on the graph.
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>>;

    fn embed(&self, image: &ImageGrid<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let x = g.input(grid_to_tensor(image));
        let feats = self.features(&mut g, x)?;
        Ok(feats.into_iter().map(|f| g.value(f).clone()).collect())
    }
}

/// `φ = id`; the perceptual loss reduces to the pixel MSE.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        Ok(vec![image])
    }
}

/// Three fixed random 3×3 conv + SiLU + 2× average-pool stages; every stage
/// output is one feature layer.
#[derive(Debug, Clone)]
pub struct ToyExtractor<T> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ToyExtractor<T> {
    pub fn new(image_channels: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let widths = [image_channels, 8, 16, 16];
        let stages = widths
            .windows(2)
            .map(|w| {
                let n = w[1] * w[0] * 9;
                let std = T::lit((1.0 / (w[0] * 9) as f64).sqrt());
                let wt: Vec<T> = normal_vec::<T, _>(&mut rng, n).into_iter().map(|v| v * std).collect();
                let bias = normal_vec::<T, _>(&mut rng, w[1]).into_iter().map(|v| v * T::lit(0.1)).collect();
                (
                    Tensor::new(vec![w[1], w[0], 3, 3], wt).expect("shape"),
                    Tensor::new(vec![w[1]], bias).expect("shape"),
                )
            })
            .collect();
        Self { stages }
    }
}

impl<T: Scalar> FeatureExtractor<T> for ToyExtractor<T> {
    fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let mut h = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let (w, b) = (g.input(w.clone()), g.input(b.clone()));
            let y = g.conv2d(h, w, Some(b))?;
            let y = g.silu(y);
            let (hh, ww) = (g.shape(y)[1], g.shape(y)[2]);
            h = if hh % 2 == 0 && ww % 2 == 0 { g.avg_pool2(y)? } else { y };
            out.push(h);
        }
        Ok(out)
    }
}

/// Sum over layers of the mean squared feature difference, on the graph.
pub fn perceptual_loss_graph<T: Scalar, F: FeatureExtractor<T> + ?Sized>(
    g: &mut Graph<T>,
    phi: &F,
    gen: Var,
    gt: Var,
) -> Result<Var> {
    let a = phi.features(g, gen)?;
    let b = phi.features(g, gt)?;
    if a.len() != b.len() || a.is_empty() {
        bail_arg!("feature extractor returned inconsistent layer counts");
    }
    let mut total: Option<Var> = None;
    for (fa, fb) in a.into_iter().zip(b) {
        let d = g.sub(fa, fb)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("at least one layer"))
}

pub fn perceptual_loss<T: Scalar, F: FeatureExtractor<T> + ?Sized>(phi: &F, gen: &ImageGrid<T>, gt: &ImageGrid<T>) -> Result<T> {
    if !gen.same_shape(gt) {
        bail_arg!("perceptual loss shape mismatch");
    }
    let mut g = Graph::new();
    let (a, b) = (g.input(grid_to_tensor(gen)), g.input(grid_to_tensor(gt)));
    let l = perceptual_loss_graph(&mut g, phi, a, b)?;
    Ok(g.value(l).data()[0])
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>, n: usize) -> T {
    v.sum::<T>() / T::count(n.max(1))
}

/// `−(E[ln σ(d_real)] + E[ln(1 − σ(d_fake))])`, averaged over each map.
pub fn gan_loss_discriminator<T: Scalar>(d_real: &[T], d_fake: &[T]) -> T {
    mean(d_real.iter().map(|&r| softplus(-r)), d_real.len()) + mean(d_fake.iter().map(|&f| softplus(f)), d_fake.len())
}

/// Non-saturating generator loss `E[−ln σ(d_fake)]`.
pub fn gan_loss_generator<T: Scalar>(d_fake: &[T]) -> T {
    mean(d_fake.iter().map(|&f| softplus(-f)), d_fake.len())
}

/// `λ1·l1 + λ2·lp + λ3·lg`.
pub fn total_loss<T: Scalar>(w: &LossWeights, l1: T, lp: T, lg: T) -> T {
    T::lit(w.lambda1) * l1 + T::lit(w.lambda2) * lp + T::lit(w.lambda3) * lg
}

/// Loss components of one adversarial step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses<T> {
    pub step: u64,
    pub l1: T,
    pub lp: T,
    pub lg: T,
    pub total: T,
    pub d_loss: T,
}

/// `step,l1,lp,lg,total,d_loss` rows.
pub fn loss_trace_csv<T: Scalar>(rows: &[StepLosses<T>]) -> String {
    let mut out = String::from("step,l1,lp,lg,total,d_loss\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.step, r.l1, r.lp, r.lg, r.total, r.d_loss).expect("write to string");
    }
    out
}

/// Brings an LR image of any pool scale to the generator's input size.
pub fn lr_for_generator<T: Scalar>(lr: &ImageGrid<T>, hr: &ImageGrid<T>, scale: usize) -> Result<ImageGrid<T>> {
    if !hr.height().is_multiple_of(scale) || !hr.width().is_multiple_of(scale) {
        bail_arg!("HR {}x{} not divisible by generator scale {scale}", hr.width(), hr.height());
    }
    let target = Resolution::new(hr.width() / scale, hr.height() / scale)?;
    if lr.resolution() == target {
        return Ok(lr.clone());
    }
    resize_lanczos(lr, target, DEFAULT_LOBES)
}

struct GenLoss<T> {
    l1: T,
    lp: T,
    lg: T,
    total: T,
    grads: Gradients<T>,
}

fn generator_loss<T: Scalar, F: FeatureExtractor<T> + ?Sized>(
    gen: &SrGenerator<T>,
    disc: Option<&Discriminator<T>>,
    phi: &F,
    w: &LossWeights,
    hr: &ImageGrid<T>,
    lr: &ImageGrid<T>,
) -> Result<GenLoss<T>> {
    let mut g = Graph::new();
    let out = gen.build(&mut g, &gen.params, lr)?;
    let gt = g.input(grid_to_tensor(hr));
    if g.shape(out) != g.shape(gt) {
        bail_arg!("generator output {:?} does not match HR {:?}", g.shape(out), g.shape(gt));
    }
    let d = g.sub(out, gt)?;
    let a = g.abs(d, T::zero());
    let l1 = g.mean(a);
    let mut total = g.scale(l1, T::lit(w.lambda1));
    let mut lp_val = T::zero();
    if w.lambda2 > 0.0 {
        let lp = perceptual_loss_graph(&mut g, phi, out, gt)?;
        lp_val = g.value(lp).data()[0];
        let s = g.scale(lp, T::lit(w.lambda2));
        total = g.add(total, s)?;
    }
    let mut lg_val = T::zero();
    if let (Some(disc), true) = (disc, w.lambda3 > 0.0) {
        let logits = disc.build_frozen(&mut g, out)?;
        let neg = g.scale(logits, -T::one());
        let sp = g.softplus(neg);
        let lg = g.mean(sp);
        lg_val = g.value(lg).data()[0];
        let s = g.scale(lg, T::lit(w.lambda3));
        total = g.add(total, s)?;
    }
    let l1_val = g.value(l1).data()[0];
    let total_val = g.value(total).data()[0];
    if !total_val.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite generator loss (l1={l1_val}, lp={lp_val}, lg={lg_val})"
        )));
    }
    Ok(GenLoss { l1: l1_val, lp: lp_val, lg: lg_val, total: total_val, grads: g.backward(total)? })
}

/// Generator-only update on `total_loss` without an adversarial term.
pub fn supervised_train_step<T: Scalar, F: FeatureExtractor<T> + ?Sized>(
    gen: &mut SrGenerator<T>,
    opt: &mut OptimizerState<T>,
    phi: &F,
    w: &LossWeights,
    hr: &ImageGrid<T>,
    lr: &ImageGrid<T>,
) -> Result<StepLosses<T>> {
    let lr = lr_for_generator(lr, hr, gen.config().scale)?;
    let mut gl = generator_loss(gen, None, phi, w, hr, &lr)?;
    opt.apply(&mut gen.params, &mut gl.grads)?;
    Ok(StepLosses { step: opt.step_count(), l1: gl.l1, lp: gl.lp, lg: T::zero(), total: gl.total, d_loss: T::zero() })
}

/// Optimizers for both networks.
#[derive(Debug, Clone)]
pub struct AdversarialOptimizers<T> {
    pub gen: OptimizerState<T>,
    pub disc: OptimizerState<T>,
}

/// One discriminator update on (real HR, generated HR), then one generator
/// update on `total_loss`, for a given pair.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step_on_pair<T: Scalar, F: FeatureExtractor<T> + ?Sized>(
    gen: &mut SrGenerator<T>,
    disc: &mut Discriminator<T>,
    phi: &F,
    w: &LossWeights,
    opts: &mut AdversarialOptimizers<T>,
    hr: &ImageGrid<T>,
    lr: &ImageGrid<T>,
) -> Result<StepLosses<T>> {
    w.validate()?;
    let lr = lr_for_generator(lr, hr, gen.config().scale)?;
    let fake = {
        let mut g = Graph::new();
        let out = gen.build(&mut g, &gen.params, &lr)?;
        g.value(out).clone()
    };

    disc.refresh_spectral();
    let mut g = Graph::new();
    let real_in = g.input(grid_to_tensor(hr));
    let fake_in = g.input(fake);
    let d_real = disc.build(&mut g, &disc.params, real_in)?;
    let d_fake = disc.build(&mut g, &disc.params, fake_in)?;
    let neg = g.scale(d_real, -T::one());
    let a = g.softplus(neg);
    let a = g.mean(a);
    let b = g.softplus(d_fake);
    let b = g.mean(b);
    let d_loss = g.add(a, b)?;
    let d_val = g.value(d_loss).data()[0];
    if !d_val.is_finite() {
        return Err(Error::Numeric(format!("non-finite discriminator loss at step {}", opts.disc.step_count())));
    }
    let mut dg = g.backward(d_loss)?;
    opts.disc.apply(&mut disc.params, &mut dg)?;

    let mut gl = generator_loss(gen, Some(disc), phi, w, hr, &lr)?;
    opts.gen.apply(&mut gen.params, &mut gl.grads)?;
    Ok(StepLosses { step: opts.gen.step_count(), l1: gl.l1, lp: gl.lp, lg: gl.lg, total: gl.total, d_loss: d_val })
}

/// Draws a pair from the pool and runs [`adversarial_step_on_pair`].
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train_step<T: Scalar, F: FeatureExtractor<T> + ?Sized, R: Rng + ?Sized>(
    gen: &mut SrGenerator<T>,
    disc: &mut Discriminator<T>,
    pool: &PairPool,
    corpus: &[ImageGrid<T>],
    w: &LossWeights,
    opts: &mut AdversarialOptimizers<T>,
    phi: &F,
    rng: &mut R,
) -> Result<StepLosses<T>> {
    let pair = pool_draw(pool, corpus, rng)?;
    adversarial_step_on_pair(gen, disc, phi, w, opts, &pair.hr, &pair.lr)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<f64> {
    if !a.same_shape(b) {
        bail_arg!("psnr shape mismatch");
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
