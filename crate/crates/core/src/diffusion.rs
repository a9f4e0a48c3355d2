//! Forward noising, DDPM/DDIM reverse steps and the sampling loop.
//!
//! All reverse-process math runs in the model domain `[-1, 1]`; display
//! grids are mapped in on entry and clamped back to `[0, 1]` on exit.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::bail_arg;
use crate::rng::{normal_vec, rng_from_seed};
use crate::schedule::ddim_subsequence;
use crate::{Error, ImageGrid, NoiseSchedule, Resolution, Result, Scalar};

/// Whether a predictor may be evaluated from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Shared,
    SingleThreaded,
}

/// `eps_hat(x_t, t)`: predicted noise with the same shape as `x_t`.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, x_t: &ImageGrid<T>, t: usize) -> Result<ImageGrid<T>>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

impl<T: Scalar, P: NoisePredictor<T> + ?Sized> NoisePredictor<T> for &P {
    fn predict(&self, x_t: &ImageGrid<T>, t: usize) -> Result<ImageGrid<T>> {
        (**self).predict(x_t, t)
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig<T> {
    /// 0 gives the deterministic DDIM path, 1 matches ancestral sampling.
    pub eta: T,
    pub inference_steps: usize,
    /// Clamp the predicted clean image to `[-1, 1]` inside every step.
    pub clip_denoised: bool,
}

impl<T: Scalar> Default for SamplerConfig<T> {
    fn default() -> Self {
        Self {
            eta: T::zero(),
            inference_steps: 250,
            clip_denoised: true,
        }
    }
}

/// `sqrt(abar)·x0 + sqrt(1 - abar)·eps` in the model domain.
pub fn noise_with<T: Scalar>(x0: &ImageGrid<T>, alpha_bar: T, eps: &ImageGrid<T>) -> Result<ImageGrid<T>> {
    let (a, b) = (alpha_bar.sqrt(), (T::one() - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Noises a display-domain image to timestep `t`.
///
/// Returns the model-domain `x_t` and the standard normal draw used.
pub fn forward_noise<T: Scalar, R: Rng + ?Sized>(
    x0: &ImageGrid<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<(ImageGrid<T>, ImageGrid<T>)> {
    sched.check_timestep(t)?;
    let x0 = x0.to_model_domain();
    let eps = x0.with_data(normal_vec(rng, x0.len()));
    let x_t = noise_with(&x0, sched.alpha_bar(t), &eps)?;
    Ok((x_t, eps))
}

/// `(x_t - sqrt(1 - abar)·eps_hat) / sqrt(abar)`.
pub fn predict_x0<T: Scalar>(
    x_t: &ImageGrid<T>,
    eps_hat: &ImageGrid<T>,
    alpha_bar: T,
    clip: bool,
) -> Result<ImageGrid<T>> {
    let (sa, sb) = (alpha_bar.sqrt(), (T::one() - alpha_bar).sqrt());
    let x0 = x_t.zip_map(eps_hat, |x, e| (x - sb * e) / sa)?;
    Ok(if clip {
        x0.map(|v| v.max(-T::one()).min(T::one()))
    } else {
        x0
    })
}

/// DDIM noise scale for the jump `t -> t_prev`.
pub fn ddim_sigma<T: Scalar>(sched: &NoiseSchedule<T>, t: usize, t_prev: usize, eta: T) -> T {
    let (a_t, a_p) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let ratio = ((T::one() - a_p) / (T::one() - a_t)).max(T::zero());
    let inner = (T::one() - a_t / a_p).max(T::zero());
    eta * ratio.sqrt() * inner.sqrt()
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` lands on clean data).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar, R: Rng + ?Sized>(
    x_t: &ImageGrid<T>,
    t: usize,
    t_prev: usize,
    eps_hat: &ImageGrid<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig<T>,
    rng: &mut R,
) -> Result<ImageGrid<T>> {
    sched.check_timestep(t)?;
    if t_prev >= t {
        bail_arg!("DDIM step needs t > t_prev, got t={t}, t_prev={t_prev}");
    }
    if !x_t.same_shape(eps_hat) {
        bail_arg!("predicted noise shape differs from x_t");
    }
    let a_t = sched.alpha_bar(t);
    let a_p = sched.alpha_bar(t_prev);
    let sigma = ddim_sigma(sched, t, t_prev, cfg.eta);
    let radicand = T::one() - a_p - sigma * sigma;
    if radicand < -T::lit(1e-12) {
        return Err(Error::Numeric(format!(
            "DDIM direction radicand {radicand} < 0 at t={t} (eta={})",
            cfg.eta
        )));
    }
    let dir = radicand.max(T::zero()).sqrt();
    let x0 = predict_x0(x_t, eps_hat, a_t, cfg.clip_denoised)?;
    let sa_p = a_p.sqrt();
    let mut out: Vec<T> = x0
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| sa_p * x + dir * e)
        .collect();
    if sigma > T::zero() {
        let z: Vec<T> = normal_vec(rng, out.len());
        for (o, z) in out.iter_mut().zip(z) {
            *o += sigma * z;
        }
    }
    Ok(x_t.with_data(out))
}

/// Ancestral step `t -> t-1` with posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
pub fn ddpm_step<T: Scalar, R: Rng + ?Sized>(
    x_t: &ImageGrid<T>,
    t: usize,
    eps_hat: &ImageGrid<T>,
    sched: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<ImageGrid<T>> {
    if t == 0 {
        bail_arg!("DDPM step from t=0");
    }
    sched.check_timestep(t)?;
    if !x_t.same_shape(eps_hat) {
        bail_arg!("predicted noise shape differs from x_t");
    }
    let var = ddpm_posterior_variance(sched, t);
    let (beta, alpha, a_t) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
    let coef = beta / (T::one() - a_t).sqrt();
    let inv_sqrt_alpha = T::one() / alpha.sqrt();
    let mut out: Vec<T> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if var > T::zero() {
        let sd = var.sqrt();
        let z: Vec<T> = normal_vec(rng, out.len());
        for (o, z) in out.iter_mut().zip(z) {
            *o += sd * z;
        }
    }
    Ok(x_t.with_data(out))
}

pub fn ddpm_posterior_variance<T: Scalar>(sched: &NoiseSchedule<T>, t: usize) -> T {
    sched.beta(t) * (T::one() - sched.alpha_bar(t - 1)) / (T::one() - sched.alpha_bar(t))
}

/// Runs the reverse walk and returns the unclamped model-domain result.
pub fn sample_raw<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig<T>,
    shape: Resolution,
    rng: &mut R,
) -> Result<ImageGrid<T>> {
    if cfg.inference_steps > sched.steps() {
        bail_arg!(
            "inference steps {} exceed schedule length {}",
            cfg.inference_steps,
            sched.steps()
        );
    }
    let seq = ddim_subsequence(sched.steps(), cfg.inference_steps)?;
    let mut x = ImageGrid::new(shape.height, shape.width, 1, normal_vec(rng, shape.pixels()))?;
    for i in (0..seq.len()).rev() {
        let t = seq[i];
        let t_prev = if i == 0 { 0 } else { seq[i - 1] };
        let eps = pred.predict(&x, t)?;
        if !eps.same_shape(&x) {
            bail_arg!("predictor changed the grid shape at t={t}");
        }
        x = ddim_step(&x, t, t_prev, &eps, sched, cfg, rng)?;
    }
    Ok(x)
}

/// Draws one display-domain image in `[0, 1]`.
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig<T>,
    shape: Resolution,
    rng: &mut R,
) -> Result<ImageGrid<T>> {
    Ok(sample_raw(pred, sched, cfg, shape, rng)?.to_display_domain())
}

/// One display-domain sample per seed, in seed order.
///
/// Uses scoped worker threads when the predictor allows shared evaluation.
pub fn sample_seeds<T: Scalar, P: NoisePredictor<T> + Sync + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig<T>,
    shape: Resolution,
    seeds: &[u64],
) -> Result<Vec<ImageGrid<T>>> {
    let one = |seed: u64| sample(pred, sched, cfg, shape, &mut rng_from_seed(seed));
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(seeds.len().max(1));
    if pred.concurrency() == Concurrency::SingleThreaded || workers <= 1 {
        return seeds.iter().map(|&s| one(s)).collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| one(s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("sampler worker panicked")?);
        }
        Ok(out)
    })
}

/// Bayes-optimal noise predictor for data drawn from `N(mu, s2·I)` in the model domain.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianPredictor<T> {
    mu: ImageGrid<T>,
    s2: T,
    sched: NoiseSchedule<T>,
}

impl<T: Scalar> AnalyticGaussianPredictor<T> {
    pub fn new(mu: ImageGrid<T>, s2: T, sched: NoiseSchedule<T>) -> Result<Self> {
        if !(s2 >= T::zero()) {
            bail_arg!("data variance must be nonnegative, got {s2}");
        }
        Ok(Self { mu, s2, sched })
    }
}

/// Convenience constructor mirroring the other module-level operations.
pub fn analytic_gaussian_predictor<T: Scalar>(
    mu: ImageGrid<T>,
    s2: T,
    sched: &NoiseSchedule<T>,
) -> Result<AnalyticGaussianPredictor<T>> {
    AnalyticGaussianPredictor::new(mu, s2, sched.clone())
}

impl<T: Scalar> NoisePredictor<T> for AnalyticGaussianPredictor<T> {
    fn predict(&self, x_t: &ImageGrid<T>, t: usize) -> Result<ImageGrid<T>> {
        self.sched.check_timestep(t)?;
        if !x_t.same_shape(&self.mu) {
            bail_arg!("oracle mean shape differs from x_t");
        }
        let a = self.sched.alpha_bar(t);
        let (sa, sb) = (a.sqrt(), (T::one() - a).sqrt());
        let denom = a * self.s2 + T::one() - a;
        x_t.zip_map(&self.mu, |x, m| sb * (x - sa * m) / denom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow<T> {
    pub t: usize,
    pub mean: T,
    pub std: T,
}

/// Display-domain pixel statistics of `x_t` at each probe timestep (`t = 0` is `x0`).
pub fn noising_diagnostics<T: Scalar, R: Rng + ?Sized>(
    x0: &ImageGrid<T>,
    sched: &NoiseSchedule<T>,
    probe_ts: &[usize],
    rng: &mut R,
) -> Result<Vec<DiagnosticRow<T>>> {
    probe_ts
        .iter()
        .map(|&t| {
            let shown = if t == 0 {
                x0.clone()
            } else {
                forward_noise(x0, t, sched, rng)?.0.to_display_domain()
            };
            let s = shown.pixel_stats()?;
            Ok(DiagnosticRow {
                t,
                mean: s.mean,
                std: s.std,
            })
        })
        .collect()
}

pub fn diagnostics_csv<T: Scalar>(rows: &[DiagnosticRow<T>]) -> String {
    let mut s = String::from("t,mean,std\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.t, r.mean, r.std);
    }
    s
}
