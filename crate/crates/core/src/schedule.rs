//! Noise schedules, DDIM timestep subsequences and the cosine EMA ramp.
//!
//! Timesteps are 1-based: `t = 1..=T`. `alpha_bar(0)` is defined as 1 so the
//! final reverse step can land on clean data.

use std::fmt::Write as _;

use crate::error::bail_arg;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind<T> {
    Cosine { offset: T },
    Linear { beta_start: T, beta_end: T },
    /// Rebuilt from an explicit beta list.
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    kind: ScheduleKind<T>,
    beta_min: T,
    beta_max: T,
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Builds `alphas` and the cumulative product from a beta list.
    pub fn from_betas(kind: ScheduleKind<T>, betas: Vec<T>, beta_min: T, beta_max: T) -> Result<Self> {
        if betas.len() < 2 {
            bail_arg!("schedule needs at least 2 steps, got {}", betas.len());
        }
        if !(beta_min >= T::zero() && beta_min < beta_max && beta_max < T::one()) {
            bail_arg!("need 0 <= beta_min < beta_max < 1, got [{beta_min}, {beta_max}]");
        }
        if let Some(b) = betas.iter().find(|&&b| !(b >= beta_min && b <= beta_max)) {
            bail_arg!("beta {b} outside [{beta_min}, {beta_max}]");
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = T::one();
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            beta_min,
            beta_max,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Cosine schedule: `abar(t) = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
    /// Betas are clipped to `[beta_min, beta_max]` and the cumulative product is
    /// rebuilt from the clipped values.
    pub fn cosine(steps: usize, offset: T, beta_min: T, beta_max: T) -> Result<Self> {
        if steps < 2 {
            bail_arg!("cosine schedule needs T >= 2, got {steps}");
        }
        if !(offset > T::zero()) {
            bail_arg!("cosine offset must be positive, got {offset}");
        }
        if !(beta_min >= T::zero() && beta_min < beta_max && beta_max < T::one()) {
            bail_arg!("need 0 <= beta_min < beta_max < 1, got [{beta_min}, {beta_max}]");
        }
        let big_t = T::count(steps);
        let half_pi = T::FRAC_PI_2();
        let f = |t: usize| {
            let phase = (T::count(t) / big_t + offset) / (T::one() + offset) * half_pi;
            let c = phase.cos();
            c * c
        };
        let f0 = f(0);
        let raw: Vec<T> = (0..=steps).map(|t| f(t) / f0).collect();
        let betas = (1..=steps)
            .map(|t| {
                let b = T::one() - raw[t] / raw[t - 1];
                b.max(beta_min).min(beta_max)
            })
            .collect();
        Self::from_betas(ScheduleKind::Cosine { offset }, betas, beta_min, beta_max)
    }

    /// Betas linearly interpolated from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: T, beta_end: T) -> Result<Self> {
        if steps < 2 {
            bail_arg!("linear schedule needs T >= 2, got {steps}");
        }
        if !(beta_start > T::zero() && beta_start <= beta_end && beta_end < T::one()) {
            bail_arg!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})");
        }
        let last = T::count(steps - 1);
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * T::count(i) / last)
            .collect();
        let upper = if beta_end > beta_start { beta_end } else { beta_start + T::epsilon() };
        Self::from_betas(
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            },
            betas,
            T::zero().min(beta_start),
            upper,
        )
    }

    pub fn kind(&self) -> ScheduleKind<T> {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_bounds(&self) -> (T, T) {
        (self.beta_min, self.beta_max)
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            bail_arg!("timestep {t} outside [1, {}]", self.steps());
        }
        Ok(())
    }

    /// Plain-text key/value dump: parameters followed by the full beta array.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = noise-schedule/1");
        match self.kind {
            ScheduleKind::Cosine { offset } => {
                let _ = writeln!(s, "kind = cosine");
                let _ = writeln!(s, "s = {offset}");
            }
            ScheduleKind::Linear { beta_start, beta_end } => {
                let _ = writeln!(s, "kind = linear");
                let _ = writeln!(s, "beta_start = {beta_start}");
                let _ = writeln!(s, "beta_end = {beta_end}");
            }
            ScheduleKind::Explicit => {
                let _ = writeln!(s, "kind = explicit");
            }
        }
        let _ = writeln!(s, "T = {}", self.steps());
        let _ = writeln!(s, "beta_min = {}", self.beta_min);
        let _ = writeln!(s, "beta_max = {}", self.beta_max);
        for (i, b) in self.betas.iter().enumerate() {
            let _ = writeln!(s, "beta.{} = {b}", i + 1);
        }
        s
    }

    /// Rebuilds a schedule from [`to_dump`](Self::to_dump) output.
    pub fn from_dump(text: &str) -> Result<Self> {
        let mut steps = None;
        let (mut lo, mut hi) = (None, None);
        let mut betas: Vec<Option<T>> = Vec::new();
        let parse = |v: &str| {
            v.parse::<T>()
                .map_err(|_| Error::Format(format!("bad number {v:?}")))
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key = value: {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "T" => {
                    let n: usize = v.parse().map_err(|_| Error::Format(format!("bad T {v:?}")))?;
                    betas.resize(n, None);
                    steps = Some(n);
                }
                "beta_min" => lo = Some(parse(v)?),
                "beta_max" => hi = Some(parse(v)?),
                _ => {
                    if let Some(idx) = k.strip_prefix("beta.") {
                        let i: usize = idx
                            .parse()
                            .map_err(|_| Error::Format(format!("bad index {idx:?}")))?;
                        let slot = betas
                            .get_mut(i.wrapping_sub(1))
                            .ok_or_else(|| Error::Format(format!("beta index {i} out of range")))?;
                        *slot = Some(parse(v)?);
                    }
                }
            }
        }
        let steps = steps.ok_or_else(|| Error::Format("missing T".into()))?;
        let betas: Vec<T> = betas
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.ok_or_else(|| Error::Format(format!("missing beta.{}", i + 1))))
            .collect::<Result<_>>()?;
        debug_assert_eq!(betas.len(), steps);
        let lo = lo.ok_or_else(|| Error::Format("missing beta_min".into()))?;
        let hi = hi.ok_or_else(|| Error::Format("missing beta_max".into()))?;
        Self::from_betas(ScheduleKind::Explicit, betas, lo, hi)
    }
}

/// Cosine ramp of the EMA decay from `gamma0` at step 0 to 1 at step `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaSchedule<T> {
    pub gamma0: T,
    pub total_steps: usize,
}

impl<T: Scalar> EmaSchedule<T> {
    pub fn new(gamma0: T, total_steps: usize) -> Result<Self> {
        if !(gamma0 >= T::zero() && gamma0 < T::one()) {
            bail_arg!("gamma0 must lie in [0, 1), got {gamma0}");
        }
        if total_steps == 0 {
            bail_arg!("EMA schedule needs at least one step");
        }
        Ok(Self {
            gamma0,
            total_steps,
        })
    }

    /// `1 - (1 - gamma0)·(cos(πk/K) + 1)/2`.
    pub fn gamma(&self, step: usize) -> Result<T> {
        ema_gamma(step, self)
    }
}

pub fn ema_gamma<T: Scalar>(step: usize, schedule: &EmaSchedule<T>) -> Result<T> {
    let total = schedule.total_steps;
    if step > total {
        bail_arg!("EMA step {step} beyond total {total}");
    }
    if step == total {
        return Ok(T::one());
    }
    let phase = T::PI() * T::count(step) / T::count(total);
    let half = T::lit(0.5);
    Ok(T::one() - (T::one() - schedule.gamma0) * (phase.cos() + T::one()) * half)
}

/// `inference_steps` strictly increasing, uniformly strided timesteps ending at `steps`.
pub fn ddim_subsequence(steps: usize, inference_steps: usize) -> Result<Vec<usize>> {
    if inference_steps == 0 || inference_steps > steps {
        bail_arg!("need 1 <= S <= T, got S={inference_steps}, T={steps}");
    }
    Ok((1..=inference_steps)
        .map(|i| i * steps / inference_steps)
        .collect())
}
