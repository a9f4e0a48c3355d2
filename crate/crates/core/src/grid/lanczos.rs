use crate::error::bail_arg;
use crate::{ImageGrid, Resolution, Result, Scalar};

pub const DEFAULT_LOBES: usize = 3;

/// Lanczos window `sinc(x) * sinc(x / a)` on `|x| < a`.
pub fn lanczos_kernel<T: Scalar>(x: T, lobes: usize) -> T {
    let a = T::count(lobes);
    let ax = x.abs();
    if ax >= a {
        return T::zero();
    }
    if ax < T::lit(1e-12) {
        return T::one();
    }
    let pi = T::PI();
    let px = pi * x;
    a * px.sin() * (px / a).sin() / (px * px)
}

/// Normalized tap list for one output coordinate.
struct Taps<T> {
    start: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<T>,
}

fn axis_taps<T: Scalar>(src: usize, dst: usize, lobes: usize) -> Taps<T> {
    let scale = src as f64 / dst as f64;
    let filter_scale = scale.max(1.0);
    let support = lobes as f64 * filter_scale;
    let mut taps = Taps {
        start: Vec::with_capacity(dst + 1),
        indices: Vec::new(),
        weights: Vec::new(),
    };
    for i in 0..dst {
        taps.start.push(taps.indices.len());
        let center = (i as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).floor() as i64;
        let hi = (center + support).ceil() as i64;
        let mut row: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
        for j in lo..=hi {
            let w = lanczos_kernel((j as f64 - center) / filter_scale, lobes);
            if w != 0.0 {
                row.push((j.clamp(0, src as i64 - 1) as usize, w));
            }
        }
        let total: f64 = row.iter().map(|&(_, w)| w).sum();
        for (j, w) in row {
            taps.indices.push(j);
            taps.weights.push(T::lit(w / total));
        }
    }
    taps.start.push(taps.indices.len());
    taps
}

/// Separable Lanczos resampling with edge clamping; output clamped to `[0, 1]`.
pub fn resize_lanczos<T: Scalar>(
    grid: &ImageGrid<T>,
    target: Resolution,
    lobes: usize,
) -> Result<ImageGrid<T>> {
    if target.width == 0 || target.height == 0 {
        bail_arg!("resize target must be positive, got {target}");
    }
    if lobes < 2 {
        bail_arg!("lanczos needs at least 2 lobes, got {lobes}");
    }
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    if h == 0 || w == 0 {
        bail_arg!("cannot resize an empty grid");
    }
    let (th, tw) = (target.height, target.width);
    let src = grid.data();

    let hx = axis_taps::<T>(w, tw, lobes);
    let mut horiz = vec![T::zero(); h * tw * c];
    for y in 0..h {
        for x in 0..tw {
            let (a, b) = (hx.start[x], hx.start[x + 1]);
            for ch in 0..c {
                let mut acc = T::zero();
                for k in a..b {
                    acc += hx.weights[k] * src[(y * w + hx.indices[k]) * c + ch];
                }
                horiz[(y * tw + x) * c + ch] = acc;
            }
        }
    }

    let vy = axis_taps::<T>(h, th, lobes);
    let mut out = vec![T::zero(); th * tw * c];
    for y in 0..th {
        let (a, b) = (vy.start[y], vy.start[y + 1]);
        for x in 0..tw {
            for ch in 0..c {
                let mut acc = T::zero();
                for k in a..b {
                    acc += vy.weights[k] * horiz[(vy.indices[k] * tw + x) * c + ch];
                }
                out[(y * tw + x) * c + ch] = acc.max(T::zero()).min(T::one());
            }
        }
    }
    ImageGrid::new(th, tw, c, out)
}
