//! Index maps for window tiling, head splitting and pixel shuffling. Each
//! map feeds [`Graph::gather`], so every rearrangement is differentiable.

use std::sync::Arc;

use crate::error::bail_arg;
use crate::nn::{Graph, Tensor, Var};
use crate::{Result, Scalar};

/// Tiling of an `h × w` map into `window × window` tiles; the last row and
/// column of tiles are padded by clamping to the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, window: usize) -> Result<Self> {
        if window == 0 || h == 0 || w == 0 {
            bail_arg!("window {window} over {w}x{h} map");
        }
        Ok(Self {
            h,
            w,
            window,
            rows: h.div_ceil(window),
            cols: w.div_ceil(window),
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.rows * self.window, self.cols * self.window)
    }

    /// Gather map to `[windows, (window + 2·pad)², c]`. Tiles start every
    /// `window` pixels and extend `pad` pixels beyond their edges; `src(y, x, ch)`
    /// gives the flat source index of a feature.
    pub fn partition_index(&self, c: usize, pad: usize, src: impl Fn(usize, usize, usize) -> usize) -> Vec<usize> {
        let side = self.window + 2 * pad;
        let mut idx = Vec::with_capacity(self.count() * side * side * c);
        for wy in 0..self.rows {
            for wx in 0..self.cols {
                for i in 0..side {
                    let y = ((wy * self.window + i) as isize - pad as isize).clamp(0, self.h as isize - 1) as usize;
                    for j in 0..side {
                        let x = ((wx * self.window + j) as isize - pad as isize).clamp(0, self.w as isize - 1) as usize;
                        for ch in 0..c {
                            idx.push(src(y, x, ch));
                        }
                    }
                }
            }
        }
        idx
    }

    /// Flat index into `[windows, window², c]` holding pixel `(y, x)`, channel `ch`.
    pub fn token_of(&self, y: usize, x: usize, ch: usize, c: usize) -> usize {
        let win = (y / self.window) * self.cols + x / self.window;
        let pos = (y % self.window) * self.window + x % self.window;
        (win * self.window * self.window + pos) * c + ch
    }
}

/// Splits the channel axis of `[b, l, heads·d]` into `[b·heads, l, d]`.
pub fn split_heads_index(b: usize, l: usize, c: usize, heads: usize) -> Vec<usize> {
    let d = c / heads;
    let mut idx = Vec::with_capacity(b * l * c);
    for bi in 0..b {
        for h in 0..heads {
            for li in 0..l {
                for j in 0..d {
                    idx.push((bi * l + li) * c + h * d + j);
                }
            }
        }
    }
    idx
}

/// Inverse of [`split_heads_index`].
pub fn merge_heads_index(b: usize, l: usize, c: usize, heads: usize) -> Vec<usize> {
    let d = c / heads;
    let mut idx = Vec::with_capacity(b * l * c);
    for bi in 0..b {
        for li in 0..l {
            for h in 0..heads {
                for j in 0..d {
                    idx.push(((bi * heads + h) * l + li) * d + j);
                }
            }
        }
    }
    idx
}

/// `[c·s², h, w]` → `[c, s·h, s·w]` with `out[c, s·y+i, s·x+j] = in[c·s² + s·i + j, y, x]`.
pub fn pixel_shuffle_index(c_out: usize, h: usize, w: usize, s: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c_out * s * s * h * w);
    for c in 0..c_out {
        for oy in 0..h * s {
            for ox in 0..w * s {
                let ch = c * s * s + (oy % s) * s + ox % s;
                idx.push((ch * h + oy / s) * w + ox / s);
            }
        }
    }
    idx
}

/// `[c, s·h, s·w]` → `[c·s², h, w]`.
pub fn pixel_unshuffle_index(c_out: usize, h: usize, w: usize, s: usize) -> Vec<usize> {
    let fwd = pixel_shuffle_index(c_out, h, w, s);
    let mut inv = vec![0; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        s => bail_arg!("expected a [c, h, w] feature grid, got {s:?}"),
    }
}

/// Tiles a `[c, h, w]` grid into `[windows, window², c]`, edge-padding partial tiles.
pub fn window_partition<T: Scalar>(features: &Tensor<T>, window: usize) -> Result<(Tensor<T>, WindowLayout)> {
    let (c, h, w) = chw(features.shape())?;
    let layout = WindowLayout::new(h, w, window)?;
    let idx = layout.partition_index(c, 0, |y, x, ch| (ch * h + y) * w + x);
    let data = idx.iter().map(|&i| features.data()[i]).collect();
    Ok((Tensor::new(vec![layout.count(), window * window, c], data)?, layout))
}

/// Inverse of [`window_partition`], cropping the padding.
pub fn window_merge<T: Scalar>(windows: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    let c = match windows.shape() {
        [n, l, c] if *n == layout.count() && *l == layout.window * layout.window => *c,
        s => bail_arg!("window tensor {s:?} does not match layout {layout:?}"),
    };
    let mut data = Vec::with_capacity(c * layout.h * layout.w);
    for ch in 0..c {
        for y in 0..layout.h {
            for x in 0..layout.w {
                data.push(windows.data()[layout.token_of(y, x, ch, c)]);
            }
        }
    }
    Tensor::new(vec![c, layout.h, layout.w], data)
}

/// Rearranges channels into space: `(c·s², h, w) → (c, s·h, s·w)`.
pub fn pixel_shuffle_upsample<T: Scalar>(g: &mut Graph<T>, x: Var, scale: usize) -> Result<Var> {
    let (c, h, w) = chw(g.shape(x))?;
    if scale == 0 || c % (scale * scale) != 0 {
        bail_arg!("{c} channels not divisible by scale² = {}", scale * scale);
    }
    let c_out = c / (scale * scale);
    let idx: Arc<[usize]> = pixel_shuffle_index(c_out, h, w, scale).into();
    g.gather(x, idx, vec![c_out, h * scale, w * scale])
}
