//! Plain loop kernels shared by the forward and backward passes.

use crate::Scalar;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a stride-1 "same" convolution with an odd square kernel.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    /// Source offset and valid output row/column ranges for one kernel tap.
    #[inline]
    fn ranges(&self, ky: usize, kx: usize) -> (isize, isize, usize, usize, usize, usize) {
        let pad = (self.k / 2) as isize;
        let dy = ky as isize - pad;
        let dx = kx as isize - pad;
        let y0 = (-dy).max(0) as usize;
        let y1 = (self.h as isize - dy).min(self.h as isize).max(0) as usize;
        let x0 = (-dx).max(0) as usize;
        let x1 = (self.w as isize - dx).min(self.w as isize).max(0) as usize;
        (dy, dx, y0, y1, x0, x1)
    }
}

pub fn conv_forward<T: Scalar>(g: ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    for co in 0..g.c_out {
        let o = &mut out[co * hw..(co + 1) * hw];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let xin = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[(co * g.c_in + ci) * kk + ky * g.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (dy, dx, y0, y1, x0, x1) = g.ranges(ky, kx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &xin[sy * g.w..(sy + 1) * g.w];
                        let dst = &mut o[y * g.w..(y + 1) * g.w];
                        let sx0 = (x0 as isize + dx) as usize;
                        for (d, &s) in dst[x0..x1].iter_mut().zip(&src[sx0..sx0 + (x1 - x0)]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    g: ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    if let Some(gb) = gb {
        for co in 0..g.c_out {
            gb[co] += gout[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
    }
    if let Some(gw) = gw {
        for co in 0..g.c_out {
            let go = &gout[co * hw..(co + 1) * hw];
            for ci in 0..g.c_in {
                let xin = &x[ci * hw..(ci + 1) * hw];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let (dy, dx, y0, y1, x0, x1) = g.ranges(ky, kx);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let src = &xin[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                            let gr = &go[y * g.w + x0..y * g.w + x1];
                            for (&a, &b) in src.iter().zip(gr) {
                                acc += a * b;
                            }
                        }
                        gw[(co * g.c_in + ci) * kk + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        for co in 0..g.c_out {
            let go = &gout[co * hw..(co + 1) * hw];
            for ci in 0..g.c_in {
                let gxi = &mut gx[ci * hw..(ci + 1) * hw];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[(co * g.c_in + ci) * kk + ky * g.k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (dy, dx, y0, y1, x0, x1) = g.ranges(ky, kx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let dst = &mut gxi[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                            let gr = &go[y * g.w + x0..y * g.w + x1];
                            for (d, &b) in dst.iter_mut().zip(gr) {
                                *d += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        gemm_nn(&a, &b, &mut nn, 2, 3, 4);
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect(); // 4x3
        let mut nt = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut nt, 2, 3, 4);
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect(); // 3x2
        let mut tn = vec![0.0; 8];
        gemm_tn(&at, &b, &mut tn, 2, 3, 4);
        for i in 0..8 {
            assert!((nn[i] - nt[i]).abs() < 1e-12 && (nn[i] - tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeom { c_in: 2, c_out: 3, h: 4, w: 5, k: 3 };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).cos()).collect();
        let w: Vec<f64> = (0..54).map(|v| (v as f64 * 0.11).sin()).collect();
        let b = [0.1, -0.2, 0.3];
        let mut out = vec![0.0; 60];
        conv_forward(g, &x, &w, Some(&b), &mut out);
        for co in 0..3 {
            for y in 0..4i64 {
                for xx in 0..5i64 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    acc += w[((co * 2 + ci) * 9) + (ky * 3 + kx) as usize]
                                        * x[ci * 20 + (sy * 5 + sx) as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - out[co * 20 + (y * 5 + xx) as usize]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(800.0f64).is_finite() && softplus(-800.0f64) >= 0.0);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }
}
