//! Pixel-domain JPEG round trip: 8×8 DCT, quantize, dequantize, inverse DCT.
//! There is no bitstream; only the quantization loss is reproduced.

use crate::{ImageGrid, Scalar};

/// Baseline luminance quantization table, row-major.
const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled the way the IJG encoder does for `quality` in 1..=100.
pub fn quant_table(quality: u8) -> [u16; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &base) in out.iter_mut().zip(&LUMA_TABLE) {
        *o = ((u32::from(base) * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let c = if u == 0 { (0.125f64).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    b
}

fn transform(block: &[f64; 64], basis: &[[f64; 8]; 8], inverse: bool) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    let mut out = [0.0; 64];
    let m = |a: usize, b: usize| if inverse { basis[b][a] } else { basis[a][b] };
    for r in 0..8 {
        for k in 0..8 {
            tmp[r * 8 + k] = (0..8).map(|x| m(k, x) * block[r * 8 + x]).sum();
        }
    }
    for c in 0..8 {
        for k in 0..8 {
            out[k * 8 + c] = (0..8).map(|y| m(k, y) * tmp[y * 8 + c]).sum();
        }
    }
    out
}

/// Compresses each channel independently; partial edge blocks are padded by
/// edge replication. Output is clamped to `[0, 1]`.
pub fn jpeg_compress<T: Scalar>(grid: &ImageGrid<T>, quality: u8) -> ImageGrid<T> {
    let table = quant_table(quality);
    let basis = dct_basis();
    let (h, w, ch) = (grid.height(), grid.width(), grid.channels());
    let mut out = grid.data().to_vec();
    for c in 0..ch {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = grid.get(sy, sx, c).as_f64() * 255.0 - 128.0;
                    }
                }
                let mut coef = transform(&block, &basis, false);
                for (v, &q) in coef.iter_mut().zip(&table) {
                    let q = f64::from(q);
                    *v = (*v / q).round() * q;
                }
                let rec = transform(&coef, &basis, true);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        let v = ((rec[y * 8 + x] + 128.0) / 255.0).clamp(0.0, 1.0);
                        out[((by + y) * w + bx + x) * ch + c] = T::lit(v);
                    }
                }
            }
        }
    }
    grid.with_data(out)
}
