use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::bail_arg;
use crate::{Error, ImageGrid, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => bail_arg!("bit depth must be 8 or 16, got {other}"),
        }
    }

    fn max_sample(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Reads a PNG; samples are divided by the type maximum. Alpha is dropped.
pub fn load_png<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageGrid<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<ImageGrid<T>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::Decode("palette was not expanded".into()));
        }
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.line_size * height]
            .chunks_exact(info.line_size)
            .flat_map(|row| {
                row[..width * src_channels * 2]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            })
            .collect(),
        png::BitDepth::Eight => buf[..info.line_size * height]
            .chunks_exact(info.line_size)
            .flat_map(|row| row[..width * src_channels].iter().map(|&b| b as f64 / 255.0))
            .collect(),
        // EXPAND widens sub-byte depths to 8 bits.
        other => return Err(Error::Decode(format!("unexpected bit depth {other:?}"))),
    };
    let data: Vec<T> = samples
        .chunks_exact(src_channels)
        .flat_map(|px| px[..keep].iter().map(|&v| T::lit(v)))
        .collect();
    ImageGrid::new(height, width, keep, data)
}

/// Quantizes with round-half-away-from-zero after clamping to `[0,1]`.
pub fn encode_png<T: Scalar>(grid: &ImageGrid<T>, depth: BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, grid.width() as u32, grid.height() as u32);
        enc.set_color(match grid.channels() {
            1 => png::ColorType::Grayscale,
            _ => png::ColorType::Rgb,
        });
        let max = depth.max_sample();
        let quant = |v: T| (v.as_f64().clamp(0.0, 1.0) * max).round();
        let bytes: Vec<u8> = match depth {
            BitDepth::Eight => {
                enc.set_depth(png::BitDepth::Eight);
                grid.data().iter().map(|&v| quant(v) as u8).collect()
            }
            BitDepth::Sixteen => {
                enc.set_depth(png::BitDepth::Sixteen);
                grid.data()
                    .iter()
                    .flat_map(|&v| (quant(v) as u16).to_be_bytes())
                    .collect()
            }
        };
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn save_png<T: Scalar>(grid: &ImageGrid<T>, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(grid, depth)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
