//! Pixel grids, PNG I/O, Lanczos resampling and region crops.

mod lanczos;
mod png_io;

pub use lanczos::{lanczos_kernel, resize_lanczos, DEFAULT_LOBES};
pub use png_io::{decode_png, encode_png, load_png, save_png, BitDepth};

use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::{Result, Scalar};

/// Width × height of an image, both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            bail_arg!("resolution must be positive, got {width}x{height}");
        }
        Ok(Self { width, height })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for Resolution {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| crate::Error::Argument(format!("expected WxH, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| crate::Error::Argument(format!("bad resolution {s:?}: {e}")))
        };
        Resolution::new(parse(w)?, parse(h)?)
    }
}

/// Row-major `height × width × channels` grid of intensities.
///
/// Samples are interleaved per pixel. Display-domain grids live in `[0, 1]`;
/// the diffusion code also stores `[-1, 1]` model-domain values here.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            bail_arg!("channels must be 1 or 3, got {channels}");
        }
        if data.len() != height * width * channels {
            bail_arg!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            );
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid channel count")
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1, T::zero())
    }

    /// Single-channel grid from a generator `f(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            width: self.width,
            height: self.height,
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if !self.same_shape(other) {
            bail_arg!(
                "shape mismatch: {}x{}x{} vs {}x{}x{}",
                self.height,
                self.width,
                self.channels,
                other.height,
                other.width,
                other.channels
            );
        }
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// Same shape, new samples. Panics if the length differs.
    pub fn with_data(&self, data: Vec<T>) -> Self {
        assert_eq!(data.len(), self.data.len(), "sample count must match shape");
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// `[0,1]` display domain to `[-1,1]` model domain.
    pub fn to_model_domain(&self) -> Self {
        let two = T::lit(2.0);
        self.map(|v| two * v - T::one())
    }

    /// `[-1,1]` model domain back to display, clamped to `[0,1]`.
    pub fn to_display_domain(&self) -> Self {
        let half = T::lit(0.5);
        self.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()))
    }

    /// Averages colour channels into one.
    pub fn to_grayscale(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let c = T::count(self.channels);
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().copied().sum::<T>() / c)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn replicate_channels(&self, channels: usize) -> Result<Self> {
        if self.channels != 1 {
            bail_arg!("replication expects a single-channel grid");
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        Self::new(self.height, self.width, channels, data)
    }

    pub fn cast<U: Scalar>(&self) -> ImageGrid<U> {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Exact copy of the `w × h` region whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            bail_arg!(
                "crop rectangle ({x0},{y0},{w},{h}) outside {}x{} grid",
                self.width,
                self.height
            );
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self::new(h, w, c, data)
    }

    pub fn pixel_stats(&self) -> Result<PixelStats<T>> {
        PixelStats::of(&self.data)
    }
}

/// Population statistics over every sample of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelStats<T> {
    pub mean: T,
    pub std: T,
    pub min: T,
    pub max: T,
}

impl<T: Scalar> PixelStats<T> {
    pub fn of(values: &[T]) -> Result<Self> {
        if values.is_empty() {
            bail_arg!("statistics of an empty grid");
        }
        let n = T::count(values.len());
        let mean = values.iter().copied().sum::<T>() / n;
        let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let (min, max) = values
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Self {
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }
}
