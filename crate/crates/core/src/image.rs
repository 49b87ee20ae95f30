//! Planar `C×H×W` image buffers and conversion to and from tensors and files.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Values in `[0, 1]`.
    Raw01,
    /// Values in `[-1, 1]`.
    Normalized,
}

/// A single image stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, range: ValueRange) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image values".into()));
        }
        let (lo, hi) = match range {
            ValueRange::Raw01 => (0.0, 1.0),
            ValueRange::Normalized => (-1.0, 1.0),
        };
        if data.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::validation(
                "image",
                format!("values outside [{lo}, {hi}] for {range:?} image"),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width], range)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Maps `[0, 1]` to `[-1, 1]` via `v ↦ 2v − 1`. Already-normalized images are returned unchanged.
    pub fn normalized(&self) -> Self {
        match self.range {
            ValueRange::Normalized => self.clone(),
            ValueRange::Raw01 => Self {
                data: self.data.iter().map(|&v| normalize_value(v)).collect(),
                range: ValueRange::Normalized,
                ..*self
            },
        }
    }

    /// Inverse of [`normalized`](Self::normalized), clamped into `[0, 1]`.
    pub fn denormalized(&self) -> Self {
        match self.range {
            ValueRange::Raw01 => self.clone(),
            ValueRange::Normalized => Self {
                data: self.data.iter().map(|&v| denormalize_value(v)).collect(),
                range: ValueRange::Raw01,
                ..*self
            },
        }
    }

    /// Luma using the 0.299/0.587/0.114 weights; single-channel images are returned as-is.
    pub fn grayscale(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        if self.channels < 3 {
            return self.data[..plane].iter().map(|&v| v as f64).collect();
        }
        (0..plane)
            .map(|i| {
                0.299 * self.data[i] as f64
                    + 0.587 * self.data[plane + i] as f64
                    + 0.114 * self.data[2 * plane + i] as f64
            })
            .collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    /// Bilinear resize (triangle filter). Returns a copy when the size already matches.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("size", "target size must be positive"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let plane = self.height * self.width;
        let mut data = vec![0.0f32; self.channels * width * height];
        for c in 0..self.channels {
            let src: ImageBuffer<image::Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
                self.width as u32,
                self.height as u32,
                self.data[c * plane..(c + 1) * plane].to_vec(),
            )
            .expect("plane length matches dimensions");
            let out = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
            data[c * width * height..(c + 1) * width * height].copy_from_slice(out.as_raw());
        }
        let (lo, hi) = match self.range {
            ValueRange::Raw01 => (0.0, 1.0),
            ValueRange::Normalized => (-1.0, 1.0),
        };
        for v in &mut data {
            *v = v.clamp(lo, hi);
        }
        Self::new(self.channels, height, width, data, self.range)
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px.0[c].clamp(0.0, 1.0);
            }
        }
        Self {
            channels: 3,
            height: h,
            width: w,
            data,
            range: ValueRange::Raw01,
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::ImageDecode {
            path: "<request body>".into(),
            message: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    /// 8-bit RGB rendering of a raw (or denormalized) three-channel image.
    pub fn to_rgb8(&self) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
        if self.channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels for RGB output, got {}",
                self.channels
            )));
        }
        let raw = self.denormalized();
        let plane = self.height * self.width;
        let mut buf = ImageBuffer::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            *px = Rgb([0, 1, 2].map(|c| (raw.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        Ok(buf)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()?.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// `1×C×H×W` tensor of the given dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads the first image of an `N×C×H×W` (or `C×H×W`) tensor.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Self> {
        let t = match t.rank() {
            4 => t.get(0)?,
            3 => t.clone(),
            r => return Err(Error::ShapeMismatch(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let (lo, hi) = match range {
            ValueRange::Raw01 => (0.0, 1.0),
            ValueRange::Normalized => (-1.0, 1.0),
        };
        let data = data.into_iter().map(|v| v.clamp(lo, hi)).collect();
        Self::new(c, h, w, data, range)
    }
}

pub fn normalize_value(v: f32) -> f32 {
    2.0 * v - 1.0
}

pub fn denormalize_value(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_normalized_values() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 1.5], ValueRange::Normalized).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![-1.0, 1.0], ValueRange::Normalized).is_ok());
    }

    #[test]
    fn rejects_zero_sized_images() {
        assert!(ImageTensor::new(3, 0, 4, vec![], ValueRange::Raw01).is_err());
    }

    #[test]
    fn png_round_trip_keeps_dimensions() {
        let img = ImageTensor::filled(3, 5, 7, 0.25, ValueRange::Raw01).unwrap();
        let decoded = ImageTensor::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(decoded.shape(), (3, 5, 7));
        assert!((decoded.at(1, 2, 3) - 64.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn flip_reverses_rows() {
        let img = ImageTensor::new(1, 1, 3, vec![0.1, 0.2, 0.3], ValueRange::Raw01).unwrap();
        assert_eq!(img.flip_horizontal().data(), &[0.3, 0.2, 0.1]);
    }

    proptest::proptest! {
        #[test]
        fn normalize_round_trip(v in 0.0f32..=1.0) {
            proptest::prop_assert!((denormalize_value(normalize_value(v)) - v).abs() <= 1e-6);
        }
    }
}
