//! Mean structural similarity with an 11×11 Gaussian window (σ = 1.5).

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Dynamic range of raw images.
pub const DATA_RANGE: f64 = 1.0;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| kernel[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn plane(img: &ImageTensor) -> Vec<f64> {
    img.denormalized().grayscale()
}

/// SSIM map of two equally sized planes.
pub fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::ShapeMismatch(format!("SSIM planes must hold {h}x{w} values")));
    }
    // Images smaller than the window use the largest odd window that fits.
    let mut size = WINDOW.min(h).min(w);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let kernel = gaussian_kernel(size, SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(x, h, w, &kernel);
    let (my, _, _) = filter_valid(y, h, w, &kernel);
    let (exx, _, _) = filter_valid(&xx, h, w, &kernel);
    let (eyy, _, _) = filter_valid(&yy, h, w, &kernel);
    let (exy, _, _) = filter_valid(&xy, h, w, &kernel);
    let c1 = (K1 * DATA_RANGE).powi(2);
    let c2 = (K2 * DATA_RANGE).powi(2);
    Ok((0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean SSIM of two images, compared on their luma planes.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "SSIM of {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let map = ssim_map(&plane(x), &plane(y), x.height(), x.width())?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}
