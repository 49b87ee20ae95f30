//! Inception-v3 pooling features in the variant used for FID.
//!
//! Weights are read from a safetensors file using the torchvision parameter
//! names (`Conv2d_1a_3x3.conv.weight`, `Mixed_5b.branch1x1.bn.running_mean`,
//! ...). Batch norm is folded into the convolutions at load time.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::fid::FeatureExtractor;
use crate::image::ImageTensor;

pub const INPUT_SIZE: usize = 299;
pub const FEATURE_DIM: usize = 2048;
const BN_EPS: f64 = 1e-3;

struct BasicConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: (usize, usize),
}

impl BasicConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ph, pw) = self.pad;
        let x = if ph == pw {
            x.clone()
        } else {
            x.pad_with_zeros(2, ph, ph)?.pad_with_zeros(3, pw, pw)?
        };
        let p = if ph == pw { ph } else { 0 };
        let y = x.conv2d(&self.weight, p, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?.relu()?)
    }
}

/// Source of raw (unfolded) parameters.
trait ParamSource {
    fn get(&mut self, name: &str, shape: &[usize]) -> Result<Tensor>;
}

struct FileSource(HashMap<String, Tensor>);

impl ParamSource for FileSource {
    fn get(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .0
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing inception parameter `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` has shape {:?}, expected {shape:?}",
                t.dims()
            )));
        }
        Ok(t.to_dtype(DType::F32)?)
    }
}

struct RandomSource(ChaCha8Rng);

impl ParamSource for RandomSource {
    fn get(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with("conv.weight") {
            let fan_in: usize = shape[1..].iter().product();
            let dist = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).unwrap();
            (0..n).map(|_| dist.sample(&mut self.0)).collect()
        } else if name.ends_with("running_var") || name.ends_with("bn.weight") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }
}

fn basic(
    src: &mut dyn ParamSource,
    name: &str,
    cin: usize,
    cout: usize,
    k: (usize, usize),
    stride: usize,
    pad: (usize, usize),
) -> Result<BasicConv> {
    let w = src.get(&format!("{name}.conv.weight"), &[cout, cin, k.0, k.1])?;
    let gamma = src.get(&format!("{name}.bn.weight"), &[cout])?;
    let beta = src.get(&format!("{name}.bn.bias"), &[cout])?;
    let mean = src.get(&format!("{name}.bn.running_mean"), &[cout])?;
    let var = src.get(&format!("{name}.bn.running_var"), &[cout])?;
    let scale = gamma.div(&(var + BN_EPS)?.sqrt()?)?;
    let weight = w.broadcast_mul(&scale.reshape((cout, 1, 1, 1))?)?;
    let bias = beta.sub(&mean.mul(&scale)?)?;
    Ok(BasicConv {
        weight,
        bias,
        stride,
        pad,
    })
}

fn sq(
    src: &mut dyn ParamSource,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<BasicConv> {
    basic(src, name, cin, cout, (k, k), stride, (pad, pad))
}

fn max_pool_3s2(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d_with_stride(3, 2)?)
}

/// 3×3 average pooling, stride 1, padding 1, padded cells excluded from the count.
fn avg_pool_same(x: &Tensor) -> Result<Tensor> {
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let (_, _, h, w) = x.dims4()?;
    let ones = Tensor::ones((1, 1, h, w), x.dtype(), x.device())?
        .pad_with_zeros(2, 1, 1)?
        .pad_with_zeros(3, 1, 1)?;
    let sums = padded.avg_pool2d_with_stride(3, 1)?;
    let counts = ones.avg_pool2d_with_stride(3, 1)?;
    Ok(sums.broadcast_div(&counts)?)
}

/// 3×3 max pooling, stride 1, padding 1.
fn max_pool_same(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let neg = |dims: (usize, usize, usize, usize)| Tensor::full(f32::NEG_INFINITY, dims, x.device());
    let x = Tensor::cat(&[&neg((n, c, 1, w))?, x, &neg((n, c, 1, w))?], 2)?;
    let x = Tensor::cat(&[&neg((n, c, h + 2, 1))?, &x, &neg((n, c, h + 2, 1))?], 3)?;
    Ok(x.max_pool2d_with_stride(3, 1)?)
}

struct BlockA {
    b1: BasicConv,
    b5: [BasicConv; 2],
    b3: [BasicConv; 3],
    pool: BasicConv,
}

impl BlockA {
    fn load(src: &mut dyn ParamSource, name: &str, cin: usize, pool_features: usize) -> Result<Self> {
        Ok(Self {
            b1: sq(src, &format!("{name}.branch1x1"), cin, 64, 1, 1, 0)?,
            b5: [
                sq(src, &format!("{name}.branch5x5_1"), cin, 48, 1, 1, 0)?,
                sq(src, &format!("{name}.branch5x5_2"), 48, 64, 5, 1, 2)?,
            ],
            b3: [
                sq(src, &format!("{name}.branch3x3dbl_1"), cin, 64, 1, 1, 0)?,
                sq(src, &format!("{name}.branch3x3dbl_2"), 64, 96, 3, 1, 1)?,
                sq(src, &format!("{name}.branch3x3dbl_3"), 96, 96, 3, 1, 1)?,
            ],
            pool: sq(src, &format!("{name}.branch_pool"), cin, pool_features, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b1.forward(x)?;
        let b = chain(&self.b5, x)?;
        let c = chain(&self.b3, x)?;
        let d = self.pool.forward(&avg_pool_same(x)?)?;
        Ok(Tensor::cat(&[a, b, c, d], 1)?)
    }
}

fn chain(convs: &[BasicConv], x: &Tensor) -> Result<Tensor> {
    let mut y = x.clone();
    for c in convs {
        y = c.forward(&y)?;
    }
    Ok(y)
}

struct BlockB {
    b3: BasicConv,
    dbl: [BasicConv; 3],
}

impl BlockB {
    fn load(src: &mut dyn ParamSource, name: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            b3: sq(src, &format!("{name}.branch3x3"), cin, 384, 3, 2, 0)?,
            dbl: [
                sq(src, &format!("{name}.branch3x3dbl_1"), cin, 64, 1, 1, 0)?,
                sq(src, &format!("{name}.branch3x3dbl_2"), 64, 96, 3, 1, 1)?,
                sq(src, &format!("{name}.branch3x3dbl_3"), 96, 96, 3, 2, 0)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(
            &[self.b3.forward(x)?, chain(&self.dbl, x)?, max_pool_3s2(x)?],
            1,
        )?)
    }
}

struct BlockC {
    b1: BasicConv,
    b7: [BasicConv; 3],
    dbl: [BasicConv; 5],
    pool: BasicConv,
}

impl BlockC {
    fn load(src: &mut dyn ParamSource, name: &str, cin: usize, c7: usize) -> Result<Self> {
        let row = (1, 7);
        let col = (7, 1);
        let prow = (0, 3);
        let pcol = (3, 0);
        Ok(Self {
            b1: sq(src, &format!("{name}.branch1x1"), cin, 192, 1, 1, 0)?,
            b7: [
                sq(src, &format!("{name}.branch7x7_1"), cin, c7, 1, 1, 0)?,
                basic(src, &format!("{name}.branch7x7_2"), c7, c7, row, 1, prow)?,
                basic(src, &format!("{name}.branch7x7_3"), c7, 192, col, 1, pcol)?,
            ],
            dbl: [
                sq(src, &format!("{name}.branch7x7dbl_1"), cin, c7, 1, 1, 0)?,
                basic(src, &format!("{name}.branch7x7dbl_2"), c7, c7, col, 1, pcol)?,
                basic(src, &format!("{name}.branch7x7dbl_3"), c7, c7, row, 1, prow)?,
                basic(src, &format!("{name}.branch7x7dbl_4"), c7, c7, col, 1, pcol)?,
                basic(src, &format!("{name}.branch7x7dbl_5"), c7, 192, row, 1, prow)?,
            ],
            pool: sq(src, &format!("{name}.branch_pool"), cin, 192, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.pool.forward(&avg_pool_same(x)?)?;
        Ok(Tensor::cat(
            &[self.b1.forward(x)?, chain(&self.b7, x)?, chain(&self.dbl, x)?, d],
            1,
        )?)
    }
}

struct BlockD {
    b3: [BasicConv; 2],
    b7: [BasicConv; 4],
}

impl BlockD {
    fn load(src: &mut dyn ParamSource, name: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            b3: [
                sq(src, &format!("{name}.branch3x3_1"), cin, 192, 1, 1, 0)?,
                sq(src, &format!("{name}.branch3x3_2"), 192, 320, 3, 2, 0)?,
            ],
            b7: [
                sq(src, &format!("{name}.branch7x7x3_1"), cin, 192, 1, 1, 0)?,
                basic(src, &format!("{name}.branch7x7x3_2"), 192, 192, (1, 7), 1, (0, 3))?,
                basic(src, &format!("{name}.branch7x7x3_3"), 192, 192, (7, 1), 1, (3, 0))?,
                sq(src, &format!("{name}.branch7x7x3_4"), 192, 192, 3, 2, 0)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(
            &[chain(&self.b3, x)?, chain(&self.b7, x)?, max_pool_3s2(x)?],
            1,
        )?)
    }
}

struct BlockE {
    b1: BasicConv,
    b3_1: BasicConv,
    b3_2a: BasicConv,
    b3_2b: BasicConv,
    dbl_1: BasicConv,
    dbl_2: BasicConv,
    dbl_3a: BasicConv,
    dbl_3b: BasicConv,
    pool: BasicConv,
    /// The last block max-pools its pooling branch; the first one averages.
    max_pool: bool,
}

impl BlockE {
    fn load(src: &mut dyn ParamSource, name: &str, cin: usize, max_pool: bool) -> Result<Self> {
        Ok(Self {
            b1: sq(src, &format!("{name}.branch1x1"), cin, 320, 1, 1, 0)?,
            b3_1: sq(src, &format!("{name}.branch3x3_1"), cin, 384, 1, 1, 0)?,
            b3_2a: basic(src, &format!("{name}.branch3x3_2a"), 384, 384, (1, 3), 1, (0, 1))?,
            b3_2b: basic(src, &format!("{name}.branch3x3_2b"), 384, 384, (3, 1), 1, (1, 0))?,
            dbl_1: sq(src, &format!("{name}.branch3x3dbl_1"), cin, 448, 1, 1, 0)?,
            dbl_2: sq(src, &format!("{name}.branch3x3dbl_2"), 448, 384, 3, 1, 1)?,
            dbl_3a: basic(src, &format!("{name}.branch3x3dbl_3a"), 384, 384, (1, 3), 1, (0, 1))?,
            dbl_3b: basic(src, &format!("{name}.branch3x3dbl_3b"), 384, 384, (3, 1), 1, (1, 0))?,
            pool: sq(src, &format!("{name}.branch_pool"), cin, 192, 1, 1, 0)?,
            max_pool,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b1.forward(x)?;
        let b = self.b3_1.forward(x)?;
        let b = Tensor::cat(&[self.b3_2a.forward(&b)?, self.b3_2b.forward(&b)?], 1)?;
        let c = self.dbl_2.forward(&self.dbl_1.forward(x)?)?;
        let c = Tensor::cat(&[self.dbl_3a.forward(&c)?, self.dbl_3b.forward(&c)?], 1)?;
        let pooled = if self.max_pool {
            max_pool_same(x)?
        } else {
            avg_pool_same(x)?
        };
        let d = self.pool.forward(&pooled)?;
        Ok(Tensor::cat(&[a, b, c, d], 1)?)
    }
}

pub struct InceptionV3 {
    stem: Vec<BasicConv>,
    mixed_5: [BlockA; 3],
    mixed_6a: BlockB,
    mixed_6: [BlockC; 4],
    mixed_7a: BlockD,
    mixed_7: [BlockE; 2],
}

impl std::fmt::Debug for InceptionV3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InceptionV3").finish_non_exhaustive()
    }
}

impl InceptionV3 {
    fn build(src: &mut dyn ParamSource) -> Result<Self> {
        Ok(Self {
            stem: vec![
                sq(src, "Conv2d_1a_3x3", 3, 32, 3, 2, 0)?,
                sq(src, "Conv2d_2a_3x3", 32, 32, 3, 1, 0)?,
                sq(src, "Conv2d_2b_3x3", 32, 64, 3, 1, 1)?,
                sq(src, "Conv2d_3b_1x1", 64, 80, 1, 1, 0)?,
                sq(src, "Conv2d_4a_3x3", 80, 192, 3, 1, 0)?,
            ],
            mixed_5: [
                BlockA::load(src, "Mixed_5b", 192, 32)?,
                BlockA::load(src, "Mixed_5c", 256, 64)?,
                BlockA::load(src, "Mixed_5d", 288, 64)?,
            ],
            mixed_6a: BlockB::load(src, "Mixed_6a", 288)?,
            mixed_6: [
                BlockC::load(src, "Mixed_6b", 768, 128)?,
                BlockC::load(src, "Mixed_6c", 768, 160)?,
                BlockC::load(src, "Mixed_6d", 768, 160)?,
                BlockC::load(src, "Mixed_6e", 768, 192)?,
            ],
            mixed_7a: BlockD::load(src, "Mixed_7a", 768)?,
            mixed_7: [
                BlockE::load(src, "Mixed_7b", 1280, false)?,
                BlockE::load(src, "Mixed_7c", 2048, true)?,
            ],
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::build(&mut FileSource(tensors))
    }

    /// Randomly initialized network with the same layout, for shape testing.
    pub fn random(seed: u64) -> Result<Self> {
        Self::build(&mut RandomSource(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// `N×3×H×W` input in `[-1, 1]` to `N×2048` pooled features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.stem[0].forward(x)?;
        y = self.stem[1].forward(&y)?;
        y = self.stem[2].forward(&y)?;
        y = max_pool_3s2(&y)?;
        y = self.stem[3].forward(&y)?;
        y = self.stem[4].forward(&y)?;
        y = max_pool_3s2(&y)?;
        for b in &self.mixed_5 {
            y = b.forward(&y)?;
        }
        y = self.mixed_6a.forward(&y)?;
        for b in &self.mixed_6 {
            y = b.forward(&y)?;
        }
        y = self.mixed_7a.forward(&y)?;
        for b in &self.mixed_7 {
            y = b.forward(&y)?;
        }
        Ok(y.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

impl FeatureExtractor for InceptionV3 {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.channels() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected RGB, got {} channels",
                img.channels()
            )));
        }
        let x = img
            .denormalized()
            .resize(INPUT_SIZE, INPUT_SIZE)?
            .normalized()
            .to_tensor(DType::F32, &Device::Cpu)?;
        let f = self.forward(&x)?.flatten_all()?.to_dtype(DType::F64)?;
        Ok(f.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_helpers() {
        let x = Tensor::arange(0f32, 9.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 3, 3))
            .unwrap();
        let avg = avg_pool_same(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        // Corner (0,0) averages the 4 in-bounds cells 0,1,3,4.
        assert!((avg[0] - 2.0).abs() < 1e-6);
        assert!((avg[4] - 4.0).abs() < 1e-6);
        let mx = max_pool_same(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(mx, vec![4.0, 5.0, 5.0, 7.0, 8.0, 8.0, 7.0, 8.0, 8.0]);
    }

    #[test]
    fn asymmetric_padding_keeps_size() {
        let mut src = RandomSource(ChaCha8Rng::seed_from_u64(0));
        let c = basic(&mut src, "t", 2, 3, (1, 7), 1, (0, 3)).unwrap();
        let x = Tensor::ones((1, 2, 5, 9), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[1, 3, 5, 9]);
    }
}
