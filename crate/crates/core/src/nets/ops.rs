//! Layer primitives on `N×C×H×W` tensors.
//!
//! Convolutions are lowered to an im2col rearrangement followed by a matrix
//! product. Both rearrangements are custom ops with each other as backward
//! pass, so gradients flow through plain matmuls.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Error, Result};

/// Geometry of one sliding-window pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(image_index, column_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let l = oh * ow;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = (c * self.height + iy as usize) * self.width;
                        let col_row = row * l + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(img_row + ix as usize, col_row + ox);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im require a contiguous input"),
    }
}

fn im2col_typed<T: WithDType>(src: &[T], batch: usize, w: &Window) -> Vec<T> {
    let (oh, ow) = w.out_hw();
    let img = w.channels * w.height * w.width;
    let per = w.cols() * oh * ow;
    let mut out = vec![T::zero(); batch * per];
    for n in 0..batch {
        let s = &src[n * img..(n + 1) * img];
        let o = &mut out[n * per..(n + 1) * per];
        w.for_each_tap(|i, j| o[j] = s[i]);
    }
    out
}

fn col2im_typed<T: WithDType>(src: &[T], batch: usize, w: &Window) -> Vec<T> {
    let (oh, ow) = w.out_hw();
    let img = w.channels * w.height * w.width;
    let per = w.cols() * oh * ow;
    let mut out = vec![T::zero(); batch * img];
    for n in 0..batch {
        let s = &src[n * per..(n + 1) * per];
        let o = &mut out[n * img..(n + 1) * img];
        w.for_each_tap(|i, j| o[i] += s[j]);
    }
    out
}

/// `N×C×H×W → N×(C·K·K)×(OH·OW)`.
struct Im2Col(Window);

/// Adjoint of [`Im2Col`]: scatter-adds columns back onto the image grid.
struct Col2Im(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = &self.0;
        let batch = layout.dims()[0];
        let (oh, ow) = w.out_hw();
        let shape = Shape::from((batch, w.cols(), oh * ow));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_typed(contiguous(v, layout)?, batch, w)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_typed(contiguous(v, layout)?, batch, w)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, w.channels, w.height, w.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_typed(contiguous(v, layout)?, batch, w)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_typed(contiguous(v, layout)?, batch, w)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Output spatial size of a convolution, or an error when the window no longer fits.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::LayerTable("kernel and stride must be positive".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::InputTooSmall(format!(
            "spatial size {input} with padding {pad} is smaller than kernel {kernel}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<usize> {
    let full = (input - 1) * stride + kernel + output_padding;
    if full <= 2 * pad {
        return Err(Error::InputTooSmall(format!(
            "transposed convolution of size {input} collapses to nothing"
        )));
    }
    Ok(full - 2 * pad)
}

/// 2-D convolution. `weight` is `Cout×Cin×K×K`, `bias` is `Cout`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {cin} input channels, got {c}"
        )));
    }
    if kh != kw {
        return Err(Error::LayerTable("only square kernels are supported".into()));
    }
    let oh = conv_output_size(h, kh, stride, pad)?;
    let ow = conv_output_size(w, kw, stride, pad)?;
    let window = Window {
        channels: c,
        height: h,
        width: w,
        kernel: kh,
        stride,
        pad,
    };
    if stride == 1 && cout < cin && kh > 1 && pad < kh {
        return conv2d_by_scatter(x, weight, bias, pad, (oh, ow));
    }
    let y = if kh == 1 && stride == 1 && pad == 0 {
        x.reshape((n, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(window))?
    };
    let wm = weight.reshape((cout, cin * kh * kw))?;
    let y = weight_matmul(&wm, &y)?.reshape((n, cout, oh, ow))?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?),
        None => Ok(y),
    }
}

/// `M×K` weight times each `K×L` slice of an `N×K×L` batch.
pub fn weight_matmul(wm: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, k, l) = x.dims3()?;
    if n == 1 {
        // The broadcast batch path is noticeably slower for a single sample.
        return Ok(wm.matmul(&x.reshape((k, l))?)?.unsqueeze(0)?);
    }
    Ok(wm.broadcast_matmul(x)?)
}

/// Reverses both spatial axes of a `…×K×K` kernel.
fn flip_spatial(w: &Tensor) -> Result<Tensor> {
    let k = w.dim(D::Minus1)?;
    let rev = Tensor::from_vec((0..k as u32).rev().collect::<Vec<_>>(), k, w.device())?;
    Ok(w.index_select(&rev, 2)?.index_select(&rev, 3)?)
}

/// Stride-1 convolution computed as a transposed convolution with the
/// flipped kernel, so the column buffer has `Cout·K²` rows instead of
/// `Cin·K²`. Used when the layer narrows the channel count.
fn conv2d_by_scatter(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    pad: usize,
    out: (usize, usize),
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, cin, k, _) = weight.dims4()?;
    let window = Window {
        channels: cout,
        height: out.0,
        width: out.1,
        kernel: k,
        stride: 1,
        pad: k - 1 - pad,
    };
    debug_assert_eq!(window.out_hw(), (h, w));
    let wm = flip_spatial(weight)?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((cout * k * k, cin))?;
    let cols = weight_matmul(&wm, &x.reshape((n, c, h * w))?)?;
    let y = cols.contiguous()?.apply_op1(Col2Im(window))?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Transposed 2-D convolution. `weight` is `Cin×Cout×K×K`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cin, cout, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv expects {cin} input channels, got {c}"
        )));
    }
    if kh != kw {
        return Err(Error::LayerTable("only square kernels are supported".into()));
    }
    if output_padding >= stride {
        return Err(Error::LayerTable("output padding must be smaller than stride".into()));
    }
    let oh = conv_transpose_output_size(h, kh, stride, pad, output_padding)?;
    let ow = conv_transpose_output_size(w, kw, stride, pad, output_padding)?;
    let window = Window {
        channels: cout,
        height: oh,
        width: ow,
        kernel: kh,
        stride,
        pad,
    };
    if window.out_hw() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv grid {:?} does not match input {h}x{w}",
            window.out_hw()
        )));
    }
    let wm = weight.reshape((cin, cout * kh * kw))?.t()?.contiguous()?;
    let cols = weight_matmul(&wm, &x.reshape((n, c, h * w))?)?;
    let y = cols.contiguous()?.apply_op1(Col2Im(window))?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?),
        None => Ok(y),
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization over the spatial dimensions (no affine terms).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?;
    Ok(y.reshape((n, c, h, w))?)
}

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope·x) for 0 < slope < 1
    Ok(x.maximum(&(x * slope)?)?)
}

/// Rearranges `N×(C·r²)×H×W` into `N×C×(rH)×(rW)`:
/// output `(c, r·i + a, r·j + b)` reads input `(c·r² + a·r + b, i, j)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pixel shuffle factor {r} needs channels divisible by {}, got {c}",
            r * r
        )));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let oc = c / (r * r);
    Ok(x.reshape((n * oc, r, r, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .contiguous()?
        .reshape((n, oc, h * r, w * r))?)
}

/// Numerically stable softmax along the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    Ok(x.flatten_from(2)?.mean_keepdim(D::Minus1)?.reshape((n, c, 1, 1))?)
}
