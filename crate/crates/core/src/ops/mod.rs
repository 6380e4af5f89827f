//! Tensor primitives that candle does not provide in the form we need.

mod conv;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::{contract, Result};

/// Zero-padded strided convolution; `w` is `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(&w, conv::Conv2dOp { stride, pad })?)
}

/// Transposed convolution; `w` is `[in, out, k, k]`. The output size is
/// `(H - 1) * stride - 2 * pad + k + out_pad`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    let (_, _, h, wd) = x.dims4()?;
    let (_, _, k, _) = w.dims4()?;
    let grow = |n: usize| ((n - 1) * stride + k + out_pad).checked_sub(2 * pad);
    let (out_h, out_w) = match (grow(h), grow(wd)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(contract!(
                "conv_transpose2d: padding {pad} too large for input {h}x{wd}"
            ))
        }
    };
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(
        &w,
        conv::ConvTranspose2dOp {
            stride,
            pad,
            out_h,
            out_w,
        },
    )?)
}

/// Standard normal CDF `Phi(x) = erfc(-x / sqrt 2) / 2`, accurate in both tails.
struct NormalCdf;

impl CustomOp1 for NormalCdf {
    fn name(&self) -> &'static str {
        "anfc-normal-cdf"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(
                strided(v, l)
                    .map(|x| std_normal_cdf(x as f64) as f32)
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(strided(v, l).map(std_normal_cdf).collect()),
            _ => candle_core::bail!("normal_cdf: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let density = (arg.sqr()? * -0.5)?.exp()? * (1.0 / (2.0 * std::f64::consts::PI).sqrt());
        Ok(Some(grad.mul(&density?)?))
    }
}

fn strided<'a, T: Copy>(v: &'a [T], l: &Layout) -> impl Iterator<Item = T> + 'a {
    let (start, end) = l
        .contiguous_offsets()
        .expect("normal_cdf input made contiguous by caller");
    v[start..end].iter().copied()
}

/// Scalar standard normal CDF; the same function backs table construction
/// so encoder and decoder agree bit for bit on every platform.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn normal_cdf(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(NormalCdf)?)
}

/// Rounding in the forward pass, identity gradient in the backward pass.
pub fn round_ste(x: &Tensor) -> Result<Tensor> {
    let delta = (x.round()? - x)?.detach();
    Ok((x + delta)?)
}

/// `max(x, floor)` with the gradient of `x` everywhere except below the floor.
pub fn lower_bound(x: &Tensor, floor: f64) -> Result<Tensor> {
    Ok(x.maximum(floor)?)
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

/// Rearranges `[b, c * r * r, h, w]` into `[b, c, h * r, w * r]`.
pub fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(contract!(
            "depth_to_space: {c} channels not divisible by {}",
            r * r
        ));
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

pub fn float_dtype_ok(dtype: DType) -> Result<()> {
    match dtype {
        DType::F32 | DType::F64 => Ok(()),
        other => Err(contract!("unsupported dtype {other:?}; use f32 or f64")),
    }
}
