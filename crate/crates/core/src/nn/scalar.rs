//! Position-at-a-time evaluation of the context model and parameter head.
//!
//! The autoregressive coder needs the mixture parameters of one latent
//! position given the already coded positions. Encoder and decoder both go
//! through this single `f32` routine, so their tables agree bit for bit
//! regardless of how the batched tensor path would have been scheduled.

use candle_core::{DType, Tensor};

use super::blocks::{ContextModel, ParamHead};
use super::layers::{Conditioning, Conv, LEAKY_SLOPE};
use crate::error::{contract, Result};

struct Dense {
    /// `[in][out]`
    weight: Vec<f32>,
    scale: Vec<f32>,
    shift: Vec<f32>,
    inputs: usize,
    outputs: usize,
}

impl Dense {
    fn from_conv(conv: &Conv, cond: Option<&Conditioning>) -> Result<Self> {
        let w = conv.effective_weight()?.to_dtype(DType::F32)?;
        let (o, i, kh, kw) = w.dims4()?;
        if kh != 1 || kw != 1 {
            return Err(contract!("dense export needs a 1x1 convolution"));
        }
        let weight = w
            .reshape((o, i))?
            .t()?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let (scale, shift) = conv.output_affine(cond)?;
        Ok(Dense {
            weight,
            scale,
            shift,
            inputs: i,
            outputs: o,
        })
    }

    fn apply(&self, input: &[f32], out: &mut Vec<f32>, leaky: bool) {
        out.clear();
        out.resize(self.outputs, 0.0);
        for (i, &v) in input.iter().enumerate().take(self.inputs) {
            if v == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (acc, &w) in out.iter_mut().zip(row) {
                *acc += v * w;
            }
        }
        for ((v, &s), &b) in out.iter_mut().zip(&self.scale).zip(&self.shift) {
            *v = *v * s + b;
            if leaky && *v < 0.0 {
                *v *= LEAKY_SLOPE as f32;
            }
        }
    }
}

/// Context model and parameter head folded into plain arrays.
pub struct ScalarEntropyHead {
    n: usize,
    k: usize,
    /// Causal taps as offsets from the current position.
    taps: Vec<(isize, isize)>,
    /// `[tap][in][out]`
    ctx_weight: Vec<f32>,
    ctx_scale: Vec<f32>,
    ctx_shift: Vec<f32>,
    layers: [Dense; 3],
}

/// Reusable buffers for [`ScalarEntropyHead::params_at`].
#[derive(Default)]
pub struct HeadScratch {
    input: Vec<f32>,
    a: Vec<f32>,
    b: Vec<f32>,
}

impl ScalarEntropyHead {
    pub fn new(
        context: &ContextModel,
        head: &ParamHead,
        cond: Option<&Conditioning>,
    ) -> Result<Self> {
        let n = head.n;
        let w = context.conv.effective_weight()?.to_dtype(DType::F32)?;
        let (o, i, kh, kw) = w.dims4()?;
        if o != 2 * n || i != n || kh != kw {
            return Err(contract!("context model shape does not match the head"));
        }
        let ch = (kh / 2) as isize;
        let wv = w.flatten_all()?.to_vec1::<f32>()?;
        let mut taps = Vec::new();
        let mut ctx_weight = Vec::new();
        for dy in 0..kh {
            for dx in 0..kw {
                if dy * kw + dx >= (kh / 2) * kw + kw / 2 {
                    continue;
                }
                taps.push((dy as isize - ch, dx as isize - ch));
                for c in 0..i {
                    for oc in 0..o {
                        ctx_weight.push(wv[((oc * i + c) * kh + dy) * kw + dx]);
                    }
                }
            }
        }
        let (ctx_scale, ctx_shift) = context.conv.output_affine(cond)?;
        let layers = [
            Dense::from_conv(&head.convs[0], cond)?,
            Dense::from_conv(&head.convs[1], cond)?,
            Dense::from_conv(&head.convs[2], cond)?,
        ];
        Ok(ScalarEntropyHead {
            n,
            k: head.k,
            taps,
            ctx_weight,
            ctx_scale,
            ctx_shift,
            layers,
        })
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> usize {
        self.k
    }

    /// Raw `3KN` parameters at `(y, x)`. `z_hat` is the channel-major
    /// `N x H x W` latent, read only at positions before `(y, x)`;
    /// `hyper` is the `2N x H x W` hyper feature map.
    #[allow(clippy::too_many_arguments)]
    pub fn params_at<'s>(
        &self,
        z_hat: &[f32],
        hyper: &[f32],
        height: usize,
        width: usize,
        y: usize,
        x: usize,
        scratch: &'s mut HeadScratch,
    ) -> &'s [f32] {
        let n = self.n;
        let plane = height * width;
        let ctx_out = 2 * n;
        let HeadScratch { input, a, b } = scratch;
        input.clear();
        input.resize(4 * n, 0.0);
        let (ctx, hyp) = input.split_at_mut(ctx_out);
        for (t, &(dy, dx)) in self.taps.iter().enumerate() {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= height as isize || xx >= width as isize {
                continue;
            }
            let pos = yy as usize * width + xx as usize;
            for c in 0..n {
                let v = z_hat[c * plane + pos];
                if v == 0.0 {
                    continue;
                }
                let row = &self.ctx_weight[(t * n + c) * ctx_out..(t * n + c + 1) * ctx_out];
                for (acc, &w) in ctx.iter_mut().zip(row) {
                    *acc += v * w;
                }
            }
        }
        for ((v, &s), &b) in ctx.iter_mut().zip(&self.ctx_scale).zip(&self.ctx_shift) {
            *v = *v * s + b;
        }
        let pos = y * width + x;
        for (c, h) in hyp.iter_mut().enumerate() {
            *h = hyper[c * plane + pos];
        }
        self.layers[0].apply(input, a, true);
        self.layers[1].apply(a, b, true);
        self.layers[2].apply(b, a, false);
        a
    }

    /// `(weight, mean, scale)` components of channel `c` from raw parameters.
    pub fn mixture(&self, raw: &[f32], c: usize, out: &mut Vec<(f64, f64, f64)>) {
        let (n, k) = (self.n, self.k);
        crate::entropy::scalar_mixture(|t, j| raw[(t * k + j) * n + c] as f64, k, out);
    }
}

/// Batched reference of the same computation, `[B, 3KN, H, W]`.
pub fn batched_params(
    context: &ContextModel,
    head: &ParamHead,
    z_hat: &Tensor,
    hyper: &Tensor,
    cond: Option<&Conditioning>,
) -> Result<Tensor> {
    head.forward(&context.forward(z_hat, cond)?, hyper, cond)
}
