use candle_core::{DType, Tensor};

use crate::error::{contract, Result};
use crate::ops::{conv2d, conv_transpose2d, softplus};
use crate::params::{Init, Scope};

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

/// Learned embedding of the rate-point index shared by every conditional layer.
#[derive(Clone)]
pub struct RateEmbedding {
    table: Tensor,
    lambdas: Vec<f64>,
}

/// Embedding row of one rate point, passed down to every conditional layer.
#[derive(Clone)]
pub struct Conditioning {
    pub(crate) embedding: Tensor,
    pub index: usize,
}

/// A rate point of a variable-rate model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCondition {
    pub lambda_index: usize,
    pub lambda_value: f64,
}

impl RateEmbedding {
    pub fn new(scope: &mut Scope, lambdas: &[f64], dim: usize) -> Result<Self> {
        let table = scope.param("embedding", &[lambdas.len(), dim], Init::Uniform(1.0))?;
        Ok(RateEmbedding {
            table,
            lambdas: lambdas.to_vec(),
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn rate(&self, index: usize) -> Result<RateCondition> {
        let lambda_value = *self.lambdas.get(index).ok_or_else(|| {
            contract!(
                "lambda index {index} outside the {} trained rate points",
                self.lambdas.len()
            )
        })?;
        Ok(RateCondition {
            lambda_index: index,
            lambda_value,
        })
    }

    pub fn condition(&self, index: usize) -> Result<Conditioning> {
        self.rate(index)?;
        Ok(Conditioning {
            embedding: self.table.narrow(0, index, 1)?,
            index,
        })
    }
}

/// Per-channel `softplus(scale)` and bias generated from the rate embedding.
#[derive(Clone)]
pub struct CondAffine {
    w1: Tensor,
    b1: Tensor,
    ws: Tensor,
    bs: Tensor,
    wb: Tensor,
    bb: Tensor,
}

impl CondAffine {
    pub fn new(scope: &mut Scope, embed: usize, channels: usize) -> Result<Self> {
        let bound = 1.0 / (embed as f64).sqrt();
        // softplus(ln(e - 1)) = 1
        let neutral = (std::f64::consts::E - 1.0).ln();
        Ok(CondAffine {
            w1: scope.param("w1", &[embed, embed], Init::Uniform(bound))?,
            b1: scope.param("b1", &[1, embed], Init::Zeros)?,
            ws: scope.param("ws", &[embed, channels], Init::Zeros)?,
            bs: scope.param("bs", &[1, channels], Init::Const(neutral))?,
            wb: scope.param("wb", &[embed, channels], Init::Zeros)?,
            bb: scope.param("bb", &[1, channels], Init::Zeros)?,
        })
    }

    /// `(scale, bias)`, each `[1, C]`.
    pub fn resolve(&self, cond: &Conditioning) -> Result<(Tensor, Tensor)> {
        let e = cond.embedding.to_dtype(self.w1.dtype())?;
        let h = e.matmul(&self.w1)?.broadcast_add(&self.b1)?.relu()?;
        let scale = softplus(&h.matmul(&self.ws)?.broadcast_add(&self.bs)?)?;
        let bias = h.matmul(&self.wb)?.broadcast_add(&self.bb)?;
        Ok((scale, bias))
    }

    pub fn apply(&self, x: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (s, b) = self.resolve(cond)?;
        let s = s.reshape((1, c, 1, 1))?;
        let b = b.reshape((1, c, 1, 1))?;
        Ok(x.broadcast_mul(&s)?.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Forward,
    /// Transposed, stride 2, doubling the spatial size.
    Up,
}

/// Convolution with optional raster-causal mask and rate conditioning.
/// A conditional layer has no bias of its own.
#[derive(Clone)]
pub struct Conv {
    pub(crate) weight: Tensor,
    pub(crate) bias: Option<Tensor>,
    pub(crate) mask: Option<Tensor>,
    pub(crate) cond: Option<CondAffine>,
    pub(crate) kind: ConvKind,
    pub(crate) stride: usize,
    pub(crate) kernel: usize,
    pub(crate) out_channels: usize,
}

/// Shared options for building a [`Conv`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ConvOptions {
    /// Embedding width when the layer is rate-conditional.
    pub cond_embed: Option<usize>,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(
        scope: &mut Scope,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        Self::build(
            scope,
            cin,
            cout,
            kernel,
            stride,
            ConvKind::Forward,
            false,
            opts,
        )
    }

    pub fn up(
        scope: &mut Scope,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        Self::build(scope, cin, cout, kernel, 2, ConvKind::Up, false, opts)
    }

    /// Raster-causal convolution: taps at and after the center are zero.
    pub fn masked(
        scope: &mut Scope,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        Self::build(scope, cin, cout, kernel, 1, ConvKind::Forward, true, opts)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        scope: &mut Scope,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        kind: ConvKind,
        masked: bool,
        opts: ConvOptions,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(contract!("odd kernel sizes only, got {kernel}"));
        }
        let (shape, fan_in) = match kind {
            ConvKind::Forward => ([cout, cin, kernel, kernel], cin * kernel * kernel),
            ConvKind::Up => ([cin, cout, kernel, kernel], cout * kernel * kernel),
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let init = if opts.zero_init {
            Init::Zeros
        } else {
            Init::Uniform(bound)
        };
        let weight = scope.param("weight", &shape, init)?;
        let (bias, cond) = match opts.cond_embed {
            Some(e) => (
                None,
                Some(CondAffine::new(&mut scope.sub("cond"), e, cout)?),
            ),
            None => {
                let init = if opts.zero_init {
                    Init::Zeros
                } else {
                    Init::Uniform(bound)
                };
                (Some(scope.param("bias", &[cout], init)?), None)
            }
        };
        let mask = if masked {
            Some(causal_mask(kernel, scope.dtype(), &scope.device())?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            mask,
            cond,
            kind,
            stride,
            kernel,
            out_channels: cout,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.cond.is_some()
    }

    /// The weight as used in the forward pass (mask applied).
    pub fn effective_weight(&self) -> Result<Tensor> {
        Ok(match &self.mask {
            Some(m) => self.weight.broadcast_mul(m)?,
            None => self.weight.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        let w = self.effective_weight()?;
        let pad = self.kernel / 2;
        let y = match self.kind {
            ConvKind::Forward => conv2d(x, &w, self.stride, pad)?,
            ConvKind::Up => conv_transpose2d(x, &w, 2, pad, 1)?,
        };
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?,
            None => y,
        };
        match (&self.cond, cond) {
            (Some(c), Some(cond)) => c.apply(&y, cond),
            (Some(_), None) => Err(contract!(
                "conditional layer called without a rate condition"
            )),
            (None, _) => Ok(y),
        }
    }

    /// Per-output-channel `(scale, shift)` such that the layer output is
    /// `scale * (W * x) + shift`.
    pub fn output_affine(&self, cond: Option<&Conditioning>) -> Result<(Vec<f32>, Vec<f32>)> {
        let to_vec = |t: &Tensor| -> Result<Vec<f32>> {
            Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
        };
        match (&self.cond, cond, &self.bias) {
            (Some(c), Some(cond), _) => {
                let (s, b) = c.resolve(cond)?;
                Ok((to_vec(&s)?, to_vec(&b)?))
            }
            (Some(_), None, _) => Err(contract!(
                "conditional layer called without a rate condition"
            )),
            (None, _, Some(b)) => Ok((vec![1.0; self.out_channels], to_vec(b)?)),
            (None, _, None) => Ok((vec![1.0; self.out_channels], vec![0.0; self.out_channels])),
        }
    }
}

/// Mask of a type-A raster-causal kernel: ones strictly before the center.
pub fn causal_mask(kernel: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let c = kernel / 2;
    let data: Vec<f32> = (0..kernel * kernel)
        .map(|i| if i < c * kernel + c { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, kernel, kernel), device)?.to_dtype(dtype)?)
}

/// Generalized divisive normalization, `x / sqrt(beta + gamma * x^2)`, or
/// its multiplicative inverse form.
#[derive(Clone)]
pub struct Gdn {
    beta: Tensor,
    gamma: Tensor,
    inverse: bool,
    channels: usize,
}

pub const GDN_BETA_FLOOR: f64 = 1e-6;

impl Gdn {
    pub fn new(scope: &mut Scope, channels: usize, inverse: bool) -> Result<Self> {
        Ok(Gdn {
            beta: scope.param("beta", &[channels], Init::Const(1.0))?,
            gamma: scope.param(
                "gamma",
                &[channels, channels, 1, 1],
                Init::Identity {
                    diag: 0.1f64.sqrt(),
                    off: 1.0 / 1024.0,
                },
            )?,
            inverse,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let beta = (self.beta.sqr()? + GDN_BETA_FLOOR)?.reshape((1, self.channels, 1, 1))?;
        let gamma = self.gamma.sqr()?;
        let norm = conv2d(&x.sqr()?, &gamma, 1, 0)?
            .broadcast_add(&beta)?
            .sqrt()?;
        Ok(if self.inverse {
            (x * norm)?
        } else {
            (x / norm)?
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn mask_zeroes_center_and_later_taps() -> Result<()> {
        let m = causal_mask(5, DType::F32, &Device::Cpu)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        for (i, v) in m.iter().enumerate() {
            let (r, c) = (i / 5, i % 5);
            let before = r < 2 || (r == 2 && c < 2);
            assert_eq!(*v, if before { 1.0 } else { 0.0 }, "tap ({r},{c})");
        }
        assert_eq!(m.iter().sum::<f32>(), 12.0);
        Ok(())
    }

    #[test]
    fn neutral_conditioning_is_the_plain_conv() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, 1)?;
        let mut root = Scope::root(&mut store);
        let emb = RateEmbedding::new(&mut root.sub("rate"), &[0.1, 0.01], 8)?;
        let conv = Conv::new(
            &mut root.sub("c"),
            3,
            4,
            3,
            1,
            ConvOptions {
                cond_embed: Some(8),
                zero_init: false,
            },
        )?;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 6, 6), &Device::Cpu)?;
        let plain = conv2d(&x, &conv.weight, 1, 1)?;
        for i in 0..2 {
            let y = conv.forward(&x, Some(&emb.condition(i)?))?;
            let d = (y - &plain)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(d < 1e-12, "{d}");
        }
        assert!(conv.forward(&x, None).is_err());
        assert!(emb.condition(2).is_err());
        Ok(())
    }

    #[test]
    fn random_generators_separate_rate_points() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, 2)?;
        let mut root = Scope::root(&mut store);
        let emb = RateEmbedding::new(&mut root.sub("rate"), &[0.1, 0.05], 8)?;
        let opts = ConvOptions {
            cond_embed: Some(8),
            zero_init: false,
        };
        let conv = Conv::new(&mut root.sub("c"), 3, 4, 3, 1, opts)?;
        drop(root);
        for name in ["c.cond.ws", "c.cond.wb"] {
            let t = Tensor::randn(0f64, 1.0, store.get(name).unwrap().dims(), &Device::Cpu)?;
            store.set(name, &t)?;
        }
        let x = Tensor::randn(0f64, 1.0, (1, 3, 6, 6), &Device::Cpu)?;
        let a = conv.forward(&x, Some(&emb.condition(0)?))?;
        let b = conv.forward(&x, Some(&emb.condition(1)?))?;
        assert!((a - b)?.abs()?.max_all()?.to_scalar::<f64>()? > 1e-3);
        Ok(())
    }

    #[test]
    fn gdn_identity_finiteness_and_round_trip() -> Result<()> {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F32, 0)?;
        let mut root = Scope::root(&mut store);
        let g = Gdn::new(&mut root.sub("g"), 4, false)?;
        let ig = Gdn::new(&mut root.sub("ig"), 4, true)?;
        drop(root);
        let zeros = Tensor::zeros((1, 4, 3, 3), DType::F32, &dev)?;
        let y = g.forward(&zeros)?.flatten_all()?.to_vec1::<f32>()?;
        assert!(y.iter().all(|v| v.is_finite() && *v == 0.0));

        // unit denominators: beta = 1 - floor, gamma = 0
        let beta = Tensor::full((1.0 - GDN_BETA_FLOOR).sqrt() as f32, 4, &dev)?;
        let x = Tensor::randn(0f32, 1.0, (2, 4, 5, 5), &dev)?;
        for p in ["g", "ig"] {
            store.set(&format!("{p}.beta"), &beta)?;
            store.set(
                &format!("{p}.gamma"),
                &Tensor::zeros((4, 4, 1, 1), DType::F32, &dev)?,
            )?;
        }
        let d = (g.forward(&x)? - &x)?
            .abs()?
            .max_all()?
            .to_scalar::<f32>()?;
        assert!(d < 1e-6);

        // well-conditioned shared parameters: small gamma
        let gamma = (Tensor::eye(4, DType::F32, &dev)? * 1e-2)?.reshape((4, 4, 1, 1))?;
        for p in ["g", "ig"] {
            store.set(&format!("{p}.gamma"), &gamma)?;
        }
        let back = ig.forward(&g.forward(&x)?)?;
        let d = (back - &x)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert!(d < 1e-4, "{d}");
        Ok(())
    }
}
