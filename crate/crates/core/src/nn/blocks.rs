use candle_core::Tensor;

use super::layers::{leaky_relu, Conditioning, Conv, ConvOptions, Gdn};
use crate::entropy::scale_from_raw;
use crate::error::{contract, Result};
use crate::ops::depth_to_space;
use crate::params::Scope;

fn check_divisible(x: &Tensor, by: usize, what: &str) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    if h % by != 0 || w % by != 0 {
        return Err(contract!(
            "{what}: spatial size {h}x{w} not divisible by {by}"
        ));
    }
    Ok(())
}

fn check_channels(x: &Tensor, c: usize, what: &str) -> Result<()> {
    let got = x.dim(1)?;
    if got != c {
        return Err(contract!("{what}: expected {c} channels, got {got}"));
    }
    Ok(())
}

/// Nonlinearity between the stages of an analysis or synthesis network.
#[derive(Clone)]
enum Activation {
    Gdn(Gdn),
    Leaky,
}

impl Activation {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Gdn(g) => g.forward(x),
            Activation::Leaky => leaky_relu(x),
        }
    }
}

/// Four stride-2 5x5 convolutions: image-shaped input to a latent at 1/16 resolution.
#[derive(Clone)]
pub struct AnalysisNet {
    convs: Vec<Conv>,
    acts: Vec<Activation>,
    cin: usize,
}

impl AnalysisNet {
    pub fn new(
        scope: &mut Scope,
        cin: usize,
        hidden: usize,
        cout: usize,
        gdn: bool,
        cond: Option<usize>,
    ) -> Result<Self> {
        let opts = ConvOptions {
            cond_embed: cond,
            zero_init: false,
        };
        let widths = [cin, hidden, hidden, hidden, cout];
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for i in 0..4 {
            convs.push(Conv::new(
                &mut scope.sub(&format!("conv{i}")),
                widths[i],
                widths[i + 1],
                5,
                2,
                opts,
            )?);
            if i < 3 {
                acts.push(if gdn {
                    Activation::Gdn(Gdn::new(&mut scope.sub(&format!("gdn{i}")), hidden, false)?)
                } else {
                    Activation::Leaky
                });
            }
        }
        Ok(AnalysisNet { convs, acts, cin })
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        check_channels(x, self.cin, "analysis")?;
        check_divisible(x, 16, "analysis")?;
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h, cond)?;
            if let Some(a) = self.acts.get(i) {
                h = a.forward(&h)?;
            }
        }
        Ok(h)
    }
}

/// Mirror of [`AnalysisNet`] with transposed convolutions and inverse GDN.
#[derive(Clone)]
pub struct SynthesisNet {
    convs: Vec<Conv>,
    acts: Vec<Activation>,
    cin: usize,
}

impl SynthesisNet {
    pub fn new(
        scope: &mut Scope,
        cin: usize,
        hidden: usize,
        cout: usize,
        gdn: bool,
        cond: Option<usize>,
    ) -> Result<Self> {
        let opts = ConvOptions {
            cond_embed: cond,
            zero_init: false,
        };
        let widths = [cin, hidden, hidden, hidden, cout];
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for i in 0..4 {
            convs.push(Conv::up(
                &mut scope.sub(&format!("deconv{i}")),
                widths[i],
                widths[i + 1],
                5,
                opts,
            )?);
            if i < 3 {
                acts.push(if gdn {
                    Activation::Gdn(Gdn::new(&mut scope.sub(&format!("igdn{i}")), hidden, true)?)
                } else {
                    Activation::Leaky
                });
            }
        }
        Ok(SynthesisNet { convs, acts, cin })
    }

    pub fn forward(&self, z: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        check_channels(z, self.cin, "synthesis")?;
        let mut h = z.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h, cond)?;
            if let Some(a) = self.acts.get(i) {
                h = a.forward(&h)?;
            }
        }
        Ok(h)
    }
}

/// `|z| -> 3x3 -> 5x5/2 -> 5x5/2`, downsampling by 4 to `M` channels.
#[derive(Clone)]
pub struct HyperAnalysis {
    convs: [Conv; 3],
    abs: bool,
    cin: usize,
}

impl HyperAnalysis {
    pub fn new(
        scope: &mut Scope,
        n: usize,
        m: usize,
        abs: bool,
        cond: Option<usize>,
    ) -> Result<Self> {
        let opts = ConvOptions {
            cond_embed: cond,
            zero_init: false,
        };
        Ok(HyperAnalysis {
            convs: [
                Conv::new(&mut scope.sub("conv0"), n, m, 3, 1, opts)?,
                Conv::new(&mut scope.sub("conv1"), m, m, 5, 2, opts)?,
                Conv::new(&mut scope.sub("conv2"), m, m, 5, 2, opts)?,
            ],
            abs,
            cin: n,
        })
    }

    pub fn forward(&self, z: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        check_channels(z, self.cin, "hyper analysis")?;
        check_divisible(z, 4, "hyper analysis")?;
        let mut h = if self.abs { z.abs()? } else { z.clone() };
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h, cond)?;
            if i < 2 {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}

/// `5x5 up -> 5x5 up -> 3x3`, producing `2N` feature channels at latent resolution.
#[derive(Clone)]
pub struct HyperSynthesis {
    convs: [Conv; 3],
    cin: usize,
    n: usize,
}

impl HyperSynthesis {
    pub fn new(scope: &mut Scope, m: usize, n: usize, cond: Option<usize>) -> Result<Self> {
        let opts = ConvOptions {
            cond_embed: cond,
            zero_init: false,
        };
        let mid = 3 * m / 2;
        Ok(HyperSynthesis {
            convs: [
                Conv::up(&mut scope.sub("deconv0"), m, m, 5, opts)?,
                Conv::up(&mut scope.sub("deconv1"), m, mid, 5, opts)?,
                Conv::new(&mut scope.sub("conv2"), mid, 2 * n, 3, 1, opts)?,
            ],
            cin: m,
            n,
        })
    }

    pub fn forward(&self, h: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        check_channels(h, self.cin, "hyper synthesis")?;
        let mut f = h.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            f = conv.forward(&f, cond)?;
            if i < 2 {
                f = leaky_relu(&f)?;
            }
        }
        Ok(f)
    }

    /// Splits features into `(mean, scale)` for the single-Gaussian model.
    pub fn gaussian(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let mean = features.narrow(1, 0, self.n)?;
        let scale = scale_from_raw(&features.narrow(1, self.n, self.n)?)?;
        Ok((mean, scale))
    }
}

/// 5x5 type-A masked convolution over the quantized latent.
#[derive(Clone)]
pub struct ContextModel {
    pub(crate) conv: Conv,
}

impl ContextModel {
    pub fn new(scope: &mut Scope, n: usize, cond: Option<usize>) -> Result<Self> {
        let opts = ConvOptions {
            cond_embed: cond,
            zero_init: false,
        };
        Ok(ContextModel {
            conv: Conv::masked(&mut scope.sub("conv"), n, 2 * n, 5, opts)?,
        })
    }

    pub fn forward(&self, z_hat: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        self.conv.forward(z_hat, cond)
    }
}

/// Three 1x1 layers fusing context and hyper features into `3KN` raw
/// mixture parameters.
#[derive(Clone)]
pub struct ParamHead {
    pub(crate) convs: [Conv; 3],
    pub(crate) n: usize,
    pub(crate) k: usize,
}

impl ParamHead {
    pub fn new(scope: &mut Scope, n: usize, k: usize, cond: Option<usize>) -> Result<Self> {
        let opts = ConvOptions {
            cond_embed: cond,
            zero_init: false,
        };
        let (a, b) = (10 * n / 3, 8 * n / 3);
        Ok(ParamHead {
            convs: [
                Conv::new(&mut scope.sub("conv0"), 4 * n, a, 1, 1, opts)?,
                Conv::new(&mut scope.sub("conv1"), a, b, 1, 1, opts)?,
                Conv::new(&mut scope.sub("conv2"), b, 3 * k * n, 1, 1, opts)?,
            ],
            n,
            k,
        })
    }

    pub fn components(&self) -> usize {
        self.k
    }

    /// Raw `[B, 3KN, H, W]` parameters from context and hyper features.
    pub fn forward(
        &self,
        context: &Tensor,
        hyper: &Tensor,
        cond: Option<&Conditioning>,
    ) -> Result<Tensor> {
        check_channels(context, 2 * self.n, "param head context")?;
        check_channels(hyper, 2 * self.n, "param head hyper features")?;
        let mut f = Tensor::cat(&[context, hyper], 1)?;
        for (i, conv) in self.convs.iter().enumerate() {
            f = conv.forward(&f, cond)?;
            if i < 2 {
                f = leaky_relu(&f)?;
            }
        }
        Ok(f)
    }
}

/// Stride-free residual refinement, `x + r(x)`, with a zero-initialized
/// output layer.
#[derive(Clone)]
pub struct QeNet {
    conv_in: Conv,
    blocks: Vec<(Conv, Conv)>,
    conv_out: Conv,
}

impl QeNet {
    pub fn new(
        scope: &mut Scope,
        width: usize,
        blocks: usize,
        cond: Option<usize>,
    ) -> Result<Self> {
        let opts = ConvOptions {
            cond_embed: cond,
            zero_init: false,
        };
        let conv_in = Conv::new(&mut scope.sub("conv_in"), 3, width, 3, 1, opts)?;
        let mut bs = Vec::new();
        for i in 0..blocks {
            bs.push((
                Conv::new(
                    &mut scope.sub(&format!("block{i}.conv0")),
                    width,
                    width,
                    3,
                    1,
                    opts,
                )?,
                Conv::new(
                    &mut scope.sub(&format!("block{i}.conv1")),
                    width,
                    width,
                    3,
                    1,
                    opts,
                )?,
            ));
        }
        let conv_out = Conv::new(
            &mut scope.sub("conv_out"),
            width,
            3,
            3,
            1,
            ConvOptions {
                cond_embed: cond,
                zero_init: true,
            },
        )?;
        Ok(QeNet {
            conv_in,
            blocks: bs,
            conv_out,
        })
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        check_channels(x, 3, "quality enhancement")?;
        let mut h = self.conv_in.forward(x, cond)?;
        for (a, b) in &self.blocks {
            let r = b.forward(&a.forward(&h, cond)?.relu()?, cond)?;
            h = (h + r)?;
        }
        Ok((x + self.conv_out.forward(&h, cond)?)?)
    }
}

/// Per-pixel scale of the rounded x-branch residual (in 8-bit units),
/// predicted from the quantized latent by a 1x1 convolution and a
/// depth-to-space rearrangement.
#[derive(Clone)]
pub struct ResidualScaleHead {
    conv: Conv,
}

pub const RESIDUAL_UPSCALE: usize = 16;

impl ResidualScaleHead {
    pub fn new(scope: &mut Scope, n: usize) -> Result<Self> {
        let r = RESIDUAL_UPSCALE;
        Ok(ResidualScaleHead {
            conv: Conv::new(
                &mut scope.sub("conv"),
                n,
                3 * r * r,
                1,
                1,
                ConvOptions::default(),
            )?,
        })
    }

    /// Scales shaped `[B, 3, 16h, 16w]`.
    pub fn forward(&self, z_hat: &Tensor) -> Result<Tensor> {
        let raw = depth_to_space(&self.conv.forward(z_hat, None)?, RESIDUAL_UPSCALE)?;
        scale_from_raw(&raw)
    }
}
