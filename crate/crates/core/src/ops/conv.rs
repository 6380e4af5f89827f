//! im2col/GEMM convolution kernels registered as candle custom ops.
//!
//! candle's own CPU backward for convolutions goes through a direct-loop
//! transposed convolution that dominates training time at the sizes used
//! here. These ops keep forward, input-gradient and weight-gradient all on
//! GEMM, and the transposed convolution is simply the input-gradient kernel
//! run forwards.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

pub(crate) trait ConvFloat:
    Copy + Default + Send + Sync + std::ops::AddAssign + 'static
{
    /// Row/column-strided `c = alpha * a @ b + beta * c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn one() -> Self;
}

impl ConvFloat for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
    fn one() -> f32 {
        1.0
    }
}

impl ConvFloat for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
    fn one() -> f64 {
        1.0
    }
}

/// Geometry of a strided, zero-padded square-kernel convolution from an
/// image of `(channels, height, width)` onto a `(out_h, out_w)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `tap`.
fn valid_range(
    tap: usize,
    g_stride: usize,
    pad: usize,
    input: usize,
    out: usize,
) -> (usize, usize) {
    // input index = o * stride + tap - pad must lie in [0, input)
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(g_stride)
    };
    let hi = if input + pad > tap {
        ((input + pad - tap - 1) / g_stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: ConvFloat>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, s, p, g.height, g.out_h);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, s, p, g.width, g.out_w);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                dst.fill(T::default());
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let ix0 = xlo + kj - p;
                        drow[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src_row[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: ConvFloat>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, s, p, g.height, g.out_h);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, s, p, g.width, g.out_w);
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let dst_row = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in xlo..xhi {
                        dst_row[ox * s + kj - p] += srow[ox];
                    }
                }
            }
        }
    }
}

/// `x: [batch, C, H, W]`, `w: [O, C, k, k]` -> `[batch, O, out_h, out_w]`.
pub(crate) fn conv_forward<T: ConvFloat>(
    x: &[T],
    batch: usize,
    g: &Geometry,
    w: &[T],
    out_ch: usize,
) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut y = vec![T::default(); batch * out_ch * n];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::default(); rows * n]
    };
    for b in 0..batch {
        let xb = &x[b * g.image_len()..(b + 1) * g.image_len()];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let yb = &mut y[b * out_ch * n..(b + 1) * out_ch * n];
        unsafe {
            T::gemm(
                out_ch,
                rows,
                n,
                w.as_ptr(),
                rows as isize,
                1,
                src.as_ptr(),
                n as isize,
                1,
                T::default(),
                yb.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    y
}

/// Gradient of [`conv_forward`] with respect to its input; equivalently a
/// transposed convolution of `dy: [batch, O, out_h, out_w]` back onto the
/// `[batch, C, H, W]` grid.
pub(crate) fn conv_backward_input<T: ConvFloat>(
    dy: &[T],
    batch: usize,
    g: &Geometry,
    w: &[T],
    out_ch: usize,
) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut dx = vec![T::default(); batch * g.image_len()];
    let mut dcols = vec![T::default(); rows * n];
    for b in 0..batch {
        let dyb = &dy[b * out_ch * n..(b + 1) * out_ch * n];
        let dxb = &mut dx[b * g.image_len()..(b + 1) * g.image_len()];
        let dst: *mut T = if g.is_pointwise() {
            dxb.as_mut_ptr()
        } else {
            dcols.as_mut_ptr()
        };
        unsafe {
            T::gemm(
                rows,
                out_ch,
                n,
                w.as_ptr(),
                1,
                rows as isize,
                dyb.as_ptr(),
                n as isize,
                1,
                T::default(),
                dst,
                n as isize,
                1,
            );
        }
        if !g.is_pointwise() {
            col2im(&dcols, g, dxb);
        }
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to its weight, summed over the batch.
pub(crate) fn conv_backward_weight<T: ConvFloat>(
    x: &[T],
    batch: usize,
    g: &Geometry,
    dy: &[T],
    out_ch: usize,
) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut dw = vec![T::default(); out_ch * rows];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::default(); rows * n]
    };
    for b in 0..batch {
        let xb = &x[b * g.image_len()..(b + 1) * g.image_len()];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let dyb = &dy[b * out_ch * n..(b + 1) * out_ch * n];
        let beta = if b == 0 { T::default() } else { T::one() };
        unsafe {
            T::gemm(
                out_ch,
                n,
                rows,
                dyb.as_ptr(),
                n as isize,
                1,
                src.as_ptr(),
                1,
                n as isize,
                beta,
                dw.as_mut_ptr(),
                rows as isize,
                1,
            );
        }
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what}: expected a contiguous tensor"),
    }
}

fn dims4(layout: &Layout, what: &str) -> candle_core::Result<(usize, usize, usize, usize)> {
    layout.shape().dims4().map_err(|_| {
        candle_core::Error::Msg(format!(
            "{what}: expected a rank-4 tensor, got {:?}",
            layout.shape()
        ))
    })
}

macro_rules! dispatch_float {
    ($name:expr, $s1:expr, $s2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32($a), CpuStorage::F32($b)) => CpuStorage::F32($body),
            (CpuStorage::F64($a), CpuStorage::F64($b)) => CpuStorage::F64($body),
            _ => candle_core::bail!("{}: only matching f32/f64 operands are supported", $name),
        }
    };
}

/// Strided, zero-padded 2-D convolution without bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dOp {
    pub stride: usize,
    pub pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "anfc-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1, self.name())?;
        let (o, c2, k, k2) = dims4(l2, self.name())?;
        if c != c2 || k != k2 {
            candle_core::bail!("conv2d: input channels {c} vs weight {c2}, kernel {k}x{k2}");
        }
        let g = Geometry::new(c, h, w, k, self.stride, self.pad).ok_or_else(|| {
            candle_core::Error::Msg(format!("conv2d: input {h}x{w} too small for kernel {k}"))
        })?;
        let out = dispatch_float!(self.name(), s1, s2, |x, wt| conv_forward(
            contiguous(x, l1, "conv2d input")?,
            b,
            &g,
            contiguous(wt, l2, "conv2d weight")?,
            o
        ));
        Ok((out, Shape::from((b, o, g.out_h, g.out_w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, k, _) = w.dims4()?;
        let dx = grad.apply_op2(
            w,
            ConvTranspose2dOp {
                stride: self.stride,
                pad: self.pad,
                out_h: h,
                out_w: wd,
            },
        )?;
        let dw = x.apply_op2(
            &grad,
            ConvWeightGradOp {
                stride: self.stride,
                pad: self.pad,
                kernel: k,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Transposed convolution with weight laid out `[in, out, k, k]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvTranspose2dOp {
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl CustomOp2 for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "anfc-conv-transpose2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, cin, h, w) = dims4(l1, self.name())?;
        let (cin2, cout, k, _) = dims4(l2, self.name())?;
        if cin != cin2 {
            candle_core::bail!("conv_transpose2d: input channels {cin} vs weight {cin2}");
        }
        let g = Geometry::new(cout, self.out_h, self.out_w, k, self.stride, self.pad)
            .filter(|g| g.out_h == h && g.out_w == w)
            .ok_or_else(|| {
                candle_core::Error::Msg(format!(
                    "conv_transpose2d: output {}x{} inconsistent with input {h}x{w}",
                    self.out_h, self.out_w
                ))
            })?;
        let out = dispatch_float!(self.name(), s1, s2, |x, wt| conv_backward_input(
            contiguous(x, l1, "conv_transpose2d input")?,
            b,
            &g,
            contiguous(wt, l2, "conv_transpose2d weight")?,
            cin
        ));
        Ok((out, Shape::from((b, cout, self.out_h, self.out_w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, k, _) = w.dims4()?;
        let dx = grad.apply_op2(
            w,
            Conv2dOp {
                stride: self.stride,
                pad: self.pad,
            },
        )?;
        let dw = grad.apply_op2(
            x,
            ConvWeightGradOp {
                stride: self.stride,
                pad: self.pad,
                kernel: k,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

/// `(image [b, C, H, W], dy [b, O, oh, ow]) -> dW [O, C, k, k]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvWeightGradOp {
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl CustomOp2 for ConvWeightGradOp {
    fn name(&self) -> &'static str {
        "anfc-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1, self.name())?;
        let (b2, o, oh, ow) = dims4(l2, self.name())?;
        let g = Geometry::new(c, h, w, self.kernel, self.stride, self.pad)
            .filter(|g| g.out_h == oh && g.out_w == ow && b == b2)
            .ok_or_else(|| {
                candle_core::Error::Msg("conv weight grad: inconsistent shapes".into())
            })?;
        let out = dispatch_float!(self.name(), s1, s2, |x, dy| conv_backward_weight(
            contiguous(x, l1, "conv weight grad input")?,
            b,
            &g,
            contiguous(dy, l2, "conv weight grad dy")?,
            o
        ));
        Ok((out, Shape::from((o, c, self.kernel, self.kernel))))
    }
}
