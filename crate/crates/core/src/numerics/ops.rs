//! Forward and backward kernels for the differentiable primitives.
//!
//! All functions are pure: they take tensors by reference and return new
//! tensors. The 1x1/stride-1 convolution (the hot path of the model) and the
//! linear map are dispatched to a GEMM kernel; everything else is direct
//! loops, which is adequate for the small kernels used here (3x3 depthwise,
//! 2x2 stride-2 downsampling).

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution. `groups == in_channels` gives a depthwise
/// convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding,
            groups: channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("conv channels must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::InvalidConfig("conv kernel must be positive".into()));
        }
        if self.stride < 1 {
            return Err(Error::InvalidConfig("conv stride must be >= 1".into()));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidConfig(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Expected weight shape `[C_out, C_in/groups, kh, kw]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Output spatial dims for an `(h, w)` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {}x{} smaller than kernel {}x{}", h, w, kh, kw),
            ));
        }
        Ok((
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn is_depthwise_3x3_s1p1(&self) -> bool {
        self.groups == self.in_channels
            && self.out_channels == self.in_channels
            && self.kernel == (3, 3)
            && self.stride == 1
            && self.padding == 1
    }
}

/// Row-major transpose of an `[m, n]` matrix.
fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a[i * n + j]);
        }
    }
    out
}


/// Unfolds the input into a `[C_in*kh*kw, oh*ow]` patch matrix (zero-padded).
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let mut cols = vec![T::zero(); c * kh * kw * oh * ow];
    let mut row = 0usize;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if spec.stride == 1 {
                        // contiguous copy of the valid x-range
                        let ix0 = kx as isize - spec.padding as isize;
                        let start = (-ix0).max(0) as usize;
                        let end = (w as isize - ix0).min(ow as isize).max(0) as usize;
                        if start < end {
                            let s0 = (ix0 + start as isize) as usize;
                            dst_row[start..end].copy_from_slice(&src_row[s0..s0 + end - start]);
                        }
                    } else {
                        for (ox, dv) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *dv = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an input-shaped buffer; adjoint of
/// [`im2col`].
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let mut row = 0usize;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut dx[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &sv) in src_row.iter().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + sv;
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise 3x3, stride 1, pad 1: nine shifted multiply-add passes over
/// contiguous row slices per channel.
fn dw3x3_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, wd: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for v in dst.iter_mut() {
            *v = b[ci];
        }
        for ky in 0..3usize {
            for kx in 0..3usize {
                let wk = wd[ci * 9 + ky * 3 + kx];
                // output x-range where the tap stays in bounds
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..h {
                    let iy = (oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xin[iy as usize * w + (x0 + kx - 1)..iy as usize * w + (x1 + kx - 1)];
                    let drow = &mut dst[oy * w + x0..oy * w + x1];
                    for (d, &s) in drow.iter_mut().zip(src) {
                        *d = *d + wk * s;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`dw3x3_forward`]: per-tap slice passes for both the input
/// gradient (transposed taps) and the weight gradient (slice dot products).
fn dw3x3_backward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    wd: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); c * h * w];
    let mut dw = vec![T::zero(); c * 9];
    for ci in 0..c {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        let gout = &dy[ci * h * w..(ci + 1) * h * w];
        let gin = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let wk = wd[ci * 9 + ky * 3 + kx];
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                // input-gradient scatter and weight-gradient reduction as
                // separate passes so each vectorizes
                for oy in 0..h {
                    let iy = (oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let sbase = iy as usize * w + (x0 + kx - 1);
                    let grow = &gout[oy * w + x0..oy * w + x1];
                    let dst = &mut gin[sbase..sbase + (x1 - x0)];
                    for (d, &g) in dst.iter_mut().zip(grow) {
                        *d = *d + wk * g;
                    }
                }
                let mut wacc = T::zero();
                for oy in 0..h {
                    let iy = (oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let sbase = iy as usize * w + (x0 + kx - 1);
                    let src = &xin[sbase..sbase + (x1 - x0)];
                    let grow = &gout[oy * w + x0..oy * w + x1];
                    let mut acc = T::zero();
                    for (&g, &s) in grow.iter().zip(src) {
                        acc = acc + g * s;
                    }
                    wacc = wacc + acc;
                }
                dw[ci * 9 + ky * 3 + kx] = dw[ci * 9 + ky * 3 + kx] + wacc;
            }
        }
    }
    (dx, dw)
}

fn check_conv_args<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    spec.validate()?;
    if input.rank() != 3 || input.shape()[0] != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?}, expected [{}, H, W]",
                input.shape(),
                spec.in_channels
            ),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?}, expected {:?}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?}, expected [{}]", bias.shape(), spec.out_channels),
        ));
    }
    spec.out_hw(input.shape()[1], input.shape()[2])
}

/// 2-D cross-correlation with stride, zero padding, and channel groups.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_args(input, spec, weight, bias)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (kh, kw) = spec.kernel;
    let co_n = spec.out_channels;

    if spec.is_pointwise() {
        // out[C_out, HW] = W[C_out, C_in] * in[C_in, HW] + b; the output is
        // seeded with the bias and accumulated into (beta = 1)
        let hw = h * w;
        let ci_n = spec.in_channels;
        let b = bias.data();
        let mut out = Vec::with_capacity(co_n * hw);
        for co in 0..co_n {
            out.extend(std::iter::repeat(b[co]).take(hw));
        }
        unsafe {
            T::gemm(
                co_n,
                ci_n,
                hw,
                T::one(),
                weight.data().as_ptr(),
                ci_n as isize,
                1,
                input.data().as_ptr(),
                hw as isize,
                1,
                T::one(),
                out.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        return Tensor::new(vec![co_n, oh, ow], out);
    }

    if spec.is_depthwise_3x3_s1p1() {
        let out = dw3x3_forward(
            input.data(),
            spec.in_channels,
            h,
            w,
            weight.data(),
            bias.data(),
        );
        return Tensor::new(vec![co_n, oh, ow], out);
    }

    if spec.groups == 1 {
        // im2col + GEMM
        let ck = spec.in_channels * kh * kw;
        let cols = im2col(input.data(), spec.in_channels, h, w, spec, oh, ow);
        let mut out = vec![T::zero(); co_n * oh * ow];
        unsafe {
            T::gemm(
                co_n,
                ck,
                oh * ow,
                T::one(),
                weight.data().as_ptr(),
                ck as isize,
                1,
                cols.as_ptr(),
                (oh * ow) as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                (oh * ow) as isize,
                1,
            );
        }
        let b = bias.data();
        for co in 0..co_n {
            let bv = b[co];
            for v in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                *v = *v + bv;
            }
        }
        return Tensor::new(vec![co_n, oh, ow], out);
    }

    let ci_per_g = spec.in_channels / spec.groups;
    let co_per_g = spec.out_channels / spec.groups;
    let x = input.data();
    let wd = weight.data();
    let b = bias.data();
    let mut out = vec![T::zero(); co_n * oh * ow];
    for co in 0..co_n {
        let g = co / co_per_g;
        let ci0 = g * ci_per_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ci_l in 0..ci_per_g {
                    let ci = ci0 + ci_l;
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            let wi = ((co * ci_per_g + ci_l) * kh + ky) * kw + kx;
                            acc = acc + x[xi] * wd[wi];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![co_n, oh, ow], out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = spec.out_hw(h, w)?;
    if dout.shape() != [spec.out_channels, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "dout {:?}, expected [{}, {}, {}]",
                dout.shape(),
                spec.out_channels,
                oh,
                ow
            ),
        ));
    }
    let (kh, kw) = spec.kernel;
    let co_n = spec.out_channels;
    let dy = dout.data();

    let mut dbias = vec![T::zero(); co_n];
    for co in 0..co_n {
        let mut acc = T::zero();
        for &v in &dy[co * oh * ow..(co + 1) * oh * ow] {
            acc = acc + v;
        }
        dbias[co] = acc;
    }
    let dbias = Tensor::new(vec![co_n], dbias)?;

    if spec.is_pointwise() {
        let hw = h * w;
        let ci_n = spec.in_channels;
        // materialize the small transposes so both GEMMs see contiguous
        // row-major operands (strided packing dominates at these sizes)
        let wt = transpose(weight.data(), co_n, ci_n);
        // dX = W^T * dY
        let mut dx = vec![T::zero(); ci_n * hw];
        unsafe {
            T::gemm(
                ci_n,
                co_n,
                hw,
                T::one(),
                wt.as_ptr(),
                co_n as isize,
                1,
                dy.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                dx.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        // dW = dY * X^T
        let xt = transpose(input.data(), ci_n, hw);
        let mut dw = vec![T::zero(); co_n * ci_n];
        unsafe {
            T::gemm(
                co_n,
                hw,
                ci_n,
                T::one(),
                dy.as_ptr(),
                hw as isize,
                1,
                xt.as_ptr(),
                ci_n as isize,
                1,
                T::zero(),
                dw.as_mut_ptr(),
                ci_n as isize,
                1,
            );
        }
        return Ok((
            Tensor::new(vec![ci_n, h, w], dx)?,
            Tensor::new(spec.weight_shape().to_vec(), dw)?,
            dbias,
        ));
    }

    if spec.is_depthwise_3x3_s1p1() {
        let (dx, dw) = dw3x3_backward(input.data(), spec.in_channels, h, w, weight.data(), dy);
        return Ok((
            Tensor::new(input.shape().to_vec(), dx)?,
            Tensor::new(spec.weight_shape().to_vec(), dw)?,
            dbias,
        ));
    }

    if spec.groups == 1 {
        let ck = spec.in_channels * kh * kw;
        let hw_out = oh * ow;
        // dW = dY * cols^T
        let cols = im2col(input.data(), spec.in_channels, h, w, spec, oh, ow);
        let colst = transpose(&cols, ck, hw_out);
        let mut dw = vec![T::zero(); co_n * ck];
        unsafe {
            T::gemm(
                co_n,
                hw_out,
                ck,
                T::one(),
                dy.as_ptr(),
                hw_out as isize,
                1,
                colst.as_ptr(),
                ck as isize,
                1,
                T::zero(),
                dw.as_mut_ptr(),
                ck as isize,
                1,
            );
        }
        // dX = col2im(W^T * dY)
        let wt = transpose(weight.data(), co_n, ck);
        let mut dcols = vec![T::zero(); ck * hw_out];
        unsafe {
            T::gemm(
                ck,
                co_n,
                hw_out,
                T::one(),
                wt.as_ptr(),
                co_n as isize,
                1,
                dy.as_ptr(),
                hw_out as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                hw_out as isize,
                1,
            );
        }
        let mut dx = vec![T::zero(); input.len()];
        col2im(&dcols, spec.in_channels, h, w, spec, oh, ow, &mut dx);
        return Ok((
            Tensor::new(input.shape().to_vec(), dx)?,
            Tensor::new(spec.weight_shape().to_vec(), dw)?,
            dbias,
        ));
    }

    let ci_per_g = spec.in_channels / spec.groups;
    let co_per_g = spec.out_channels / spec.groups;
    let x = input.data();
    let wd = weight.data();
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    for co in 0..co_n {
        let g = co / co_per_g;
        let ci0 = g * ci_per_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let go = dy[(co * oh + oy) * ow + ox];
                for ci_l in 0..ci_per_g {
                    let ci = ci0 + ci_l;
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            let wi = ((co * ci_per_g + ci_l) * kh + ky) * kw + kx;
                            dw[wi] = dw[wi] + go * x[xi];
                            dx[xi] = dx[xi] + go * wd[wi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(spec.weight_shape().to_vec(), dw)?,
        dbias,
    ))
}

/// Cached statistics from a layer-norm forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormCache<T> {
    pub mean: T,
    pub inv_std: T,
}

fn check_ln_args<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "layer_norm",
            format!("input {:?}, expected [C, H, W]", x.shape()),
        ));
    }
    let c = x.shape()[0];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?}, expected [{}]",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    Ok(c)
}

/// Layer normalization over all of `(C, H, W)` jointly, followed by a
/// per-channel affine transform.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = check_ln_args(x, gamma, beta)?;
    if eps <= 0.0 {
        return Err(Error::InvalidConfig("layer_norm eps must be > 0".into()));
    }
    let n = x.len();
    let hw = n / c;
    let xd = x.data();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut mean = T::zero();
    for &v in xd {
        mean = mean + v;
    }
    mean = mean * inv_n;
    let mut var = T::zero();
    for &v in xd {
        let d = v - mean;
        var = var + d * d;
    }
    var = var * inv_n;
    let inv_std = T::one() / (var + T::from_f64(eps)).sqrt();

    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![T::zero(); n];
    for ch in 0..c {
        let (gc, bc) = (g[ch], b[ch]);
        for i in 0..hw {
            let idx = ch * hw + i;
            out[idx] = gc * ((xd[idx] - mean) * inv_std) + bc;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { mean, inv_std },
    ))
}

/// Gradients of [`layer_norm`] w.r.t. input, gamma, and beta.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = x.shape()[0];
    let n = x.len();
    let hw = n / c;
    let xd = x.data();
    let dy = dout.data();
    let g = gamma.data();
    let inv_n = T::from_f64(1.0 / n as f64);

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    // gsum = mean(dy*gamma), gxsum = mean(dy*gamma*xhat)
    let mut gsum = T::zero();
    let mut gxsum = T::zero();
    for ch in 0..c {
        let gc = g[ch];
        let mut dg = T::zero();
        let mut db = T::zero();
        for i in 0..hw {
            let idx = ch * hw + i;
            let xhat = (xd[idx] - cache.mean) * cache.inv_std;
            let d = dy[idx];
            dg = dg + d * xhat;
            db = db + d;
            gsum = gsum + d * gc;
            gxsum = gxsum + d * gc * xhat;
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
    }
    gsum = gsum * inv_n;
    gxsum = gxsum * inv_n;

    let mut dx = vec![T::zero(); n];
    for ch in 0..c {
        let gc = g[ch];
        for i in 0..hw {
            let idx = ch * hw + i;
            let xhat = (xd[idx] - cache.mean) * cache.inv_std;
            dx[idx] = cache.inv_std * (dy[idx] * gc - gsum - xhat * gxsum);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Global pooling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

/// Per-channel global pooling `[C, H, W] -> [C, 1, 1]`. For `Max` the
/// returned indices mark the (first) maximum of each channel, used by the
/// backward pass.
pub fn pool_global<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "pool_global",
            format!("input {:?}, expected [C, H, W]", x.shape()),
        ));
    }
    let c = x.shape()[0];
    let hw = x.shape()[1] * x.shape()[2];
    if hw == 0 {
        return Err(Error::shape("pool_global", "empty spatial dims"));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); c];
    let mut argmax = Vec::new();
    match mode {
        PoolMode::Mean => {
            let inv = T::from_f64(1.0 / hw as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for &v in &xd[ch * hw..(ch + 1) * hw] {
                    acc = acc + v;
                }
                out[ch] = acc * inv;
            }
        }
        PoolMode::Max => {
            argmax.reserve(c);
            for ch in 0..c {
                let slice = &xd[ch * hw..(ch + 1) * hw];
                let mut best = 0usize;
                for (i, &v) in slice.iter().enumerate() {
                    if v > slice[best] {
                        best = i;
                    }
                }
                out[ch] = slice[best];
                argmax.push(ch * hw + best);
            }
        }
    }
    Ok((Tensor::new(vec![c, 1, 1], out)?, argmax))
}

/// Depth-to-space rearrangement `[r*r*C, H, W] -> [C, r*H, r*W]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("input {:?}, expected [C, H, W]", x.shape()),
        ));
    }
    if r == 0 {
        return Err(Error::InvalidConfig("pixel_shuffle factor must be >= 1".into()));
    }
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c_in % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channels {} not divisible by r^2 = {}", c_in, r * r),
        ));
    }
    let c = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ci = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for xw in 0..w {
                        out[(ch * oh + y * r + dy) * ow + xw * r + dx] =
                            xd[(ci * h + y) * w + xw];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Space-to-depth rearrangement `[C, r*H, r*W] -> [r*r*C, H, W]`; exact
/// inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("input {:?}, expected [C, H, W]", x.shape()),
        ));
    }
    if r == 0 {
        return Err(Error::InvalidConfig("pixel_unshuffle factor must be >= 1".into()));
    }
    let (c, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if ih % r != 0 || iw % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial {}x{} not divisible by r = {}", ih, iw, r),
        ));
    }
    let (h, w) = (ih / r, iw / r);
    let xd = x.data();
    let mut out = vec![T::zero(); c * r * r * h * w];
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let co = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for xw in 0..w {
                        out[(co * h + y) * w + xw] =
                            xd[(ch * ih + y * r + dy) * iw + xw * r + dx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * r * r, h, w], out)
}

fn check_linear_args<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    if x.rank() != 1 || weight.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("x {:?} / weight {:?}", x.shape(), weight.shape()),
        ));
    }
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if x.shape()[0] != d_in || bias.shape() != [d_out] {
        return Err(Error::shape(
            "linear",
            format!(
                "x {:?}, weight {:?}, bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    Ok((d_out, d_in))
}

/// Affine map `y = W x + b` with `W: [d_out, d_in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = check_linear_args(x, weight, bias)?;
    let xd = x.data();
    let wd = weight.data();
    let mut out = bias.data().to_vec();
    for o in 0..d_out {
        let row = &wd[o * d_in..(o + 1) * d_in];
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(xd.iter()) {
            acc = acc + *a * *b;
        }
        out[o] = out[o] + acc;
    }
    Tensor::new(vec![d_out], out)
}

/// Gradients of [`linear`] w.r.t. input, weight, and bias.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if dout.shape() != [d_out] {
        return Err(Error::shape(
            "linear_backward",
            format!("dout {:?}, expected [{}]", dout.shape(), d_out),
        ));
    }
    let xd = x.data();
    let wd = weight.data();
    let dy = dout.data();
    let mut dx = vec![T::zero(); d_in];
    let mut dw = vec![T::zero(); d_out * d_in];
    for o in 0..d_out {
        let go = dy[o];
        let row = &wd[o * d_in..(o + 1) * d_in];
        let drow = &mut dw[o * d_in..(o + 1) * d_in];
        for i in 0..d_in {
            dx[i] = dx[i] + go * row[i];
            drow[i] = go * xd[i];
        }
    }
    Ok((
        Tensor::new(vec![d_in], dx)?,
        Tensor::new(vec![d_out, d_in], dw)?,
        dout.clone(),
    ))
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Gradient of [`silu`]: `dy * sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
    dout.zip_map(x, "silu_backward", |d, v| {
        let s = sigmoid(v);
        d * s * (T::one() + v * (T::one() - s))
    })
}
