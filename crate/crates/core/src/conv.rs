//! Convolution kernels: standard (im2col + GEMM), depthwise, bilinear
//! sampling and deformable convolution, each with its adjoint.
//!
//! All feature maps are single-image `[C, H, W]`. Padding is zero-fill.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride, per-axis zero padding and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: (usize, usize),
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize, kernel: usize, pad: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        match (
            self.output_extent(h, kh, self.padding.0),
            self.output_extent(w, kw, self.padding.1),
        ) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(format!(
                "non-positive conv output extent: input {h}x{w}, kernel {kh}x{kw}, {self:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    /// `[C_out, C_in, k_h, k_w]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Tensor, geometry: ConvGeometry) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!(
                "conv weight must be [C_out, C_in, k_h, k_w], got {:?}",
                weight.dims()
            )));
        }
        if bias.dims() != [weight.dims()[0]] {
            return Err(Error::shape(format!(
                "conv bias {:?} does not match C_out = {}",
                bias.dims(),
                weight.dims()[0]
            )));
        }
        if geometry.stride == 0 || geometry.dilation == 0 {
            return Err(Error::config("stride and dilation must be positive"));
        }
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }

    /// Stride-1 convolution padded so spatial extents are preserved.
    /// Kernel extents must be odd.
    pub fn same(weight: Tensor, bias: Tensor, dilation: usize) -> Result<Self> {
        let (kh, kw) = (weight.dims()[2], weight.dims()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "spatially preserving conv needs odd kernel extents, got {kh}x{kw}"
            )));
        }
        let geometry = ConvGeometry {
            stride: 1,
            padding: (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2),
            dilation,
        };
        Self::new(weight, bias, geometry)
    }

    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize, dilation: usize) -> Result<Self> {
        Self::same(
            Tensor::zeros(&[c_out, c_in, kh, kw])?,
            Tensor::zeros(&[c_out])?,
            dilation,
        )
    }

    /// Spatially preserving conv with weights and bias uniform in `(-scale, scale)`.
    pub fn seeded(
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize),
        dilation: usize,
        scale: f64,
        rng: &mut crate::rng::RngState,
    ) -> Result<Self> {
        let w = Tensor::uniform(&[c_out, c_in, kernel.0, kernel.1], rng, -scale, scale)?;
        let b = Tensor::uniform(&[c_out], rng, -scale, scale)?;
        Self::same(w, b, dilation)
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.data_mut());
        f(&format!("{prefix}.bias"), self.bias.data_mut());
    }

    /// Records this convolution on `tape`, registering its weight and bias
    /// as `{prefix}.weight` / `{prefix}.bias`.
    pub fn on_tape(&self, tape: &mut crate::tape::Tape, x: crate::tape::NodeId, prefix: &str) -> Result<crate::tape::NodeId> {
        let w = tape.param(format!("{prefix}.weight"), self.weight.clone());
        let b = tape.param(format!("{prefix}.bias"), self.bias.clone());
        tape.conv2d(x, w, b, self.geometry)
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dims()[2], self.weight.dims()[3])
    }
}

/// 3×3 deformable convolution (offsets only, no modulation mask).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableParams {
    pub base: Conv2dParams,
    /// Predicts `2·k_h·k_w` offset channels ordered `(Δy_t, Δx_t)` per tap.
    pub offset_predictor: Conv2dParams,
}

impl DeformableParams {
    pub fn new(base: Conv2dParams, offset_predictor: Conv2dParams) -> Result<Self> {
        let (kh, kw) = base.kernel();
        if offset_predictor.c_out() != 2 * kh * kw {
            return Err(Error::shape(format!(
                "offset predictor emits {} channels, expected 2*{kh}*{kw}",
                offset_predictor.c_out()
            )));
        }
        if offset_predictor.c_in() != base.c_in() {
            return Err(Error::shape("offset predictor and base disagree on C_in"));
        }
        Ok(Self {
            base,
            offset_predictor,
        })
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.base.visit_mut(prefix, f);
        self.offset_predictor.visit_mut(&format!("{prefix}.offset"), f);
    }

    pub fn on_tape(&self, tape: &mut crate::tape::Tape, x: crate::tape::NodeId, prefix: &str) -> Result<crate::tape::NodeId> {
        let offsets = self.offset_predictor.on_tape(tape, x, &format!("{prefix}.offset"))?;
        let w = tape.param(format!("{prefix}.weight"), self.base.weight.clone());
        let b = tape.param(format!("{prefix}.bias"), self.base.bias.clone());
        tape.deformable_conv2d(x, offsets, w, b)
    }

    /// Wraps `base` with a zero-initialized 3×3 offset predictor.
    pub fn with_zero_offsets(base: Conv2dParams) -> Result<Self> {
        let (kh, kw) = base.kernel();
        let pred = Conv2dParams::zeros(2 * kh * kw, base.c_in(), 3, 3, 1)?;
        Self::new(base, pred)
    }
}

fn check_map(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "{what} expects a [C, H, W] map, got {:?}",
            x.dims()
        )));
    }
    Ok((x.dims()[0], x.dims()[1], x.dims()[2]))
}

// ---- standard convolution ---------------------------------------------------

fn row_sums(m: &Tensor) -> Tensor {
    let n = m.dims()[1];
    let sums = m.data().chunks(n).map(|r| r.iter().sum()).collect();
    Tensor::derived(vec![m.dims()[0]], sums, m.dtype())
}

fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    g: &ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let xd = x.data();
    let cols = ho * wo;
    let mut out = vec![0.0; c * kh * kw * cols];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * cols;
                for oy in 0..ho {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j * g.dilation) as isize - g.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            out[row + oy * wo + ox] = xd[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: &ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j * g.dilation) as isize - g.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let (c, h, wd) = check_map(x, "conv2d")?;
    let (co, ci, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
    if ci != c {
        return Err(Error::shape(format!(
            "conv2d input has {c} channels but weight {:?} expects {ci}",
            w.dims()
        )));
    }
    if b.dims() != [co] {
        return Err(Error::shape(format!("conv2d bias {:?} for C_out {co}", b.dims())));
    }
    let (ho, wo) = g.output_hw(h, wd, kh, kw)?;
    let cols = Tensor::new(&[c * kh * kw, ho * wo], im2col(x, kh, kw, g, ho, wo))?;
    let wm = w.reshape(&[co, c * kh * kw])?;
    let mut out = wm.matmul(&cols)?.into_data();
    for (o, row) in out.chunks_mut(ho * wo).enumerate() {
        let bo = b.data()[o];
        for v in row {
            *v += bo;
        }
    }
    Ok(Tensor::derived(vec![co, ho, wo], out, x.dtype()))
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeometry,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (co, _, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
    let (ho, wo) = (grad.dims()[1], grad.dims()[2]);
    let gm = grad.reshape(&[co, ho * wo])?;
    let cols = Tensor::new(&[c * kh * kw, ho * wo], im2col(x, kh, kw, g, ho, wo))?;
    let gw = gm.matmul(&cols.transpose()?)?.reshape(w.dims())?;
    let gb = row_sums(&gm);
    let wm = w.reshape(&[co, c * kh * kw])?;
    let gcols = wm.transpose()?.matmul(&gm)?;
    let gx = col2im(gcols.data(), c, h, wd, kh, kw, g, ho, wo);
    Ok((Tensor::derived(x.dims().to_vec(), gx, x.dtype()), gw, gb))
}

pub fn conv2d(input: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    conv2d_forward(input, &p.weight, &p.bias, &p.geometry)
}

// ---- depthwise --------------------------------------------------------------

fn check_depthwise(x: &Tensor, k: &Tensor, padding: usize) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = check_map(x, "depthwise_conv2d")?;
    if k.rank() != 3 || k.dims()[1] != k.dims()[2] {
        return Err(Error::shape(format!(
            "depthwise kernel must be [C, k, k], got {:?}",
            k.dims()
        )));
    }
    let ks = k.dims()[1];
    if ks.is_multiple_of(2) {
        return Err(Error::config(format!("depthwise kernel extent {ks} must be odd")));
    }
    if k.dims()[0] != c {
        return Err(Error::shape(format!(
            "depthwise kernel has {} channels, input has {c}",
            k.dims()[0]
        )));
    }
    if padding != (ks - 1) / 2 {
        return Err(Error::config(format!(
            "depthwise padding {padding} must be (k-1)/2 = {}",
            (ks - 1) / 2
        )));
    }
    Ok((c, h, w, ks))
}

pub(crate) fn depthwise_forward(x: &Tensor, k: &Tensor, padding: usize) -> Result<Tensor> {
    let (c, h, w, ks) = check_depthwise(x, k, padding)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; c * h * w];
    let r = padding as isize;
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        let kern = &kd[ch * ks * ks..(ch + 1) * ks * ks];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (ti, &kv) in kern.iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            let dy = (ti / ks) as isize - r;
            let dx = (ti % ks) as isize - r;
            for y in 0..h as isize {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx = x + dx;
                    if sx >= 0 && sx < w as isize {
                        dst[(y * w as isize + x) as usize] += kv * plane[(sy * w as isize + sx) as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor::derived(vec![c, h, w], out, x.dtype()))
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn depthwise_backward(
    x: &Tensor,
    k: &Tensor,
    padding: usize,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w, ks) = check_depthwise(x, k, padding)?;
    let (xd, kd, gd) = (x.data(), k.data(), grad.data());
    let mut gx = vec![0.0; c * h * w];
    let mut gk = vec![0.0; c * ks * ks];
    let r = padding as isize;
    for ch in 0..c {
        let base = ch * h * w;
        for ti in 0..ks * ks {
            let dy = (ti / ks) as isize - r;
            let dx = (ti % ks) as isize - r;
            let kv = kd[ch * ks * ks + ti];
            let mut acc = 0.0;
            for y in 0..h as isize {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w as isize {
                    let sx = xx + dx;
                    if sx >= 0 && sx < w as isize {
                        let go = gd[base + (y * w as isize + xx) as usize];
                        let si = base + (sy * w as isize + sx) as usize;
                        acc += go * xd[si];
                        gx[si] += go * kv;
                    }
                }
            }
            gk[ch * ks * ks + ti] = acc;
        }
    }
    Ok((
        Tensor::derived(x.dims().to_vec(), gx, x.dtype()),
        Tensor::derived(k.dims().to_vec(), gk, k.dtype()),
    ))
}

pub fn depthwise_conv2d(input: &Tensor, weights: &Tensor, padding: usize) -> Result<Tensor> {
    depthwise_forward(input, weights, padding)
}

// ---- bilinear sampling ------------------------------------------------------

/// The four lattice neighbours of `(y, x)` with their interpolation weights
/// and the weights' partial derivatives in y and x. Neighbours outside the
/// `h × w` support are skipped.
#[inline]
fn bilinear_taps(h: usize, w: usize, y: f64, x: f64, mut f: impl FnMut(usize, f64, f64, f64)) {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let wy = [(1.0 - fy, -1.0), (fy, 1.0)];
    let wx = [(1.0 - fx, -1.0), (fx, 1.0)];
    for (a, &(wya, dya)) in wy.iter().enumerate() {
        let yy = y0 + a as isize;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for (b, &(wxb, dxb)) in wx.iter().enumerate() {
            let xx = x0 + b as isize;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            f(yy as usize * w + xx as usize, wya * wxb, dya * wxb, wya * dxb);
        }
    }
}

/// Bilinear read of every channel at a fractional location, zero outside.
pub fn bilinear_sample(input: &Tensor, y: f64, x: f64) -> Result<Vec<f64>> {
    let (c, h, w) = check_map(input, "bilinear_sample")?;
    if !y.is_finite() || !x.is_finite() {
        return Err(Error::Numeric(format!("non-finite sample location ({y}, {x})")));
    }
    let d = input.data();
    let mut out = vec![0.0; c];
    bilinear_taps(h, w, y, x, |pix, wt, _, _| {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += wt * d[ch * h * w + pix];
        }
    });
    Ok(out)
}

// ---- deformable convolution -------------------------------------------------

fn check_deform(x: &Tensor, offsets: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, wd) = check_map(x, "deformable_conv2d")?;
    if w.rank() != 4 || w.dims()[1] != c {
        return Err(Error::shape(format!(
            "deformable weight {:?} does not match input channels {c}",
            w.dims()
        )));
    }
    let (kh, kw) = (w.dims()[2], w.dims()[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::config("deformable kernel extents must be odd"));
    }
    if offsets.dims() != [2 * kh * kw, h, wd] {
        return Err(Error::shape(format!(
            "offset map {:?} does not match expected [{}, {h}, {wd}]",
            offsets.dims(),
            2 * kh * kw
        )));
    }
    Ok((c, h, wd, kh, kw))
}

/// Visits every sampling location of a stride-1 "same" deformable conv:
/// `(tap, pixel, y, x)` with `pixel = oy·W + ox`.
pub(crate) fn for_each_deform_sample(
    offsets: &Tensor,
    kh: usize,
    kw: usize,
    mut f: impl FnMut(usize, usize, f64, f64),
) {
    let (h, w) = (offsets.dims()[1], offsets.dims()[2]);
    let od = offsets.data();
    let (ry, rx) = ((kh / 2) as f64, (kw / 2) as f64);
    for t in 0..kh * kw {
        let (ti, tj) = ((t / kw) as f64, (t % kw) as f64);
        let dy = &od[(2 * t) * h * w..(2 * t + 1) * h * w];
        let dx = &od[(2 * t + 1) * h * w..(2 * t + 2) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let p = oy * w + ox;
                let sy = oy as f64 + ti - ry + dy[p];
                let sx = ox as f64 + tj - rx + dx[p];
                f(t, p, sy, sx);
            }
        }
    }
}

fn deform_columns(x: &Tensor, offsets: &Tensor, kh: usize, kw: usize) -> Vec<f64> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let n = h * w;
    let t_count = kh * kw;
    let xd = x.data();
    let mut cols = vec![0.0; c * t_count * n];
    for_each_deform_sample(offsets, kh, kw, |t, p, sy, sx| {
        bilinear_taps(h, w, sy, sx, |pix, wt, _, _| {
            for ch in 0..c {
                cols[(ch * t_count + t) * n + p] += wt * xd[ch * n + pix];
            }
        });
    });
    cols
}

pub(crate) fn deform_forward(x: &Tensor, offsets: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !offsets.is_finite() {
        return Err(Error::Numeric("non-finite deformable offsets".into()));
    }
    let (c, h, wd, kh, kw) = check_deform(x, offsets, w)?;
    let co = w.dims()[0];
    if b.dims() != [co] {
        return Err(Error::shape(format!("deformable bias {:?} for C_out {co}", b.dims())));
    }
    let cols = Tensor::new(&[c * kh * kw, h * wd], deform_columns(x, offsets, kh, kw))?;
    let mut out = w.reshape(&[co, c * kh * kw])?.matmul(&cols)?.into_data();
    for (o, row) in out.chunks_mut(h * wd).enumerate() {
        for v in row {
            *v += b.data()[o];
        }
    }
    Ok(Tensor::derived(vec![co, h, wd], out, x.dtype()))
}

/// Returns `(d_input, d_offsets, d_weight, d_bias)`.
pub(crate) fn deform_backward(
    x: &Tensor,
    offsets: &Tensor,
    w: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (c, h, wd, kh, kw) = check_deform(x, offsets, w)?;
    let co = w.dims()[0];
    let n = h * wd;
    let t_count = kh * kw;
    let gm = grad.reshape(&[co, n])?;
    let cols = Tensor::new(&[c * t_count, n], deform_columns(x, offsets, kh, kw))?;
    let gw = gm.matmul(&cols.transpose()?)?.reshape(w.dims())?;
    let gb = row_sums(&gm);
    let gcols = w.reshape(&[co, c * t_count])?.transpose()?.matmul(&gm)?;
    let gc = gcols.data();
    let xd = x.data();
    let mut gx = vec![0.0; c * n];
    let mut goff = vec![0.0; 2 * t_count * n];
    for_each_deform_sample(offsets, kh, kw, |t, p, sy, sx| {
        bilinear_taps(h, wd, sy, sx, |pix, wt, dwy, dwx| {
            let mut ay = 0.0;
            let mut ax = 0.0;
            for ch in 0..c {
                let g = gc[(ch * t_count + t) * n + p];
                gx[ch * n + pix] += g * wt;
                let v = xd[ch * n + pix];
                ay += g * v * dwy;
                ax += g * v * dwx;
            }
            goff[(2 * t) * n + p] += ay;
            goff[(2 * t + 1) * n + p] += ax;
        });
    });
    Ok((
        Tensor::derived(x.dims().to_vec(), gx, x.dtype()),
        Tensor::derived(offsets.dims().to_vec(), goff, offsets.dtype()),
        gw,
        gb,
    ))
}

/// Deformable convolution with an externally supplied offset map.
pub fn deformable_conv2d_with_offsets(input: &Tensor, offsets: &Tensor, base: &Conv2dParams) -> Result<Tensor> {
    deform_forward(input, offsets, &base.weight, &base.bias)
}

pub fn deformable_conv2d(input: &Tensor, p: &DeformableParams) -> Result<Tensor> {
    let offsets = conv2d(input, &p.offset_predictor)?;
    deformable_conv2d_with_offsets(input, &offsets, &p.base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{conv2d_reference, deformable_reference};
    use crate::rng::RngState;

    fn rand(dims: &[usize], rng: &mut RngState) -> Tensor {
        Tensor::uniform(dims, rng, -1.0, 1.0).unwrap()
    }

    #[test]
    fn one_by_one_identity() {
        let mut rng = RngState::new(1);
        let x = rand(&[1, 5, 4], &mut rng);
        let p = Conv2dParams::same(Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        assert!(conv2d(&x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Tensor::full(&[1, 5, 5], 1.0).unwrap();
        let p = Conv2dParams::same(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.at(&[0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 2]), 6.0);
    }

    #[test]
    fn dilated_matches_reference() {
        let mut rng = RngState::new(2);
        let x = rand(&[3, 8, 8], &mut rng);
        let p = Conv2dParams::same(rand(&[2, 3, 3, 3], &mut rng), rand(&[2], &mut rng), 2).unwrap();
        assert_eq!(p.geometry.padding, (2, 2));
        let y = conv2d(&x, &p).unwrap();
        let r = conv2d_reference(&x, &p).unwrap();
        assert!(y.max_abs_diff(&r) <= 1e-12);
    }

    #[test]
    fn asymmetric_paddings_preserve_dims() {
        let mut rng = RngState::new(3);
        let x = rand(&[2, 6, 7], &mut rng);
        for (kh, kw, pad) in [(1, 3, (0, 1)), (3, 1, (1, 0)), (1, 5, (0, 2)), (5, 1, (2, 0))] {
            let p = Conv2dParams::same(rand(&[2, 2, kh, kw], &mut rng), rand(&[2], &mut rng), 1).unwrap();
            assert_eq!(p.geometry.padding, pad);
            let y = conv2d(&x, &p).unwrap();
            assert_eq!(y.dims(), &[2, 6, 7]);
            assert!(y.max_abs_diff(&conv2d_reference(&x, &p).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn strided_conv_output_extent() {
        let mut rng = RngState::new(4);
        let x = rand(&[1, 9, 9], &mut rng);
        let g = ConvGeometry { stride: 2, padding: (1, 0), dilation: 1 };
        let p = Conv2dParams::new(rand(&[1, 1, 3, 3], &mut rng), rand(&[1], &mut rng), g).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.dims(), &[1, 5, 4]);
        assert!(y.max_abs_diff(&conv2d_reference(&x, &p).unwrap()) <= 1e-12);
    }

    #[test]
    fn conv_errors() {
        let mut rng = RngState::new(5);
        let x = rand(&[2, 4, 4], &mut rng);
        let p = Conv2dParams::same(rand(&[1, 3, 3, 3], &mut rng), rand(&[1], &mut rng), 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
        let g = ConvGeometry { stride: 1, padding: (0, 0), dilation: 3 };
        let p = Conv2dParams::new(rand(&[1, 2, 3, 3], &mut rng), rand(&[1], &mut rng), g).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn impulse_support_matches_dilated_span() {
        // a single output pixel sees exactly a (d(k-1)+1)^2 window
        let (k, d) = (3, 2);
        let p = Conv2dParams::same(Tensor::full(&[1, 1, k, k], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), d).unwrap();
        let mut x = Tensor::zeros(&[1, 11, 11]).unwrap();
        x.set(&[0, 5, 5], 1.0);
        let y = conv2d(&x, &p).unwrap();
        let reach = d * (k - 1) / 2;
        for yy in 0..11usize {
            for xx in 0..11usize {
                let dist = yy.abs_diff(5).max(xx.abs_diff(5));
                if dist > reach {
                    assert_eq!(y.at(&[0, yy, xx]), 0.0);
                }
            }
        }
        assert_eq!(y.at(&[0, 5 + reach, 5 + reach]), 1.0);
        // holes of the dilated lattice stay untouched
        assert_eq!(y.at(&[0, 6, 5]), 0.0);
    }

    #[test]
    fn depthwise_cases() {
        let mut rng = RngState::new(6);
        let x = rand(&[4, 6, 6], &mut rng);
        let id1 = Tensor::full(&[4, 1, 1], 1.0).unwrap();
        assert!(depthwise_conv2d(&x, &id1, 0).unwrap().bit_eq(&x));
        for k in [3usize, 5] {
            let mut delta = Tensor::zeros(&[4, k, k]).unwrap();
            for c in 0..4 {
                delta.set(&[c, k / 2, k / 2], 1.0);
            }
            assert!(depthwise_conv2d(&x, &delta, k / 2).unwrap().bit_eq(&x));
        }
        let kern = rand(&[4, 5, 5], &mut rng);
        let y = depthwise_conv2d(&x, &kern, 2).unwrap();
        // oracle: full conv with diagonal channel coupling
        let mut full = Tensor::zeros(&[4, 4, 5, 5]).unwrap();
        for c in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    full.set(&[c, c, i, j], kern.at(&[c, i, j]));
                }
            }
        }
        let p = Conv2dParams::same(full, Tensor::zeros(&[4]).unwrap(), 1).unwrap();
        assert!(y.max_abs_diff(&conv2d_reference(&x, &p).unwrap()) <= 1e-12);
        assert!(matches!(
            depthwise_conv2d(&x, &Tensor::zeros(&[4, 4, 4]).unwrap(), 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bilinear_cases() {
        let mut rng = RngState::new(7);
        let x = rand(&[3, 4, 5], &mut rng);
        let v = bilinear_sample(&x, 2.0, 3.0).unwrap();
        for (c, vc) in v.iter().enumerate() {
            assert_eq!(*vc, x.at(&[c, 2, 3]));
        }
        let v = bilinear_sample(&x, 1.0, 1.5).unwrap();
        for (c, vc) in v.iter().enumerate() {
            let avg = 0.5 * (x.at(&[c, 1, 1]) + x.at(&[c, 1, 2]));
            assert!((vc - avg).abs() < 1e-15);
        }
        assert_eq!(bilinear_sample(&x, -1.0, -1.0).unwrap(), vec![0.0; 3]);
        assert!(matches!(bilinear_sample(&x, f64::NAN, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn deformable_zero_offsets_is_standard() {
        let mut rng = RngState::new(8);
        let x = rand(&[3, 7, 6], &mut rng);
        let base = Conv2dParams::same(rand(&[4, 3, 3, 3], &mut rng), rand(&[4], &mut rng), 1).unwrap();
        let p = DeformableParams::with_zero_offsets(base.clone()).unwrap();
        let a = deformable_conv2d(&x, &p).unwrap();
        let b = conv2d(&x, &base).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn deformable_integer_shift() {
        let mut rng = RngState::new(9);
        let x = rand(&[2, 5, 6], &mut rng);
        let base = Conv2dParams::same(rand(&[3, 2, 3, 3], &mut rng), rand(&[3], &mut rng), 1).unwrap();
        let mut offsets = Tensor::zeros(&[18, 5, 6]).unwrap();
        for t in 0..9 {
            for y in 0..5 {
                for xx in 0..6 {
                    offsets.set(&[2 * t + 1, y, xx], 1.0);
                }
            }
        }
        // sampling one column to the right equals a standard conv of the
        // input with one extra zero column on the right, read one column on;
        // a left shift with zero fill differs in the first output column,
        // where the deformable read still sees input column 0
        let mut padded = Tensor::zeros(&[2, 5, 7]).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for xx in 0..6 {
                    padded.set(&[c, y, xx], x.at(&[c, y, xx]));
                }
            }
        }
        let a = deformable_conv2d_with_offsets(&x, &offsets, &base).unwrap();
        let b = conv2d(&padded, &base).unwrap().slice(2, 1, 6).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn deformable_random_offsets_match_sampling_loop() {
        let mut rng = RngState::new(10);
        let x = rand(&[3, 6, 5], &mut rng);
        let base = Conv2dParams::same(rand(&[2, 3, 3, 3], &mut rng), rand(&[2], &mut rng), 1).unwrap();
        let offsets = Tensor::uniform(&[18, 6, 5], &mut rng, -0.5, 0.5).unwrap();
        let a = deformable_conv2d_with_offsets(&x, &offsets, &base).unwrap();
        let b = deformable_reference(&x, &offsets, &base).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn deformable_rejects_bad_offsets() {
        let mut rng = RngState::new(11);
        let x = rand(&[2, 4, 4], &mut rng);
        let base = Conv2dParams::same(rand(&[2, 2, 3, 3], &mut rng), rand(&[2], &mut rng), 1).unwrap();
        let offsets = Tensor::zeros(&[16, 4, 4]).unwrap();
        assert!(matches!(
            deformable_conv2d_with_offsets(&x, &offsets, &base),
            Err(Error::Shape(_))
        ));
        let bad_pred = Conv2dParams::zeros(16, 2, 3, 3, 1).unwrap();
        assert!(DeformableParams::new(base, bad_pred).is_err());
    }
}
