//! Brute-force references.
//!
//! Everything here works on raw `Vec<f64>` buffers with explicit index
//! arithmetic and never calls into the kernels it checks (im2col, the tape,
//! `Tensor::matmul`/`permute`/`softmax_lastdim`, ...). Only the parameter
//! structs are shared. Intended for desk-scale inputs only.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::cfe::{Activation, BranchTail, CfeParams};
use crate::conv::{Conv2dParams, DeformableParams};
use crate::error::{Error, Result};
use crate::pyramid::{Enhancer, PipelineParams, Pyramid};
use crate::routing::BraParams;
use crate::tensor::Tensor;

/// Multiply-accumulate tallies per attention stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub routing: u64,
    pub gather: u64,
    pub qk_logits: u64,
    pub av_aggregation: u64,
    pub lce: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.routing + self.gather + self.qk_logits + self.av_aggregation + self.lce
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, o: Self) {
        self.routing += o.routing;
        self.gather += o.gather;
        self.qk_logits += o.qk_logits;
        self.av_aggregation += o.av_aggregation;
        self.lce += o.lce;
    }
}

fn chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.dims() {
        &[c, h, w] => Ok((c, h, w)),
        d => Err(Error::shape(format!("expected [C, H, W], got {d:?}"))),
    }
}

/// Six nested loops over `(o, y, x, c, i, j)`.
pub fn conv2d_reference(input: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let (ci, h, w) = chw(input)?;
    let wd = p.weight.dims();
    let (co, kh, kw) = (wd[0], wd[2], wd[3]);
    if wd[1] != ci {
        return Err(Error::shape(format!("input has {ci} channels, kernel expects {}", wd[1])));
    }
    let g = p.geometry;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let (s, d) = (g.stride as isize, g.dilation as isize);
    let span_h = d * (kh as isize - 1) + 1;
    let span_w = d * (kw as isize - 1) + 1;
    let ho = (h as isize + 2 * ph - span_h) / s + 1;
    let wo = (w as isize + 2 * pw - span_w) / s + 1;
    if h as isize + 2 * ph < span_h || w as isize + 2 * pw < span_w || ho < 1 || wo < 1 {
        return Err(Error::shape("non-positive output extent"));
    }
    let (ho, wo) = (ho as usize, wo as usize);
    let x = input.data();
    let k = p.weight.data();
    let b = p.bias.data();
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = b[o];
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let sy = y as isize * s + d * i as isize - ph;
                            let sx = xx as isize * s + d * j as isize - pw;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k[((o * ci + c) * kh + i) * kw + j] * x[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out)
}

/// Per-channel loop, no cross-channel coupling.
pub fn depthwise_reference(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let (c, h, w) = chw(input)?;
    let k = kernel.dims()[1];
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let sy = (y + i) as isize - padding as isize;
                        let sx = (xx + j) as isize - padding as isize;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += kd[(ch * k + i) * k + j] * x[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// One channel of a bilinear read with zero outside the map.
fn sample(x: &[f64], h: usize, w: usize, c: usize, y: f64, xx: f64) -> f64 {
    let y0 = y.floor();
    let x0 = xx.floor();
    let mut v = 0.0;
    for (ny, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
        for (nx, wx) in [(x0, 1.0 - (xx - x0)), (x0 + 1.0, xx - x0)] {
            if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                continue;
            }
            v += wy * wx * x[(c * h + ny as usize) * w + nx as usize];
        }
    }
    v
}

/// 3×3 deformable convolution with externally supplied offsets, composed
/// from explicit bilinear reads.
pub fn deformable_reference(input: &Tensor, offsets: &Tensor, base: &Conv2dParams) -> Result<Tensor> {
    let (ci, h, w) = chw(input)?;
    let wd = base.weight.dims();
    let (co, kh, kw) = (wd[0], wd[2], wd[3]);
    if offsets.dims() != [2 * kh * kw, h, w] {
        return Err(Error::shape(format!("offsets {:?} do not match", offsets.dims())));
    }
    let x = input.data();
    let off = offsets.data();
    let k = base.weight.data();
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = base.bias.data()[o];
                for t in 0..kh * kw {
                    let (i, j) = (t / kw, t % kw);
                    let dy = off[((2 * t) * h + y) * w + xx];
                    let dx = off[((2 * t + 1) * h + y) * w + xx];
                    let sy = y as f64 + i as f64 - (kh / 2) as f64 + dy;
                    let sx = xx as f64 + j as f64 - (kw / 2) as f64 + dx;
                    for c in 0..ci {
                        acc += k[((o * ci + c) * kh + i) * kw + j] * sample(x, h, w, c, sy, sx);
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::new(&[co, h, w], out)
}

pub fn deformable_forward_reference(input: &Tensor, p: &DeformableParams) -> Result<Tensor> {
    let offsets = conv2d_reference(input, &p.offset_predictor)?;
    deformable_reference(input, &offsets, &p.base)
}

/// Token `(y, x)` of a `[C, H, W]` map as a row, projected by `w` (`t·w`).
fn project(x: &[f64], c: usize, hw: usize, pix: usize, w: &[f64]) -> Vec<f64> {
    (0..c)
        .map(|j| (0..c).map(|i| x[i * hw + pix] * w[i * c + j]).sum())
        .collect()
}

fn attend(q: &[Vec<f64>], keys: &[Vec<f64>], vals: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let c = q.first().map_or(0, Vec::len);
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![vec![0.0; c]; q.len()];
    for (qi, row) in q.iter().enumerate() {
        for hd in 0..heads {
            let ch = hd * dk..(hd + 1) * dk;
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| ch.clone().map(|t| row[t] * k[t]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (ei, v) in e.iter().zip(vals) {
                for t in ch.clone() {
                    out[qi][t] += ei / z * v[t];
                }
            }
        }
    }
    out
}

fn to_map(tokens: &[Vec<f64>], c: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut out = vec![0.0; c * h * w];
    for (pix, t) in tokens.iter().enumerate() {
        for ch in 0..c {
            out[ch * h * w + pix] = t[ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Global attention over all `H·W` tokens, per-head `1/√d_k` scaling,
/// no local context term.
pub fn dense_attention_reference(f: &Tensor, p: &BraParams) -> Result<Tensor> {
    let (c, h, w) = chw(f)?;
    if p.heads == 0 || c % p.heads != 0 || p.w_q.dims() != [c, c] {
        return Err(Error::config(format!("heads {} / width {c} mismatch", p.heads)));
    }
    let hw = h * w;
    let x = f.data();
    let q: Vec<_> = (0..hw).map(|i| project(x, c, hw, i, p.w_q.data())).collect();
    let k: Vec<_> = (0..hw).map(|i| project(x, c, hw, i, p.w_k.data())).collect();
    let v: Vec<_> = (0..hw).map(|i| project(x, c, hw, i, p.w_v.data())).collect();
    to_map(&attend(&q, &k, &v, p.heads), c, h, w)
}

/// Full sort by descending value, ascending index on ties; first `k`.
pub fn topk_reference(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Pixel indices (row-major) of region `r` of an `s × s` tiling.
fn region_pixels(h: usize, w: usize, s: usize, r: usize) -> Vec<usize> {
    let (th, tw) = (h / s, w / s);
    let (ry, rx) = (r / s, r % s);
    let mut px = Vec::with_capacity(th * tw);
    for y in ry * th..(ry + 1) * th {
        for x in rx * tw..(rx + 1) * tw {
            px.push(y * w + x);
        }
    }
    px
}

/// Routed attention plus local context, written as loops over regions and
/// tokens. Returns the map and the routed region ids per region.
pub fn ba_reference(f: &Tensor, p: &BraParams) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let (c, h, w) = chw(f)?;
    let s = p.regions_per_side;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Partition { h, w, s });
    }
    let hw = h * w;
    let x = f.data();
    let q: Vec<_> = (0..hw).map(|i| project(x, c, hw, i, p.w_q.data())).collect();
    let k: Vec<_> = (0..hw).map(|i| project(x, c, hw, i, p.w_k.data())).collect();
    let v: Vec<_> = (0..hw).map(|i| project(x, c, hw, i, p.w_v.data())).collect();
    let regions: Vec<Vec<usize>> = (0..s * s).map(|r| region_pixels(h, w, s, r)).collect();
    let pool = |t: &[Vec<f64>], px: &[usize]| -> Vec<f64> {
        (0..c)
            .map(|ch| px.iter().map(|&i| t[i][ch]).sum::<f64>() / px.len() as f64)
            .collect()
    };
    let q_rm: Vec<_> = regions.iter().map(|px| pool(&q, px)).collect();
    let k_rm: Vec<_> = regions.iter().map(|px| pool(&k, px)).collect();
    let mut out_tokens = vec![vec![0.0; c]; hw];
    let mut routes = Vec::with_capacity(s * s);
    for (r, px) in regions.iter().enumerate() {
        let aff: Vec<f64> = k_rm
            .iter()
            .map(|kr| (0..c).map(|t| q_rm[r][t] * kr[t]).sum())
            .collect();
        let sel = topk_reference(&aff, p.top_k);
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for &j in &sel {
            for &i in &regions[j] {
                keys.push(k[i].clone());
                vals.push(v[i].clone());
            }
        }
        let qs: Vec<_> = px.iter().map(|&i| q[i].clone()).collect();
        for (&i, o) in px.iter().zip(attend(&qs, &keys, &vals, p.heads)) {
            out_tokens[i] = o;
        }
        routes.push(sel);
    }
    let att = to_map(&out_tokens, c, h, w)?;
    let v_map = to_map(&v, c, h, w)?;
    let k_lce = p.lce_kernel.dims()[1];
    let local = depthwise_reference(&v_map, &p.lce_kernel, k_lce / 2)?;
    let sum = att.data().iter().zip(local.data()).map(|(a, b)| a + b).collect();
    Ok((Tensor::new(&[c, h, w], sum)?, routes))
}

fn activate(t: Tensor, a: Activation) -> Result<Tensor> {
    match a {
        Activation::None => Ok(t),
        Activation::Relu => {
            let d = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Tensor::new(t.dims(), d)
        }
    }
}

/// CFE composed step by step from [`conv2d_reference`] and
/// [`deformable_forward_reference`].
pub fn cfe_reference(x: &Tensor, p: &CfeParams) -> Result<Tensor> {
    let (_, h, w) = chw(x)?;
    let mut branches = Vec::with_capacity(3);
    for b in &p.branches {
        let mut t = x.clone();
        for conv in [&b.reduce, &b.conv_a, &b.conv_b] {
            t = activate(conv2d_reference(&t, conv)?, p.activation)?;
        }
        t = match &b.tail {
            BranchTail::Dilated(c) => conv2d_reference(&t, c)?,
            BranchTail::Deformable(d) => deformable_forward_reference(&t, d)?,
        };
        branches.push(activate(t, p.activation)?);
    }
    let res = conv2d_reference(x, &p.residual)?;
    let mut out = Vec::with_capacity(res.numel());
    for b in &branches {
        out.extend_from_slice(b.data());
    }
    for (o, r) in out.iter_mut().zip(res.data()) {
        *o += r;
    }
    Tensor::new(&[res.dims()[0], h, w], out)
}

pub fn up2_reference(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
        let ch = i / (4 * h * w);
        let y = (i / (2 * w)) % (2 * h);
        let xx = i % (2 * w);
        x.data()[(ch * h + y / 2) * w + xx / 2]
    })
}

pub fn down2_reference(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    if h % 2 == 1 || w % 2 == 1 {
        return Err(Error::shape("odd extent"));
    }
    let (ho, wo) = (h / 2, w / 2);
    Tensor::from_fn(&[c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let y = (i / wo) % ho;
        let xx = i % wo;
        let mut s = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                s += x.data()[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
            }
        }
        s / 4.0
    })
}

pub fn fuse_reference(inputs: &[&Tensor], raw: &[f64], epsilon: f64) -> Result<Tensor> {
    let dims = inputs[0].dims();
    let denom = raw.iter().map(|&w| if w > 0.0 { w } else { 0.0 }).sum::<f64>() + epsilon;
    Tensor::from_fn(dims, |i| {
        let mut s = 0.0;
        for (x, &w) in inputs.iter().zip(raw) {
            if w > 0.0 {
                s += w * x.data()[i];
            }
        }
        s / denom
    })
}

/// The six fusion equations evaluated by direct substitution. BA is
/// [`ba_reference`] when enabled, identity otherwise.
pub fn afbifpn_reference(stage_i: &Pyramid, p: &PipelineParams) -> Result<[Tensor; 4]> {
    let [p2, p3, p4, p5] = &stage_i.levels;
    let fw = &p.fusion;
    let eps = fw.epsilon;
    let ba = |t: &Tensor, slot: usize| -> Result<Tensor> {
        if p.attention_fusion_enabled {
            Ok(ba_reference(t, &p.attention[slot])?.0)
        } else {
            Ok(t.clone())
        }
    };
    let p4f = fuse_reference(&[p4, &up2_reference(p5)?], &fw.p4_mid, eps)?;
    let a4 = ba(&p4f, 0)?;
    let p3f = fuse_reference(&[p3, &up2_reference(&a4)?], &fw.p3_mid, eps)?;
    let a3 = ba(&p3f, 1)?;
    let p2o = fuse_reference(&[p2, &up2_reference(&a3)?], &fw.p2_out, eps)?;
    let p3o = fuse_reference(&[p3, &a3, &down2_reference(&p2o)?], &fw.p3_out, eps)?;
    let p4o = fuse_reference(&[p4, &a4, &down2_reference(&p3o)?], &fw.p4_out, eps)?;
    let p5o = fuse_reference(&[p5, &down2_reference(&p4o)?], &fw.p5_out, eps)?;
    Ok([p2o, p3o, p4o, p5o])
}

/// Per-level enhancement through [`cfe_reference`] (or the 1×1 projection),
/// then [`afbifpn_reference`].
pub fn c_afbifpn_reference(backbone: &Pyramid, p: &PipelineParams) -> Result<[Tensor; 4]> {
    let mut stage_i = Vec::with_capacity(4);
    for (x, e) in backbone.levels.iter().zip(&p.enhancers) {
        stage_i.push(match e {
            Enhancer::Cfe(c) => cfe_reference(x, c)?,
            Enhancer::Projection(c) => conv2d_reference(x, c)?,
        });
    }
    let levels: [Tensor; 4] = stage_i.try_into().expect("four levels");
    afbifpn_reference(&Pyramid::new(levels), p)
}

/// Central differences with `h = 1e-5·max(1, |x_i|)` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor) -> Result<Tensor> {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let xi = x.data()[i];
        let h = 1e-5 * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = xi - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = xi;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite evaluation at coordinate {i}")));
        }
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.dims(), grad)
}

/// Central differences of `seed · f(x)`. The two perturbed outputs are
/// subtracted elementwise before contracting with `seed`, so the large
/// common part cancels before any summation rounds it.
pub fn finite_diff_vjp(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, seed: &Tensor) -> Result<Tensor> {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let xi = x.data()[i];
        let h = 1e-5 * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = xi - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = xi;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite evaluation at coordinate {i}")));
        }
        *g = up.sub(&down)?.dot(seed) / (2.0 * h);
    }
    Tensor::new(x.dims(), grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Dense,
    Routed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub s: usize,
    pub k: usize,
    pub heads: usize,
    pub lce_kernel: usize,
}

/// Closed-form MAC counts. Routing pools both Q and K (`2·HW·C`) and forms
/// the `S²×S²` affinity (`S⁴·C`); gather counts copied K and V elements.
/// Dense mode is plain global attention without a local context term.
pub fn attention_flops(d: AttentionDims, mode: AttentionMode) -> FlopCount {
    let hw = (d.h * d.w) as u64;
    let c = d.c as u64;
    match mode {
        AttentionMode::Dense => FlopCount {
            qk_logits: hw * hw * c,
            av_aggregation: hw * hw * c,
            ..FlopCount::default()
        },
        AttentionMode::Routed => {
            let s2 = (d.s * d.s) as u64;
            let k = d.k as u64;
            let keys = k * hw / s2;
            let lk = d.lce_kernel as u64;
            FlopCount {
                routing: s2 * s2 * c + 2 * hw * c,
                gather: 2 * s2 * keys * c,
                qk_logits: hw * keys * c,
                av_aggregation: hw * keys * c,
                lce: hw * c * lk * lk,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn topk_reference_cases() {
        assert_eq!(topk_reference(&[5.0, 1.0, 9.0], 2), vec![2, 0]);
        assert_eq!(topk_reference(&[1.0; 5], 3), vec![0, 1, 2]);
    }

    #[test]
    fn finite_diff_cases() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-7 && (g.data()[1] - 4.0).abs() < 1e-7);
        let g = finite_diff_grad(|t| Ok(3.0 * t.data()[0] - 0.5 * t.data()[1]), &x).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-9 && (g.data()[1] + 0.5).abs() < 1e-9);
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn conv_reference_tap_counting() {
        let ones = Tensor::full(&[1, 5, 5], 1.0).unwrap();
        let p = Conv2dParams::same(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), 1).unwrap();
        let y = conv2d_reference(&ones, &p).unwrap();
        assert_eq!(y.at(&[0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn dense_reference_single_pixel_is_projected_value() {
        let mut rng = RngState::new(4);
        let p = BraParams::seeded(3, 1, 1, 1, 1, 1.0, true, &mut rng).unwrap();
        let f = Tensor::uniform(&[3, 1, 1], &mut rng, -1.0, 1.0).unwrap();
        let y = dense_attention_reference(&f, &p).unwrap();
        let want = project(f.data(), 3, 1, 0, p.w_v.data());
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn flop_ratio_is_k_over_s2() {
        let d = AttentionDims { h: 16, w: 16, c: 8, s: 4, k: 2, heads: 1, lce_kernel: 5 };
        let r = attention_flops(d, AttentionMode::Routed);
        let dense = attention_flops(d, AttentionMode::Dense);
        assert_eq!(r.qk_logits as f64 / dense.qk_logits as f64, 0.125);
        let full = attention_flops(AttentionDims { k: 16, ..d }, AttentionMode::Routed);
        assert_eq!(full.qk_logits, dense.qk_logits);
        assert_eq!(full.av_aggregation, dense.av_aggregation);
    }
}
