//! Bi-level routing attention.
//!
//! A map is tiled into `S × S` regions. Region-mean queries and keys give a
//! region affinity graph; each region keeps its `k` strongest neighbours and
//! its tokens attend only to the tokens of those regions. A depthwise local
//! context embedding of the values is added on top.
//!
//! Routing is computed once on full-channel pooled features and shared by
//! all heads. Logits are scaled by `√d_k` per head.

use crate::conv::depthwise_conv2d;
use crate::error::{Error, Result};
use crate::oracles::FlopCount;
use crate::rng::RngState;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Tokens grouped by region: `[S², n, C]` with `n = (H/S)·(W/S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionTokens {
    pub data: Tensor,
    pub height: usize,
    pub width: usize,
    pub regions_per_side: usize,
}

impl RegionTokens {
    pub fn channels(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn tokens_per_region(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn region_count(&self) -> usize {
        self.data.dims()[0]
    }

    fn with_data(&self, data: Tensor) -> Self {
        Self { data, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BraParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Depthwise `[C, k, k]` kernel of the local context embedding.
    pub lce_kernel: Tensor,
    pub regions_per_side: usize,
    pub top_k: usize,
    pub heads: usize,
}

impl BraParams {
    pub fn new(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        lce_kernel: Tensor,
        regions_per_side: usize,
        top_k: usize,
        heads: usize,
    ) -> Result<Self> {
        let c = w_q.dims()[0];
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.dims() != [c, c] {
                return Err(Error::shape(format!("{name} must be [{c}, {c}], got {:?}", w.dims())));
            }
        }
        if lce_kernel.rank() != 3 || lce_kernel.dims()[0] != c || lce_kernel.dims()[1] != lce_kernel.dims()[2] {
            return Err(Error::shape(format!(
                "lce kernel must be [{c}, k, k], got {:?}",
                lce_kernel.dims()
            )));
        }
        let p = Self {
            w_q,
            w_k,
            w_v,
            lce_kernel,
            regions_per_side,
            top_k,
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    /// Projections uniform in `(-scale, scale)`; the LCE kernel is either
    /// drawn the same way or zero.
    #[allow(clippy::too_many_arguments)]
    pub fn seeded(
        channels: usize,
        regions_per_side: usize,
        top_k: usize,
        heads: usize,
        lce_size: usize,
        scale: f64,
        zero_lce: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut proj = || Tensor::uniform(&[channels, channels], rng, -scale, scale);
        let (w_q, w_k, w_v) = (proj()?, proj()?, proj()?);
        let lce_kernel = if zero_lce {
            Tensor::zeros(&[channels, lce_size, lce_size])?
        } else {
            Tensor::uniform(&[channels, lce_size, lce_size], rng, -scale, scale)?
        };
        Self::new(w_q, w_k, w_v, lce_kernel, regions_per_side, top_k, heads)
    }

    pub fn channels(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn head_width(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let s2 = self.regions_per_side * self.regions_per_side;
        if self.regions_per_side == 0 {
            return Err(Error::config("regions per side must be positive"));
        }
        if self.top_k == 0 || self.top_k > s2 {
            return Err(Error::config(format!(
                "top_k = {} must lie in 1..={s2} (S²)",
                self.top_k
            )));
        }
        if self.heads == 0 || !self.channels().is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads = {} must divide channel width {}",
                self.heads,
                self.channels()
            )));
        }
        if self.lce_kernel.dims()[1].is_multiple_of(2) {
            return Err(Error::config("lce kernel extent must be odd"));
        }
        Ok(())
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.w_q"), self.w_q.data_mut());
        f(&format!("{prefix}.w_k"), self.w_k.data_mut());
        f(&format!("{prefix}.w_v"), self.w_v.data_mut());
        f(&format!("{prefix}.lce"), self.lce_kernel.data_mut());
    }
}

/// Order among equal affinities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieBreak {
    #[default]
    AscendingId,
    /// Deliberately wrong rule, only used to prove the checks catch it.
    DescendingId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingResult {
    /// `[S², S²]` region affinities.
    pub affinity: Tensor,
    /// Per region, `k` routed region ids by descending affinity.
    pub indices: Vec<Vec<usize>>,
}

impl RoutingResult {
    pub fn top_k(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    /// Smallest gap between the k-th and (k+1)-th affinity over all rows;
    /// infinite when every region is routed.
    pub fn margin(&self) -> f64 {
        let n = self.affinity.dims()[1];
        let k = self.top_k();
        if k >= n {
            return f64::INFINITY;
        }
        let mut margin = f64::INFINITY;
        for (r, row_idx) in self.indices.iter().enumerate() {
            let row = &self.affinity.data()[r * n..(r + 1) * n];
            let kth = row[row_idx[k - 1]];
            let best_rest = (0..n)
                .filter(|j| !row_idx.contains(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            margin = margin.min(kth - best_rest);
        }
        margin
    }
}

fn check_partition(dims: &[usize], s: usize) -> Result<(usize, usize, usize)> {
    if dims.len() != 3 {
        return Err(Error::shape(format!("expected a [C, H, W] map, got {dims:?}")));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Partition { h, w, s });
    }
    Ok((c, h, w))
}

/// `[C, H, W] → [S², n, C]` with row-major region and in-region order.
pub(crate) fn partition_on(tape: &mut Tape, x: NodeId, s: usize) -> Result<NodeId> {
    let (c, h, w) = check_partition(tape.value(x).dims(), s)?;
    let (th, tw) = (h / s, w / s);
    let t = tape.reshape(x, &[c, s, th, s, tw])?;
    let t = tape.permute(t, &[1, 3, 2, 4, 0])?;
    tape.reshape(t, &[s * s, th * tw, c])
}

/// Inverse of [`partition_on`].
pub(crate) fn merge_on(tape: &mut Tape, t: NodeId, h: usize, w: usize, s: usize) -> Result<NodeId> {
    let dims = tape.value(t).dims().to_vec();
    if dims.len() != 3 || s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) || dims[0] != s * s || dims[1] != (h / s) * (w / s) {
        return Err(Error::shape(format!(
            "region tokens {dims:?} inconsistent with H={h}, W={w}, S={s}"
        )));
    }
    let c = dims[2];
    let (th, tw) = (h / s, w / s);
    let m = tape.reshape(t, &[s, s, th, tw, c])?;
    let m = tape.permute(m, &[4, 0, 2, 1, 3])?;
    tape.reshape(m, &[c, h, w])
}

pub fn region_partition(f: &Tensor, s: usize) -> Result<RegionTokens> {
    let (_, h, w) = check_partition(f.dims(), s)?;
    let mut tape = Tape::new();
    let x = tape.leaf(f.clone());
    let r = partition_on(&mut tape, x, s)?;
    Ok(RegionTokens {
        data: tape.value(r).clone(),
        height: h,
        width: w,
        regions_per_side: s,
    })
}

pub fn region_merge(rt: &RegionTokens) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(rt.data.clone());
    let m = merge_on(&mut tape, x, rt.height, rt.width, rt.regions_per_side)?;
    Ok(tape.value(m).clone())
}

/// Token-wise `t · W` over a `[R, n, C]` node.
fn project_on(tape: &mut Tape, tokens: NodeId, w: NodeId) -> Result<NodeId> {
    let dims = tape.value(tokens).dims().to_vec();
    let c = dims[2];
    if tape.value(w).dims() != [c, c] {
        return Err(Error::shape(format!(
            "projection {:?} does not match token width {c}",
            tape.value(w).dims()
        )));
    }
    let flat = tape.reshape(tokens, &[dims[0] * dims[1], c])?;
    let p = tape.matmul(flat, w)?;
    tape.reshape(p, &dims)
}

pub fn qkv_project(rt: &RegionTokens, p: &BraParams) -> Result<(RegionTokens, RegionTokens, RegionTokens)> {
    let mut tape = Tape::new();
    let x = tape.leaf(rt.data.clone());
    let mut out = Vec::with_capacity(3);
    for w in [&p.w_q, &p.w_k, &p.w_v] {
        let wi = tape.leaf(w.clone());
        let y = project_on(&mut tape, x, wi)?;
        out.push(rt.with_data(tape.value(y).clone()));
    }
    let v = out.pop().unwrap();
    let k = out.pop().unwrap();
    let q = out.pop().unwrap();
    Ok((q, k, v))
}

/// Mean token of every region, `[S², C]`.
pub fn region_pool(t: &RegionTokens) -> Result<Tensor> {
    t.data.mean_axis(1)
}

/// Picks `k` ids per affinity row by repeated max-selection.
pub fn select_topk(affinity: &Tensor, k: usize, tie: TieBreak) -> Result<RoutingResult> {
    if affinity.rank() != 2 {
        return Err(Error::shape(format!("affinity must be rank 2, got {:?}", affinity.dims())));
    }
    let n = affinity.dims()[1];
    if k == 0 || k > n {
        return Err(Error::config(format!("top_k = {k} must lie in 1..={n} (S²)")));
    }
    if !affinity.is_finite() {
        return Err(Error::Numeric("non-finite region affinity".into()));
    }
    let better = |a: (f64, usize), b: (f64, usize)| -> bool {
        a.0 > b.0
            || (a.0 == b.0
                && match tie {
                    TieBreak::AscendingId => a.1 < b.1,
                    TieBreak::DescendingId => a.1 > b.1,
                })
    };
    let mut indices = Vec::with_capacity(affinity.dims()[0]);
    for row in affinity.data().chunks(n) {
        let mut taken = vec![false; n];
        let mut picked = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<(f64, usize)> = None;
            for (j, &v) in row.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                if best.is_none_or(|b| better((v, j), b)) {
                    best = Some((v, j));
                }
            }
            let (_, j) = best.expect("k <= n");
            taken[j] = true;
            picked.push(j);
        }
        indices.push(picked);
    }
    Ok(RoutingResult {
        affinity: affinity.clone(),
        indices,
    })
}

pub fn topk_routing(q_rm: &Tensor, k_rm: &Tensor, k: usize) -> Result<RoutingResult> {
    topk_routing_with(q_rm, k_rm, k, TieBreak::AscendingId)
}

pub fn topk_routing_with(q_rm: &Tensor, k_rm: &Tensor, k: usize, tie: TieBreak) -> Result<RoutingResult> {
    let affinity = q_rm.matmul(&k_rm.transpose()?)?;
    select_topk(&affinity, k, tie)
}

fn check_routing(idx: &RoutingResult, regions: usize) -> Result<()> {
    if idx.indices.len() != regions {
        return Err(Error::Index(format!(
            "routing has {} rows for {regions} regions",
            idx.indices.len()
        )));
    }
    let k = idx.top_k();
    for row in &idx.indices {
        if row.len() != k || k == 0 {
            return Err(Error::Index("routing rows have unequal or zero length".into()));
        }
        if let Some(&bad) = row.iter().find(|&&j| j >= regions) {
            return Err(Error::Index(format!("routed region {bad} out of range 0..{regions}")));
        }
    }
    Ok(())
}

/// `[S², n, C] → [S², k·n, C]`, routed regions stacked in index order.
fn gather_on(tape: &mut Tape, t: NodeId, idx: &RoutingResult) -> Result<NodeId> {
    let dims = tape.value(t).dims().to_vec();
    let (r, n, c) = (dims[0], dims[1], dims[2]);
    check_routing(idx, r)?;
    let k = idx.top_k();
    let flat = tape.reshape(t, &[r, n * c])?;
    let order: Vec<usize> = idx.indices.iter().flatten().copied().collect();
    let g = tape.index_select(flat, &order)?;
    tape.reshape(g, &[r, k * n, c])
}

pub fn gather_kv(k_r: &RegionTokens, v_r: &RegionTokens, idx: &RoutingResult) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let k = tape.leaf(k_r.data.clone());
    let v = tape.leaf(v_r.data.clone());
    let kg = gather_on(&mut tape, k, idx)?;
    let vg = gather_on(&mut tape, v, idx)?;
    Ok((tape.value(kg).clone(), tape.value(vg).clone()))
}

struct AttentionNodes {
    output: NodeId,
    weights: Vec<NodeId>,
    qk_macs: u64,
    av_macs: u64,
}

fn attention_on(tape: &mut Tape, q: NodeId, kg: NodeId, vg: NodeId, heads: usize) -> Result<AttentionNodes> {
    let qd = tape.value(q).dims().to_vec();
    let kd = tape.value(kg).dims().to_vec();
    let (r, n, c) = (qd[0], qd[1], qd[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("heads = {heads} must divide channel width {c}")));
    }
    if kd[0] != r || kd[2] != c || tape.value(vg).dims() != kd.as_slice() {
        return Err(Error::shape(format!(
            "gathered keys/values {kd:?} do not match queries {qd:?}"
        )));
    }
    let m = kd[1];
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (mut qk_macs, mut av_macs) = (0, 0);
    let mut weights = Vec::with_capacity(r * heads);
    let mut regions = Vec::with_capacity(r);
    for ri in 0..r {
        let qr = tape.slice(q, 0, ri, 1)?;
        let qr = tape.reshape(qr, &[n, c])?;
        let kr = tape.slice(kg, 0, ri, 1)?;
        let kr = tape.reshape(kr, &[m, c])?;
        let vr = tape.slice(vg, 0, ri, 1)?;
        let vr = tape.reshape(vr, &[m, c])?;
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(qr, 1, h * d, d)?;
            let kh = tape.slice(kr, 1, h * d, d)?;
            let vh = tape.slice(vr, 1, h * d, d)?;
            let kt = tape.transpose(kh)?;
            let before = tape.macs();
            let logits = tape.matmul(qh, kt)?;
            qk_macs += tape.macs() - before;
            let logits = tape.scale(logits, scale)?;
            let alpha = tape.softmax_lastdim(logits)?;
            weights.push(alpha);
            let before = tape.macs();
            head_out.push(tape.matmul(alpha, vh)?);
            av_macs += tape.macs() - before;
        }
        let o = if heads == 1 { head_out[0] } else { tape.concat(&head_out, 1)? };
        regions.push(tape.reshape(o, &[1, n, c])?);
    }
    let output = if r == 1 { regions[0] } else { tape.concat(&regions, 0)? };
    Ok(AttentionNodes {
        output,
        weights,
        qk_macs,
        av_macs,
    })
}

pub fn token_attention(q_r: &RegionTokens, k_g: &Tensor, v_g: &Tensor, heads: usize) -> Result<RegionTokens> {
    let mut tape = Tape::new();
    let q = tape.leaf(q_r.data.clone());
    let k = tape.leaf(k_g.clone());
    let v = tape.leaf(v_g.clone());
    let a = attention_on(&mut tape, q, k, v, heads)?;
    Ok(q_r.with_data(tape.value(a.output).clone()))
}

/// Softmax weights of [`token_attention`], one `[n, k·n]` matrix per
/// (region, head) in region-major order.
pub fn token_attention_weights(q_r: &RegionTokens, k_g: &Tensor, v_g: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let q = tape.leaf(q_r.data.clone());
    let k = tape.leaf(k_g.clone());
    let v = tape.leaf(v_g.clone());
    let a = attention_on(&mut tape, q, k, v, heads)?;
    Ok(a.weights.iter().map(|&w| tape.value(w).clone()).collect())
}

pub fn lce(v_r: &RegionTokens, kernel: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 3 || kernel.dims()[0] != v_r.channels() || kernel.dims()[1] != kernel.dims()[2] {
        return Err(Error::shape(format!(
            "lce kernel {:?} does not match {} channels",
            kernel.dims(),
            v_r.channels()
        )));
    }
    let map = region_merge(v_r)?;
    depthwise_conv2d(&map, kernel, kernel.dims()[1] / 2)
}

/// Result of one routed attention pass.
#[derive(Clone, Debug)]
pub struct BaTrace {
    pub output: NodeId,
    pub routing: RoutingResult,
    pub flops: FlopCount,
}

/// Records a full BA pass on `tape`. Parameters are registered as named
/// leaves under `prefix`. With `frozen` the region selection is reused
/// instead of recomputed, which is how gradient checks hold routing fixed.
pub fn ba_on_tape(
    tape: &mut Tape,
    x: NodeId,
    p: &BraParams,
    prefix: &str,
    frozen: Option<&RoutingResult>,
) -> Result<BaTrace> {
    p.validate()?;
    let s = p.regions_per_side;
    let (c, h, w) = check_partition(tape.value(x).dims(), s)?;
    if c != p.channels() {
        return Err(Error::shape(format!(
            "attention params expect {} channels, map has {c}",
            p.channels()
        )));
    }
    let mut flops = FlopCount::default();
    let xr = partition_on(tape, x, s)?;
    let wq = tape.param(format!("{prefix}.w_q"), p.w_q.clone());
    let wk = tape.param(format!("{prefix}.w_k"), p.w_k.clone());
    let wv = tape.param(format!("{prefix}.w_v"), p.w_v.clone());
    let q = project_on(tape, xr, wq)?;
    let k = project_on(tape, xr, wk)?;
    let v = project_on(tape, xr, wv)?;

    let before = tape.macs();
    let q_rm = tape.mean_axis(q, 1)?;
    let k_rm = tape.mean_axis(k, 1)?;
    let k_rm_t = tape.transpose(k_rm)?;
    let affinity = tape.matmul(q_rm, k_rm_t)?;
    flops.routing = tape.macs() - before;
    let routing = match frozen {
        Some(r) => {
            check_routing(r, s * s)?;
            RoutingResult {
                affinity: tape.value(affinity).clone(),
                indices: r.indices.clone(),
            }
        }
        None => select_topk(tape.value(affinity), p.top_k, TieBreak::AscendingId)?,
    };

    let kg = gather_on(tape, k, &routing)?;
    let vg = gather_on(tape, v, &routing)?;
    flops.gather = (tape.value(kg).numel() + tape.value(vg).numel()) as u64;
    let att = attention_on(tape, q, kg, vg, p.heads)?;
    flops.qk_logits = att.qk_macs;
    flops.av_aggregation = att.av_macs;
    let att_map = merge_on(tape, att.output, h, w, s)?;

    let v_map = merge_on(tape, v, h, w, s)?;
    let kern = tape.param(format!("{prefix}.lce"), p.lce_kernel.clone());
    let before = tape.macs();
    let local = tape.depthwise_conv2d(v_map, kern, p.lce_kernel.dims()[1] / 2)?;
    flops.lce = tape.macs() - before;
    let output = tape.add(att_map, local)?;
    Ok(BaTrace {
        output,
        routing,
        flops,
    })
}

/// Value-level BA pass with its routing and per-stage MAC tallies.
#[derive(Clone, Debug)]
pub struct BaOutput {
    pub output: Tensor,
    pub routing: RoutingResult,
    pub flops: FlopCount,
}

pub fn ba_forward_traced(f: &Tensor, p: &BraParams, frozen: Option<&RoutingResult>) -> Result<BaOutput> {
    let mut tape = Tape::new();
    let x = tape.leaf(f.clone());
    let t = ba_on_tape(&mut tape, x, p, "ba", frozen)?;
    Ok(BaOutput {
        output: tape.value(t.output).clone(),
        routing: t.routing,
        flops: t.flops,
    })
}

pub fn ba_forward(f: &Tensor, p: &BraParams) -> Result<Tensor> {
    Ok(ba_forward_traced(f, p, None)?.output)
}
