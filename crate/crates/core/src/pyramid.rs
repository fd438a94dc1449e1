//! Attention-fused BiFPN over pyramid levels 2..=5 and the full
//! enhancement → fusion assembly.
//!
//! Node order of one pass (all fusions are fast-normalized):
//!
//! ```text
//! P4F = fuse(P4I, up(P5I))              A4 = BA(P4F)
//! P3F = fuse(P3I, up(A4))               A3 = BA(P3F)
//! P2O = fuse(P2I, up(A3))
//! P3O = fuse(P3I, A3, down(P2O))
//! P4O = fuse(P4I, A4, down(P3O))
//! P5O = fuse(P5I, down(P4O))
//! ```

use crate::cfe::{cfe_on_tape, CfeParams};
use crate::config::RunConfig;
use crate::conv::Conv2dParams;
use crate::error::{Error, Result};
use crate::oracles::FlopCount;
use crate::rng::RngState;
use crate::routing::{ba_on_tape, BraParams, RoutingResult};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Scale of the seeded uniform initialization of every kernel.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Up2,
    Down2,
}

fn map_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("expected a [C, H, W] map, got {:?}", x.dims())));
    }
    Ok((x.dims()[0], x.dims()[1], x.dims()[2]))
}

pub(crate) fn up2_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map_dims(x)?;
    let d = x.data();
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = d[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::derived(vec![c, 2 * h, 2 * w], out, x.dtype()))
}

pub(crate) fn up2_backward(g: &Tensor) -> Tensor {
    let (c, h2, w2) = (g.dims()[0], g.dims()[1], g.dims()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(ch * h + y / 2) * w + x / 2] += g.data()[(ch * h2 + y) * w2 + x];
            }
        }
    }
    Tensor::derived(vec![c, h, w], out, g.dtype())
}

pub(crate) fn down2_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map_dims(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("down-sampling needs even extents, got {h}x{w}")));
    }
    let d = x.data();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let at = |dy: usize, dx: usize| d[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out[(ch * ho + y) * wo + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * 0.25;
            }
        }
    }
    Ok(Tensor::derived(vec![c, ho, wo], out, x.dtype()))
}

pub(crate) fn down2_backward(g: &Tensor) -> Tensor {
    let (c, ho, wo) = (g.dims()[0], g.dims()[1], g.dims()[2]);
    let (h, w) = (2 * ho, 2 * wo);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = 0.25 * g.data()[(ch * ho + y / 2) * wo + x / 2];
            }
        }
    }
    Tensor::derived(vec![c, h, w], out, g.dtype())
}

pub fn resize(f: &Tensor, direction: Resize) -> Result<Tensor> {
    match direction {
        Resize::Up2 => up2_forward(f),
        Resize::Down2 => down2_forward(f),
    }
}

pub(crate) fn fuse_forward(inputs: &[&Tensor], raw: &[f64], epsilon: f64) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::shape("fusion of zero inputs"))?;
    if raw.len() != inputs.len() {
        return Err(Error::shape(format!(
            "{} fusion weights for {} inputs",
            raw.len(),
            inputs.len()
        )));
    }
    if let Some(bad) = inputs.iter().find(|x| x.dims() != first.dims()) {
        return Err(Error::shape(format!(
            "fusion inputs disagree: {:?} vs {:?}",
            bad.dims(),
            first.dims()
        )));
    }
    let denom: f64 = raw.iter().map(|w| w.max(0.0)).sum::<f64>() + epsilon;
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::Numeric(format!("fusion denominator {denom} is not positive")));
    }
    let mut out = vec![0.0; first.numel()];
    for (x, w) in inputs.iter().zip(raw) {
        let u = w.max(0.0);
        if u == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(x.data()) {
            *o += u * v;
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    Ok(Tensor::derived(first.dims().to_vec(), out, first.dtype()))
}

/// Returns `(d_inputs, d_raw_weights)` for `out = Σ uᵢxᵢ / (Σ uᵢ + ε)`,
/// `uᵢ = max(wᵢ, 0)`.
pub(crate) fn fuse_backward(
    inputs: &[&Tensor],
    raw: &[f64],
    epsilon: f64,
    out: &Tensor,
    g: &Tensor,
) -> (Vec<Tensor>, Vec<f64>) {
    let denom: f64 = raw.iter().map(|w| w.max(0.0)).sum::<f64>() + epsilon;
    let gin = raw
        .iter()
        .map(|w| g.scale(w.max(0.0) / denom))
        .collect();
    let gw = inputs
        .iter()
        .zip(raw)
        .map(|(x, &w)| {
            if w <= 0.0 {
                return 0.0;
            }
            x.data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((xi, oi), gi)| gi * (xi - oi))
                .sum::<f64>()
                / denom
        })
        .collect();
    (gin, gw)
}

/// Fast normalized fusion of equally shaped maps.
pub fn fuse(inputs: &[&Tensor], raw_weights: &[f64], epsilon: f64) -> Result<Tensor> {
    fuse_forward(inputs, raw_weights, epsilon)
}

/// Raw fusion weights `w_ij` (output level `i`, input branch `j`) and ε.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    /// `w41, w42`
    pub p4_mid: [f64; 2],
    /// `w31, w32`
    pub p3_mid: [f64; 2],
    /// `w21, w22`
    pub p2_out: [f64; 2],
    /// `w33, w34, w35`
    pub p3_out: [f64; 3],
    /// `w43, w44, w45`
    pub p4_out: [f64; 3],
    /// `w51, w52`
    pub p5_out: [f64; 2],
    pub epsilon: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self::uniform(1.0, 1e-4)
    }
}

impl FusionWeights {
    pub fn uniform(w: f64, epsilon: f64) -> Self {
        Self {
            p4_mid: [w; 2],
            p3_mid: [w; 2],
            p2_out: [w; 2],
            p3_out: [w; 3],
            p4_out: [w; 3],
            p5_out: [w; 2],
            epsilon,
        }
    }

    /// Looks up `w_ij` by output level and branch (both 1-based, as in the
    /// usual `w_{ij}` notation).
    pub fn w(&self, level: usize, branch: usize) -> f64 {
        match (level, branch) {
            (4, 1..=2) => self.p4_mid[branch - 1],
            (4, 3..=5) => self.p4_out[branch - 3],
            (3, 1..=2) => self.p3_mid[branch - 1],
            (3, 3..=5) => self.p3_out[branch - 3],
            (2, 1..=2) => self.p2_out[branch - 1],
            (5, 1..=2) => self.p5_out[branch - 1],
            _ => panic!("no fusion weight w{level}{branch}"),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("fusion.p4f", &mut self.p4_mid);
        f("fusion.p3f", &mut self.p3_mid);
        f("fusion.p2o", &mut self.p2_out);
        f("fusion.p3o", &mut self.p3_out);
        f("fusion.p4o", &mut self.p4_out);
        f("fusion.p5o", &mut self.p5_out);
    }

    /// Multiplies every raw weight of every node by `c`.
    pub fn rescaled(&self, c: f64) -> Self {
        let mut w = self.clone();
        w.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= c));
        w
    }
}

/// Per-level feature enhancement ahead of the fusion network.
#[derive(Clone, Debug, PartialEq)]
pub enum Enhancer {
    Cfe(Box<CfeParams>),
    /// Plain 1×1 projection to the fusion width (CFE ablated).
    Projection(Conv2dParams),
}

impl Enhancer {
    pub fn c_in(&self) -> usize {
        match self {
            Enhancer::Cfe(p) => p.c_in(),
            Enhancer::Projection(p) => p.c_in(),
        }
    }

    fn on_tape(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        match self {
            Enhancer::Cfe(p) => cfe_on_tape(tape, x, p, prefix),
            Enhancer::Projection(p) => p.on_tape(tape, x, prefix),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Enhancer::Cfe(p) => p.visit_mut(prefix, f),
            Enhancer::Projection(p) => p.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams {
    /// Enhancers for levels 2, 3, 4, 5.
    pub enhancers: [Enhancer; 4],
    /// Attention for the level-4 and level-3 intermediate nodes.
    pub attention: [BraParams; 2],
    pub fusion: FusionWeights,
    pub attention_fusion_enabled: bool,
}

/// Knobs for seeded initialization that tests like to flip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InitOptions {
    /// Leave deformable offset predictors random instead of zero.
    pub random_offsets: bool,
    pub zero_lce: bool,
}

impl PipelineParams {
    /// Seeded parameters for backbone maps with the given channel counts
    /// (levels 2..=5). Kernels are uniform in `(-0.1, 0.1)`; raw fusion
    /// weights start at 1.
    pub fn seeded(cfg: &RunConfig, backbone_channels: [usize; 4], opts: InitOptions) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(cfg.seed);
        let width = cfg.fusion_width;
        let mut enhancers = Vec::with_capacity(4);
        for &c in &backbone_channels {
            enhancers.push(if cfg.cfe_enabled {
                Enhancer::Cfe(Box::new(CfeParams::seeded(
                    c,
                    width,
                    cfg.dilation,
                    cfg.activation,
                    INIT_SCALE,
                    !opts.random_offsets,
                    &mut rng,
                )?))
            } else {
                Enhancer::Projection(Conv2dParams::seeded(width, c, (1, 1), 1, INIT_SCALE, &mut rng)?)
            });
        }
        let mut attention = Vec::with_capacity(2);
        for _ in 0..2 {
            attention.push(BraParams::seeded(
                width,
                cfg.regions_s,
                cfg.topk_k,
                cfg.heads,
                cfg.lce_kernel,
                INIT_SCALE,
                opts.zero_lce,
                &mut rng,
            )?);
        }
        Ok(Self {
            enhancers: enhancers.try_into().expect("four levels"),
            attention: attention.try_into().expect("two attention nodes"),
            fusion: FusionWeights::uniform(1.0, cfg.epsilon),
            attention_fusion_enabled: cfg.attention_fusion_enabled,
        })
    }

    pub fn cfe_enabled(&self) -> bool {
        self.enhancers.iter().all(|e| matches!(e, Enhancer::Cfe(_)))
    }

    /// Visits every learnable parameter with the names used on the tape.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, e) in self.enhancers.iter_mut().enumerate() {
            let prefix = match e {
                Enhancer::Cfe(_) => format!("cfe{}", i + 2),
                Enhancer::Projection(_) => format!("proj{}", i + 2),
            };
            e.visit_mut(&prefix, f);
        }
        self.attention[0].visit_mut("ba4", f);
        self.attention[1].visit_mut("ba3", f);
        self.fusion.visit_mut(f);
    }
}

/// Four maps for levels 2, 3, 4, 5 (index 0 is level 2).
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: [Tensor; 4],
}

impl Pyramid {
    pub fn new(levels: [Tensor; 4]) -> Self {
        Self { levels }
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l - 2]
    }

    /// Every level `[C_l, H_2/2^{l-2}, W_2/2^{l-2}]`; with `width` set all
    /// levels must also share that channel count.
    pub fn check(&self, stage: &str, width: Option<usize>) -> Result<()> {
        for (i, t) in self.levels.iter().enumerate() {
            let node = format!("P{}{stage}", i + 2);
            if t.rank() != 3 {
                return Err(Error::Pipeline {
                    node,
                    reason: format!("expected [C, H, W], got {:?}", t.dims()),
                });
            }
            if let Some(wf) = width {
                if t.dims()[0] != wf {
                    return Err(Error::Pipeline {
                        node,
                        reason: format!("channel width {} differs from {wf}", t.dims()[0]),
                    });
                }
            }
            if i > 0 {
                let prev = &self.levels[i - 1];
                if prev.dims()[1] != 2 * t.dims()[1] || prev.dims()[2] != 2 * t.dims()[2] {
                    return Err(Error::Pipeline {
                        node,
                        reason: format!(
                            "extent {}x{} is not half of level {} ({}x{})",
                            t.dims()[1],
                            t.dims()[2],
                            i + 1,
                            prev.dims()[1],
                            prev.dims()[2]
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Node handles of one recorded fusion pass.
#[derive(Clone, Debug)]
pub struct FusionNodes {
    /// Outputs for levels 2, 3, 4, 5.
    pub outputs: [NodeId; 4],
    pub p4f: NodeId,
    pub p3f: NodeId,
    pub a4: NodeId,
    pub a3: NodeId,
    /// Routing of the level-4 then level-3 attention (empty when disabled).
    pub routing: Vec<RoutingResult>,
    pub ba_invocations: usize,
    pub flops: FlopCount,
}

fn fuse_node(tape: &mut Tape, name: &str, inputs: &[NodeId], raw: &[f64], eps: f64) -> Result<NodeId> {
    let w = tape.param(format!("fusion.{}", name.to_lowercase()), Tensor::vector(raw));
    tape.fuse(inputs, w, eps).map_err(|e| Error::at_node(name, e))
}

/// Records the fusion network. `frozen` supplies the routing for the two
/// attention nodes (level 4 first) instead of recomputing it.
pub fn afbifpn_on_tape(
    tape: &mut Tape,
    inputs: [NodeId; 4],
    p: &PipelineParams,
    frozen: Option<&[RoutingResult]>,
) -> Result<FusionNodes> {
    let stage_i = Pyramid::new(inputs.map(|id| tape.value(id).clone()));
    let width = stage_i.levels[0].dims().first().copied();
    stage_i.check("I", width)?;
    let [p2i, p3i, p4i, p5i] = inputs;
    let fw = &p.fusion;
    let eps = fw.epsilon;
    let mut routing = Vec::new();
    let mut flops = FlopCount::default();
    let mut ba_invocations = 0;

    let mut attend = |tape: &mut Tape, x: NodeId, slot: usize, node: &str| -> Result<NodeId> {
        if !p.attention_fusion_enabled {
            return Ok(x);
        }
        let prefix = if slot == 0 { "ba4" } else { "ba3" };
        let fixed = frozen.map(|r| r.get(slot)).map(|r| {
            r.ok_or_else(|| Error::Pipeline {
                node: node.to_string(),
                reason: "frozen routing missing".into(),
            })
        });
        let fixed = fixed.transpose()?;
        let t = ba_on_tape(tape, x, &p.attention[slot], prefix, fixed).map_err(|e| Error::at_node(node, e))?;
        ba_invocations += 1;
        flops += t.flops;
        routing.push(t.routing);
        Ok(t.output)
    };

    let up5 = tape.up2(p5i).map_err(|e| Error::at_node("P4F", e))?;
    let p4f = fuse_node(tape, "P4F", &[p4i, up5], &fw.p4_mid, eps)?;
    let a4 = attend(tape, p4f, 0, "BA(P4F)")?;
    let up4 = tape.up2(a4).map_err(|e| Error::at_node("P3F", e))?;
    let p3f = fuse_node(tape, "P3F", &[p3i, up4], &fw.p3_mid, eps)?;
    let a3 = attend(tape, p3f, 1, "BA(P3F)")?;
    let up3 = tape.up2(a3).map_err(|e| Error::at_node("P2O", e))?;
    let p2o = fuse_node(tape, "P2O", &[p2i, up3], &fw.p2_out, eps)?;
    let d2 = tape.down2(p2o).map_err(|e| Error::at_node("P3O", e))?;
    let p3o = fuse_node(tape, "P3O", &[p3i, a3, d2], &fw.p3_out, eps)?;
    let d3 = tape.down2(p3o).map_err(|e| Error::at_node("P4O", e))?;
    let p4o = fuse_node(tape, "P4O", &[p4i, a4, d3], &fw.p4_out, eps)?;
    let d4 = tape.down2(p4o).map_err(|e| Error::at_node("P5O", e))?;
    let p5o = fuse_node(tape, "P5O", &[p5i, d4], &fw.p5_out, eps)?;

    Ok(FusionNodes {
        outputs: [p2o, p3o, p4o, p5o],
        p4f,
        p3f,
        a4,
        a3,
        routing,
        ba_invocations,
        flops,
    })
}

/// Records enhancement of every backbone level followed by the fusion
/// network; returns the enhanced stage-I nodes alongside.
pub fn c_afbifpn_on_tape(
    tape: &mut Tape,
    backbone: [NodeId; 4],
    p: &PipelineParams,
    frozen: Option<&[RoutingResult]>,
) -> Result<([NodeId; 4], FusionNodes)> {
    let mut stage_i = Vec::with_capacity(4);
    for (i, (&x, e)) in backbone.iter().zip(&p.enhancers).enumerate() {
        let level = i + 2;
        let prefix = match e {
            Enhancer::Cfe(_) => format!("cfe{level}"),
            Enhancer::Projection(_) => format!("proj{level}"),
        };
        let y = e
            .on_tape(tape, x, &prefix)
            .map_err(|err| Error::at_node(&format!("P{level}I"), err))?;
        stage_i.push(y);
    }
    let stage_i: [NodeId; 4] = stage_i.try_into().expect("four levels");
    let nodes = afbifpn_on_tape(tape, stage_i, p, frozen)?;
    Ok((stage_i, nodes))
}

/// Values of one pipeline pass.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub outputs: Pyramid,
    pub p4f: Tensor,
    pub p3f: Tensor,
    pub a4: Tensor,
    pub a3: Tensor,
    pub routing: Vec<RoutingResult>,
    pub ba_invocations: usize,
    pub flops: FlopCount,
}

impl PipelineOutput {
    fn collect(tape: &Tape, n: &FusionNodes) -> Self {
        Self {
            outputs: Pyramid::new(n.outputs.map(|id| tape.value(id).clone())),
            p4f: tape.value(n.p4f).clone(),
            p3f: tape.value(n.p3f).clone(),
            a4: tape.value(n.a4).clone(),
            a3: tape.value(n.a3).clone(),
            routing: n.routing.clone(),
            ba_invocations: n.ba_invocations,
            flops: n.flops,
        }
    }
}

pub fn afbifpn_forward(inputs: &Pyramid, p: &PipelineParams) -> Result<PipelineOutput> {
    let mut tape = Tape::new();
    let ids = inputs.levels.clone().map(|t| tape.leaf(t));
    let nodes = afbifpn_on_tape(&mut tape, ids, p, None)?;
    Ok(PipelineOutput::collect(&tape, &nodes))
}

pub fn c_afbifpn_forward(backbone: &Pyramid, p: &PipelineParams) -> Result<PipelineOutput> {
    backbone.check("C", None)?;
    for (i, (t, e)) in backbone.levels.iter().zip(&p.enhancers).enumerate() {
        if t.dims()[0] != e.c_in() {
            return Err(Error::Pipeline {
                node: format!("C{}", i + 2),
                reason: format!("{} channels, enhancer expects {}", t.dims()[0], e.c_in()),
            });
        }
    }
    let mut tape = Tape::new();
    let ids = backbone.levels.clone().map(|t| tape.leaf(t));
    let (_, nodes) = c_afbifpn_on_tape(&mut tape, ids, p, None)?;
    Ok(PipelineOutput::collect(&tape, &nodes))
}
