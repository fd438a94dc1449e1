//! Desk-scale invariant suite behind the `selfcheck` command.

use serde::Serialize;

use crate::cfe::{cfe_forward, cfe_receptive_probe, Activation, CfeParams};
use crate::config::RunConfig;
use crate::conv::{conv2d, deformable_conv2d, Conv2dParams, DeformableParams};
use crate::error::Result;
use crate::format::{decode, encode};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::oracles::{
    attention_flops, conv2d_reference, dense_attention_reference, fuse_reference, topk_reference, AttentionDims,
    AttentionMode,
};
use crate::pyramid::{afbifpn_forward, fuse, resize, FusionWeights, InitOptions, PipelineParams, Pyramid, Resize};
use crate::rng::RngState;
use crate::routing::{
    ba_forward_traced, gather_kv, qkv_project, region_merge, region_partition, select_topk, token_attention,
    token_attention_weights, topk_routing, BraParams, RegionTokens, TieBreak,
};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SelfcheckOptions {
    /// Tie rule handed to the routing properties; anything but the default
    /// is a planted fault.
    pub tie_break: TieBreak,
}

type Check = fn(&SelfcheckOptions) -> Result<(bool, String)>;

fn rand(dims: &[usize], rng: &mut RngState) -> Result<Tensor> {
    Tensor::uniform(dims, rng, -1.0, 1.0)
}

fn within(err: f64, tol: f64) -> (bool, String) {
    (err <= tol, format!("max deviation {err:.3e} (tolerance {tol:e})"))
}

fn softmax_rows(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let t = Tensor::uniform(&[6, 9], &mut rng, -30.0, 30.0)?.softmax_lastdim()?;
        for row in t.data().chunks(9) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(within(worst, 1e-12))
}

fn structural_round_trips(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(2);
    for _ in 0..20 {
        let t = rand(&[3, 4, 5], &mut rng)?;
        let r = t.reshape(&[5, 12])?.reshape(&[3, 4, 5])?;
        let p = t.permute(&[1, 2, 0])?.permute(&[2, 0, 1])?;
        if !r.bit_eq(&t) || !p.bit_eq(&t) {
            return Ok((false, "round-trip changed bits".into()));
        }
    }
    Ok((true, "20 reshape and permute round-trips bit-identical".into()))
}

fn rng_stream(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let first = RngState::new(0).next_u64();
    let mut a = RngState::new(9);
    let mut b = RngState::new(9);
    let same = (0..1000).all(|_| a.next_u64() == b.next_u64());
    Ok((
        first == 0xE220_A839_7B1D_CDAF && same,
        format!("seed 0 first output {first:#018x}"),
    ))
}

fn conv_oracle(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(3);
    let kernels = [(1, 1), (3, 3), (5, 5), (1, 3), (3, 1), (1, 5), (5, 1)];
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let (kh, kw) = kernels[i % kernels.len()];
        let ci = 1 + rng.below(4);
        let co = 1 + rng.below(4);
        let d = 1 + i % 2;
        let x = rand(&[ci, 4 + rng.below(6), 4 + rng.below(6)], &mut rng)?;
        let p = Conv2dParams::same(rand(&[co, ci, kh, kw], &mut rng)?, rand(&[co], &mut rng)?, d)?;
        worst = worst.max(conv2d(&x, &p)?.max_abs_diff(&conv2d_reference(&x, &p)?));
    }
    Ok(within(worst, 1e-12))
}

fn deformable_degeneracy(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = rand(&[3, 6, 7], &mut rng)?;
        let base = Conv2dParams::same(rand(&[2, 3, 3, 3], &mut rng)?, rand(&[2], &mut rng)?, 1)?;
        let d = DeformableParams::with_zero_offsets(base.clone())?;
        worst = worst.max(deformable_conv2d(&x, &d)?.max_abs_diff(&conv2d(&x, &base)?));
    }
    Ok(within(worst, 1e-12))
}

fn dilated_support(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let w = Tensor::full(&[1, 1, 3, 3], 1.0)?;
    let p = Conv2dParams::same(w, Tensor::zeros(&[1])?, 2)?;
    let r = crate::cfe::impulse_support_radius(1, 11, |x| conv2d(x, &p))?;
    Ok((r == 2, format!("dilation-2 3x3 support radius {r}")))
}

fn sparse_dense_equivalence(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(5);
    let mut worst: f64 = 0.0;
    for (s, heads) in [(1, 1), (2, 2), (4, 1), (2, 1)] {
        let c = 4;
        let p = BraParams::seeded(c, s, s * s, heads, 5, 0.5, true, &mut rng)?;
        let f = rand(&[c, 8, 8], &mut rng)?;
        let y = ba_forward_traced(&f, &p, None)?.output;
        worst = worst.max(y.max_abs_diff(&dense_attention_reference(&f, &p)?));
    }
    Ok(within(worst, 1e-10))
}

fn topk_tiebreak(o: &SelfcheckOptions) -> Result<(bool, String)> {
    let hand = Tensor::new(&[1, 4], vec![0.2, 0.9, 0.9, 0.1])?;
    let r = select_topk(&hand, 2, o.tie_break)?;
    if r.indices[0] != [1, 2] {
        return Ok((false, format!("hand row gave {:?}, expected [1, 2]", r.indices[0])));
    }
    let mut rng = RngState::new(6);
    for _ in 0..20 {
        // coarse values force ties
        let aff = Tensor::from_fn(&[16, 16], |_| (rng.below(5)) as f64)?;
        let r = select_topk(&aff, 4, o.tie_break)?;
        for (i, row) in r.indices.iter().enumerate() {
            if *row != topk_reference(&aff.data()[i * 16..(i + 1) * 16], 4) {
                return Ok((false, format!("row {i} disagrees with the full-sort oracle")));
            }
        }
    }
    Ok((true, "hand row and 320 tied rows match the full-sort oracle".into()))
}

fn attention_rows_and_bounds(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(7);
    let p = BraParams::seeded(4, 2, 2, 2, 5, 1.0, true, &mut rng)?;
    let f = rand(&[4, 4, 4], &mut rng)?;
    let rt = region_partition(&f, 2)?;
    let (q, k, v) = qkv_project(&rt, &p)?;
    let q_rm = q.data.mean_axis(1)?;
    let k_rm = k.data.mean_axis(1)?;
    let routing = topk_routing(&q_rm, &k_rm, 2)?;
    let (kg, vg) = gather_kv(&k, &v, &routing)?;
    let mut worst: f64 = 0.0;
    for a in token_attention_weights(&q, &kg, &vg, 2)? {
        if a.data().iter().any(|&x| x < 0.0) {
            return Ok((false, "negative attention weight".into()));
        }
        for row in a.data().chunks(a.dims()[1]) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let out = token_attention(&q, &kg, &vg, 2)?;
    let (n, c) = (out.data.dims()[1], out.data.dims()[2]);
    let kn = vg.dims()[1];
    for r in 0..4 {
        for ch in 0..c {
            let vals: Vec<f64> = (0..kn).map(|t| vg.at(&[r, t, ch])).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for t in 0..n {
                let o = out.data.at(&[r, t, ch]);
                if o < lo - 1e-12 || o > hi + 1e-12 {
                    return Ok((false, format!("region {r} channel {ch} leaves the value hull")));
                }
            }
        }
    }
    Ok(within(worst, 1e-12))
}

fn permute_tiles(f: &Tensor, s: usize, perm: &[usize]) -> Result<Tensor> {
    let rt = region_partition(f, s)?;
    let moved = RegionTokens {
        data: rt.data.index_select(perm)?,
        ..rt
    };
    region_merge(&moved)
}

fn routing_equivariance(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(8);
    let s = 2;
    let p = BraParams::seeded(3, s, 2, 1, 5, 1.0, true, &mut rng)?;
    let f = rand(&[3, 6, 6], &mut rng)?;
    let perm = [2, 0, 3, 1];
    let mut inv = [0; 4];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    let a = ba_forward_traced(&f, &p, None)?;
    let b = ba_forward_traced(&permute_tiles(&f, s, &perm)?, &p, None)?;
    let want = permute_tiles(&a.output, s, &perm)?;
    for (r, &src) in perm.iter().enumerate() {
        let mapped: Vec<usize> = a.routing.indices[src].iter().map(|&j| inv[j]).collect();
        if mapped != b.routing.indices[r] {
            return Ok((false, format!("routing row {r} not permuted consistently")));
        }
    }
    Ok(within(b.output.max_abs_diff(&want), 1e-12))
}

fn small_cfe(activation: Activation, seed: u64) -> Result<CfeParams> {
    CfeParams::seeded(4, 6, 2, activation, 0.1, true, &mut RngState::new(seed))
}

fn cfe_spatial_and_zero_branches(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(9);
    let p = small_cfe(Activation::Relu, 9)?;
    let x = rand(&[4, 7, 5], &mut rng)?;
    let y = cfe_forward(&x, &p)?;
    if y.dims() != [6, 7, 5] {
        return Ok((false, format!("output dims {:?}", y.dims())));
    }
    let z = p.with_zeroed_branches(&[0, 1, 2]);
    let err = cfe_forward(&x, &z)?.max_abs_diff(&conv2d(&x, &p.residual)?);
    Ok(within(err, 0.0))
}

fn cfe_receptive_field(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let p = small_cfe(Activation::Relu, 10)?;
    let full = cfe_receptive_probe(&p)?;
    let b2 = cfe_receptive_probe(&p.with_zeroed_branches(&[0, 2]))?;
    let b1 = cfe_receptive_probe(&p.with_zeroed_branches(&[1, 2]))?;
    Ok((
        full > 1 && b2 == 4 && b1 == 3,
        format!("radius full {full}, branch 2 {b2}, branch 1 {b1}"),
    ))
}

fn small_pipeline(attention: bool, seed: u64) -> Result<(Pyramid, PipelineParams)> {
    let cfg = RunConfig {
        fusion_width: 6,
        attention_fusion_enabled: attention,
        seed,
        ..RunConfig::default()
    };
    let p = PipelineParams::seeded(&cfg, [6; 4], InitOptions::default())?;
    let mut rng = RngState::new(seed);
    let levels = [0, 1, 2, 3].map(|i| rand(&[6, 16 >> i, 16 >> i], &mut rng));
    let [a, b, c, d] = levels;
    Ok((Pyramid::new([a?, b?, c?, d?]), p))
}

fn ba_memoized(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let (inputs, p) = small_pipeline(true, 11)?;
    let on = afbifpn_forward(&inputs, &p)?.ba_invocations;
    let (inputs, p) = small_pipeline(false, 11)?;
    let off = afbifpn_forward(&inputs, &p)?.ba_invocations;
    Ok((on == 2 && off == 0, format!("{on} invocations enabled, {off} disabled")))
}

fn fuse_properties(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(12);
    for _ in 0..50 {
        let n = 1 + rng.below(3);
        let xs: Vec<Tensor> = (0..n).map(|_| rand(&[2, 3, 3], &mut rng)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = xs.iter().collect();
        let w: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 2.0)).collect();
        if w.iter().all(|&v| v <= 0.0) {
            continue;
        }
        let out = fuse(&refs, &w, 1e-4)?;
        let bound = xs.iter().map(Tensor::max_abs).fold(0.0, f64::max);
        if out.max_abs() > bound {
            return Ok((false, "fused output exceeds input bound".into()));
        }
        let clamped: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
        if !fuse(&refs, &clamped, 1e-4)?.bit_eq(&out) {
            return Ok((false, "negative weight not clamped".into()));
        }
        if fuse_reference(&refs, &w, 1e-4)?.max_abs_diff(&out) > 1e-14 {
            return Ok((false, "fuse disagrees with loop reference".into()));
        }
    }
    let x = rand(&[1, 4, 4], &mut rng)?;
    let y = rand(&[1, 4, 4], &mut rng)?;
    let mean = fuse(&[&x, &y], &[0.7, 0.3], 0.0)?;
    let errs: Vec<f64> = [1e-1, 1e-2, 1e-4]
        .iter()
        .map(|&e| fuse(&[&x, &y], &[0.7, 0.3], e).map(|t| t.max_abs_diff(&mean)))
        .collect::<Result<_>>()?;
    Ok((
        errs[0] > errs[1] && errs[1] > errs[2],
        format!("ε-limit deviations {errs:.2?}"),
    ))
}

fn fusion_homogeneity(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let (inputs, mut p) = small_pipeline(false, 13)?;
    p.fusion = FusionWeights::uniform(0.75, 0.0);
    let a = afbifpn_forward(&inputs, &p)?;
    p.fusion = p.fusion.rescaled(8.0);
    let b = afbifpn_forward(&inputs, &p)?;
    let same = a.outputs.levels.iter().zip(&b.outputs.levels).all(|(x, y)| x.bit_eq(y));
    Ok((same, "uniform weight rescaling at ε = 0".into()))
}

fn resize_round_trip(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(14);
    let f = rand(&[3, 5, 6], &mut rng)?;
    let back = resize(&resize(&f, Resize::Up2)?, Resize::Down2)?;
    Ok((back.bit_eq(&f), "down2(up2(f)) == f".into()))
}

fn flop_accounting(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(15);
    for (s, k) in [(1, 1), (2, 1), (2, 2), (2, 4), (4, 2), (4, 16)] {
        let d = AttentionDims { h: 8, w: 8, c: 4, s, k, heads: 1, lce_kernel: 5 };
        let routed = attention_flops(d, AttentionMode::Routed);
        let dense = attention_flops(d, AttentionMode::Dense);
        let ratio = k as f64 / (s * s) as f64;
        if routed.qk_logits as f64 / dense.qk_logits as f64 != ratio
            || routed.av_aggregation as f64 / dense.av_aggregation as f64 != ratio
        {
            return Ok((false, format!("ratio off for S={s}, k={k}")));
        }
        let p = BraParams::seeded(4, s, k, 1, 5, 0.5, false, &mut rng)?;
        let runtime = ba_forward_traced(&rand(&[4, 8, 8], &mut rng)?, &p, None)?.flops;
        if runtime != routed {
            return Ok((false, format!("runtime {runtime:?} vs formula {routed:?}")));
        }
    }
    Ok((true, "qk/av ratio k/S² and runtime tallies exact".into()))
}

fn serialization(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = RngState::new(16);
    for i in 0..100 {
        let rank = 1 + rng.below(4);
        let dims: Vec<usize> = (0..rank).map(|_| 1 + rng.below(5)).collect();
        let mut t = rand(&dims, &mut rng)?;
        if i % 2 == 1 {
            t = t.to_dtype(DType::F32);
        }
        if !decode(&encode(&t))?.bit_eq(&t) {
            return Ok((false, format!("round-trip {i} changed bits")));
        }
    }
    let good = encode(&Tensor::zeros(&[2, 2])?);
    let mut corpus = vec![good[..good.len() - 1].to_vec(), good[..3].to_vec(), Vec::new()];
    let mut bad = good.clone();
    bad[0] = b'Q';
    corpus.push(bad);
    let mut bad = good.clone();
    bad[5] = 7;
    corpus.push(bad);
    let all_rejected = corpus
        .iter()
        .all(|b| matches!(decode(b), Err(crate::error::Error::Format { .. })));
    Ok((all_rejected, "100 round-trips; malformed corpus rejected".into()))
}

fn gradients(_: &SelfcheckOptions) -> Result<(bool, String)> {
    let r = run_gradcheck(&RunConfig::default(), 7, GradcheckOptions::default())?;
    let worst = r.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok((
        r.passed,
        format!("{} groups, worst relative error {worst:.2e}, {} resamples", r.groups.len(), r.resamples.len()),
    ))
}

pub const PROPERTIES: &[(&str, Check)] = &[
    ("tensor.softmax_rows_sum_to_one", softmax_rows),
    ("tensor.structural_round_trips", structural_round_trips),
    ("tensor.rng_reproducible", rng_stream),
    ("conv.matches_reference", conv_oracle),
    ("conv.deformable_zero_offsets", deformable_degeneracy),
    ("conv.dilated_support", dilated_support),
    ("routing.sparse_dense_equivalence", sparse_dense_equivalence),
    ("routing.topk_tiebreak", topk_tiebreak),
    ("routing.attention_rows_and_hull", attention_rows_and_bounds),
    ("routing.permutation_equivariance", routing_equivariance),
    ("cfe.spatial_and_zero_branches", cfe_spatial_and_zero_branches),
    ("cfe.receptive_field", cfe_receptive_field),
    ("pipeline.ba_invoked_twice", ba_memoized),
    ("pipeline.fuse_bound_clamp_epsilon", fuse_properties),
    ("pipeline.weight_homogeneity", fusion_homogeneity),
    ("pipeline.resize_round_trip", resize_round_trip),
    ("oracles.flop_accounting", flop_accounting),
    ("io.serialization", serialization),
    ("gradients.all_groups", gradients),
];

/// Runs every property; an error inside a property counts as a failure.
pub fn run_selfcheck(opts: &SelfcheckOptions) -> Vec<PropertyResult> {
    PROPERTIES
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = match check(opts) {
                Ok(r) => r,
                Err(e) => (false, e.to_string()),
            };
            PropertyResult {
                name: name.to_string(),
                passed,
                detail,
            }
        })
        .collect()
}
