//! The ten acceptance criteria, each at its pinned tolerance and time
//! budget. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cafbifpn_core::config::RunConfig;
use cafbifpn_core::conv::{conv2d, deformable_conv2d, Conv2dParams, DeformableParams};
use cafbifpn_core::error::Error;
use cafbifpn_core::fixture::backbone_fixture;
use cafbifpn_core::format::{decode, encode};
use cafbifpn_core::gradcheck::{run_gradcheck, GradcheckOptions, THRESHOLD};
use cafbifpn_core::oracles::{
    attention_flops, c_afbifpn_reference, conv2d_reference, dense_attention_reference, AttentionDims, AttentionMode,
};
use cafbifpn_core::pyramid::{c_afbifpn_forward, fuse, InitOptions, PipelineParams};
use cafbifpn_core::rng::RngState;
use cafbifpn_core::routing::{ba_forward_traced, BraParams};
use cafbifpn_core::tensor::{DType, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Criterion = fn() -> Result<Outcome, Error>;

fn rand(dims: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::uniform(dims, rng, -1.0, 1.0).expect("valid dims")
}

fn sparse_dense_equivalence() -> Result<Outcome, Error> {
    let mut rng = RngState::new(101);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let s = [1, 2, 4][case % 3];
        let heads = 1 + case % 2;
        let c = 2 * heads * (1 + rng.below(4));
        let side = s * (1 + rng.below(16 / s));
        let p = BraParams::seeded(c, s, s * s, heads, 5, 0.5, true, &mut rng)?;
        let f = rand(&[c, side, side], &mut rng);
        let sparse = ba_forward_traced(&f, &p, None)?.output;
        worst = worst.max(sparse.max_abs_diff(&dense_attention_reference(&f, &p)?));
    }
    Ok(outcome(worst <= 1e-10, format!("max |Δ| {worst:.2e} ≤ 1e-10 over 20 cases")))
}

fn deformable_degeneracy() -> Result<Outcome, Error> {
    let mut rng = RngState::new(102);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let ci = 1 + rng.below(6);
        let co = 1 + rng.below(6);
        let x = rand(&[ci, 3 + rng.below(10), 3 + rng.below(10)], &mut rng);
        let base = Conv2dParams::same(rand(&[co, ci, 3, 3], &mut rng), rand(&[co], &mut rng), 1)?;
        let d = DeformableParams::with_zero_offsets(base.clone())?;
        worst = worst.max(deformable_conv2d(&x, &d)?.max_abs_diff(&conv2d(&x, &base)?));
    }
    Ok(outcome(worst <= 1e-12, format!("max |Δ| {worst:.2e} ≤ 1e-12 over 20 cases")))
}

fn conv_oracle() -> Result<Outcome, Error> {
    let mut rng = RngState::new(103);
    let kernels = [(1, 1), (3, 3), (5, 5), (1, 3), (3, 1), (1, 5), (5, 1)];
    let mut worst: f64 = 0.0;
    let mut dilated = 0;
    for i in 0..100 {
        let (kh, kw) = kernels[rng.below(kernels.len())];
        let d = 1 + i % 2;
        dilated += d - 1;
        let ci = 1 + rng.below(8);
        let co = 1 + rng.below(8);
        let x = rand(&[ci, 1 + rng.below(16), 1 + rng.below(16)], &mut rng);
        let p = Conv2dParams::same(rand(&[co, ci, kh, kw], &mut rng), rand(&[co], &mut rng), d)?;
        worst = worst.max(conv2d(&x, &p)?.max_abs_diff(&conv2d_reference(&x, &p)?));
    }
    Ok(outcome(
        worst <= 1e-12,
        format!("max |Δ| {worst:.2e} ≤ 1e-12 over 100 draws ({dilated} with dilation 2)"),
    ))
}

fn gradient_checks() -> Result<Outcome, Error> {
    let mut lines = Vec::new();
    let mut passed = true;
    for seed in [7, 8] {
        let r = run_gradcheck(&RunConfig::default(), seed, GradcheckOptions::default())?;
        passed &= r.passed && r.groups.len() == 5;
        let worst = r.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
        lines.push(format!(
            "seed {seed}: {} groups, worst {worst:.2e}, {} resamples",
            r.groups.len(),
            r.resamples.len()
        ));
    }
    Ok(outcome(passed, format!("{} (threshold {THRESHOLD:e})", lines.join("; "))))
}

fn standard_params(cfg: &RunConfig, opts: InitOptions) -> Result<PipelineParams, Error> {
    PipelineParams::seeded(cfg, [16, 32, 64, 128], opts)
}

fn pipeline_reduction() -> Result<Outcome, Error> {
    let cfg = RunConfig {
        cfe_enabled: false,
        attention_fusion_enabled: false,
        seed: 5,
        ..RunConfig::default()
    };
    let backbone = backbone_fixture(5)?;
    let p = standard_params(&cfg, InitOptions::default())?;
    let out = c_afbifpn_forward(&backbone, &p)?;
    let want = c_afbifpn_reference(&backbone, &p)?;
    let worst = out
        .outputs
        .levels
        .iter()
        .zip(&want)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    Ok(outcome(
        worst <= 1e-12 && out.ba_invocations == 0,
        format!("max |Δ| {worst:.2e} ≤ 1e-12, BA invocations {}", out.ba_invocations),
    ))
}

fn equation_substitution() -> Result<Outcome, Error> {
    let cfg = RunConfig {
        seed: 6,
        ..RunConfig::default()
    };
    let backbone = backbone_fixture(6)?;
    let mut worst: f64 = 0.0;
    for opts in [InitOptions::default(), InitOptions { random_offsets: true, zero_lce: false }] {
        let p = standard_params(&cfg, opts)?;
        let out = c_afbifpn_forward(&backbone, &p)?;
        let want = c_afbifpn_reference(&backbone, &p)?;
        for (a, b) in out.outputs.levels.iter().zip(&want) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    Ok(outcome(
        worst <= 1e-10,
        format!("max |Δ| {worst:.2e} ≤ 1e-10 (zero and random offsets)"),
    ))
}

fn wiring_contracts() -> Result<Outcome, Error> {
    let cfg = RunConfig {
        seed: 42,
        ..RunConfig::default()
    };
    // (encoded outputs, BA invocations, output dims)
    type Run = (Vec<Vec<u8>>, usize, Vec<Vec<usize>>);
    let run = || -> Result<Run, Error> {
        let backbone = backbone_fixture(cfg.seed)?;
        let p = standard_params(&cfg, InitOptions::default())?;
        let out = c_afbifpn_forward(&backbone, &p)?;
        let dims = out.outputs.levels.iter().map(|t| t.dims().to_vec()).collect();
        let bytes = out.outputs.levels.iter().map(encode).collect();
        Ok((bytes, out.ba_invocations, dims))
    };
    let (a, count, dims) = run()?;
    let (b, _, _) = run()?;
    let want: Vec<Vec<usize>> = (0..4).map(|i| vec![48, 64 >> i, 64 >> i]).collect();
    Ok(outcome(
        count == 2 && dims == want && a == b,
        format!("BA invocations {count}, dims {dims:?}, byte-identical reruns {}", a == b),
    ))
}

fn sparsity_accounting() -> Result<Outcome, Error> {
    let mut rng = RngState::new(108);
    let mut cases = 0;
    for s in [1, 2, 4] {
        for k in 1..=s * s {
            let side = 4 * s;
            let d = AttentionDims {
                h: side,
                w: side,
                c: 4,
                s,
                k,
                heads: 1,
                lce_kernel: 5,
            };
            let routed = attention_flops(d, AttentionMode::Routed);
            let dense = attention_flops(d, AttentionMode::Dense);
            let ratio = k as f64 / (s * s) as f64;
            let qk = routed.qk_logits as f64 / dense.qk_logits as f64;
            let av = routed.av_aggregation as f64 / dense.av_aggregation as f64;
            // exact rational check as well as the float ratio
            let exact = routed.qk_logits * (s * s) as u64 == dense.qk_logits * k as u64
                && routed.av_aggregation * (s * s) as u64 == dense.av_aggregation * k as u64;
            let p = BraParams::seeded(4, s, k, 1, 5, 0.5, false, &mut rng)?;
            let runtime = ba_forward_traced(&rand(&[4, side, side], &mut rng), &p, None)?.flops;
            if qk != ratio || av != ratio || !exact || runtime != routed {
                return Ok(outcome(
                    false,
                    format!("S={s} k={k}: ratios {qk}/{av} vs {ratio}, runtime {runtime:?} vs {routed:?}"),
                ));
            }
            cases += 1;
        }
    }
    Ok(outcome(true, format!("{cases} (S, k) pairs: ratio k/S² exact, runtime tallies equal formula")))
}

fn fusion_properties() -> Result<Outcome, Error> {
    let grid = [-1.0, 0.0, 0.25, 1.0, 2.5];
    let mut rng = RngState::new(109);
    let mut combos = 0;
    for n in 1..=3usize {
        let xs: Vec<Tensor> = (0..n).map(|_| rand(&[2, 3, 4], &mut rng)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let bound = xs.iter().map(Tensor::max_abs).fold(0.0, f64::max);
        for code in 0..grid.len().pow(n as u32) {
            let w: Vec<f64> = (0..n).map(|i| grid[(code / grid.len().pow(i as u32)) % grid.len()]).collect();
            let clamped: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
            let out = fuse(&refs, &w, 1e-4)?;
            if out.max_abs() > bound {
                return Ok(outcome(false, format!("weights {w:?} exceed the input bound")));
            }
            if !fuse(&refs, &clamped, 1e-4)?.bit_eq(&out) {
                return Ok(outcome(false, format!("weights {w:?} differ from their clamp")));
            }
            let total: f64 = clamped.iter().sum();
            if total > 0.0 {
                let limit = fuse(&refs, &w, 0.0)?;
                let mut prev = f64::INFINITY;
                for eps in [1e-1, 1e-2, 1e-4] {
                    let dev = fuse(&refs, &w, eps)?.max_abs_diff(&limit);
                    let allowed = limit.max_abs() * eps / (total + eps) + 1e-15;
                    if dev >= prev && dev > 0.0 || dev > allowed {
                        return Ok(outcome(false, format!("weights {w:?}: ε={eps} deviation {dev:.2e}")));
                    }
                    prev = dev;
                }
            }
            combos += 1;
        }
    }
    Ok(outcome(
        true,
        format!("{combos} weight combinations: bounded, clamp-equivalent, monotone ε-limit"),
    ))
}

fn serialization() -> Result<Outcome, Error> {
    let mut rng = RngState::new(110);
    for i in 0..1000 {
        let rank = 1 + rng.below(4);
        let dims: Vec<usize> = (0..rank).map(|_| 1 + rng.below(6)).collect();
        let mut t = Tensor::uniform(&dims, &mut rng, -1e3, 1e3)?;
        if i % 3 == 0 {
            t = t.to_dtype(DType::F32);
        }
        if !decode(&encode(&t))?.bit_eq(&t) {
            return Ok(outcome(false, format!("round-trip {i} changed bits")));
        }
    }
    let good = encode(&rand(&[2, 3], &mut rng));
    let mut corpus: Vec<Vec<u8>> = (0..good.len()).map(|n| good[..n].to_vec()).collect();
    let mut extra = good.clone();
    extra.push(0);
    corpus.push(extra);
    for (at, byte) in [(0, b'X'), (3, b'r'), (4, 2), (5, 0), (5, 7), (7, 1), (6, 0), (8, 0)] {
        let mut bad = good.clone();
        bad[at] = byte;
        corpus.push(bad);
    }
    let mut huge = good.clone();
    huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    corpus.push(huge);
    let mut handled = 0;
    for bytes in &corpus {
        match catch_unwind(AssertUnwindSafe(|| decode(bytes))) {
            Ok(Err(Error::Format { .. })) => handled += 1,
            Ok(other) => return Ok(outcome(false, format!("malformed file accepted: {other:?}"))),
            Err(_) => return Ok(outcome(false, "decoder panicked on a malformed file")),
        }
    }
    Ok(outcome(
        true,
        format!("1000 round-trips bit-identical; {handled} malformed files rejected with FormatError"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion, u64); 10] = [
        ("sparse/dense attention equivalence", sparse_dense_equivalence, 10),
        ("deformable degeneracy", deformable_degeneracy, 5),
        ("convolution oracle equivalence", conv_oracle, 30),
        ("gradient checks", gradient_checks, 60),
        ("pipeline reduction to plain BiFPN", pipeline_reduction, 5),
        ("equation-substitution oracle", equation_substitution, 30),
        ("wiring contracts", wiring_contracts, 300),
        ("sparsity accounting", sparsity_accounting, 300),
        ("fusion properties", fusion_properties, 5),
        ("serialization", serialization, 10),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(run);
        let elapsed = start.elapsed();
        let in_budget = elapsed <= Duration::from_secs(*budget);
        let (passed, detail) = match result {
            Ok(Ok(o)) => (o.passed && in_budget, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.2} s, budget {budget} s]",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
