//! Browser demo. Three views, each a thin `wasm_bindgen` export over a
//! plain function so the numbers can be tested natively:
//!
//! * CFE impulse response: how far a unit impulse spreads per branch.
//! * BA routing: region affinities and the top-k regions each region reads.
//! * Fusion weights: fast normalized fusion of three test patterns.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cafbifpn_core::cfe::{cfe_forward, Activation, CfeParams};
use cafbifpn_core::error::Result;
use cafbifpn_core::pyramid::fuse;
use cafbifpn_core::routing::{ba_forward_traced, BraParams};
use cafbifpn_core::{RngState, Tensor};

pub const IMPULSE_SIZE: usize = 21;

fn js_err(e: cafbifpn_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Summed absolute response of a single-channel CFE block to a centered
/// impulse, as a row-major `IMPULSE_SIZE²` map. Kernels are made
/// non-negative and biases zero so nothing cancels. `branch` picks one
/// branch (0, 1 or 2); anything else keeps all three.
pub fn impulse_map(dilation: usize, seed: u64, branch: i32) -> Result<Vec<f64>> {
    let mut rng = RngState::new(seed);
    let p = CfeParams::seeded(1, 3, dilation, Activation::Relu, 1.0, true, &mut rng)?;
    let mut probe = match usize::try_from(branch) {
        Ok(b) if b < 3 => p.with_zeroed_branches(&(0..3).filter(|&i| i != b).collect::<Vec<_>>()),
        _ => p,
    };
    probe.visit_mut("", &mut |name, v| {
        let bias = name.ends_with(".bias");
        v.iter_mut().for_each(|x| *x = if bias { 0.0 } else { x.abs() });
    });
    let mut x = Tensor::zeros(&[1, IMPULSE_SIZE, IMPULSE_SIZE])?;
    x.set(&[0, IMPULSE_SIZE / 2, IMPULSE_SIZE / 2], 1.0);
    let y = cfe_forward(&x, &probe)?;
    let plane = IMPULSE_SIZE * IMPULSE_SIZE;
    let mut map = vec![0.0; plane];
    for chunk in y.data().chunks(plane) {
        map.iter_mut().zip(chunk).for_each(|(m, v)| *m += v.abs());
    }
    Ok(map)
}

/// Chebyshev radius of the non-zero part of an impulse map.
pub fn support_radius(map: &[f64]) -> usize {
    let c = IMPULSE_SIZE / 2;
    map.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| (i / IMPULSE_SIZE).abs_diff(c).max((i % IMPULSE_SIZE).abs_diff(c)))
        .max()
        .unwrap_or(0)
}

#[derive(Serialize)]
pub struct RoutingView {
    pub side: usize,
    pub regions_per_side: usize,
    /// Channel-mean of the input, row-major `side²`.
    pub intensity: Vec<f64>,
    /// Row-major `S² × S²` region affinities.
    pub affinity: Vec<f64>,
    /// Routed region ids per query region.
    pub selected: Vec<Vec<usize>>,
    pub margin: f64,
    pub qk_macs: u64,
    pub dense_qk_macs: u64,
}

const ROUTING_CHANNELS: usize = 6;

/// Synthetic scene: low clutter plus a few bright blobs, so routing has
/// something to find.
fn scene(side: usize, rng: &mut RngState) -> Result<Tensor> {
    let blobs: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.uniform(0.0, side as f64), rng.uniform(0.0, side as f64)))
        .collect();
    let gains: Vec<f64> = (0..ROUTING_CHANNELS).map(|_| rng.uniform(0.5, 1.5)).collect();
    let sigma2 = (side as f64 / 10.0).max(1.0).powi(2);
    let mut data = Vec::with_capacity(ROUTING_CHANNELS * side * side);
    for g in &gains {
        for y in 0..side {
            for x in 0..side {
                let peak: f64 = blobs
                    .iter()
                    .map(|(by, bx)| (-((y as f64 - by).powi(2) + (x as f64 - bx).powi(2)) / (2.0 * sigma2)).exp())
                    .sum();
                data.push(g * peak + rng.uniform(-0.1, 0.1));
            }
        }
    }
    Tensor::new(&[ROUTING_CHANNELS, side, side], data)
}

pub fn routing_view(side: usize, regions_per_side: usize, top_k: usize, seed: u64) -> Result<RoutingView> {
    let mut rng = RngState::new(seed);
    let f = scene(side, &mut rng)?;
    let mut p = BraParams::seeded(ROUTING_CHANNELS, regions_per_side, top_k, 1, 3, 0.5, true, &mut rng)?;
    // shared Q/K projection keeps affinities readable as similarity
    p.w_k = p.w_q.clone();
    let out = ba_forward_traced(&f, &p, None)?;
    let plane = side * side;
    let mut intensity = vec![0.0; plane];
    for chunk in f.data().chunks(plane) {
        intensity.iter_mut().zip(chunk).for_each(|(m, v)| *m += v / ROUTING_CHANNELS as f64);
    }
    Ok(RoutingView {
        side,
        regions_per_side,
        intensity,
        affinity: out.routing.affinity.data().to_vec(),
        margin: out.routing.margin(),
        selected: out.routing.indices,
        qk_macs: out.flops.qk_logits,
        dense_qk_macs: (plane * plane * ROUTING_CHANNELS) as u64,
    })
}

pub const FUSE_SIZE: usize = 48;

/// Stripes, checkerboard and a radial ramp, each in `[0, 1]`.
pub fn patterns() -> Result<[Tensor; 3]> {
    let n = FUSE_SIZE;
    let c = (n as f64 - 1.0) / 2.0;
    let stripes = Tensor::from_fn(&[1, n, n], |i| ((i / n / 6) % 2) as f64)?;
    let checker = Tensor::from_fn(&[1, n, n], |i| ((i / n / 8 + i % n / 8) % 2) as f64)?;
    let ramp = Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
        1.0 - ((y * y + x * x).sqrt() / (c * std::f64::consts::SQRT_2)).min(1.0)
    })?;
    Ok([stripes, checker, ramp])
}

pub fn fuse_map(weights: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let pats = patterns()?;
    let refs: Vec<&Tensor> = pats.iter().collect();
    Ok(fuse(&refs, weights, epsilon)?.into_data())
}

/// Effective per-input coefficients `max(w, 0) / (Σ max(w, 0) + ε)`.
pub fn fusion_coefficients(weights: &[f64], epsilon: f64) -> Vec<f64> {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum::<f64>() + epsilon;
    weights.iter().map(|w| if total > 0.0 { w.max(0.0) / total } else { 0.0 }).collect()
}

#[wasm_bindgen(js_name = impulseMap)]
pub fn impulse_map_js(dilation: usize, seed: u64, branch: i32) -> std::result::Result<Vec<f64>, JsError> {
    impulse_map(dilation, seed, branch).map_err(js_err)
}

#[wasm_bindgen(js_name = supportRadius)]
pub fn support_radius_js(map: &[f64]) -> usize {
    support_radius(map)
}

#[wasm_bindgen(js_name = impulseSize)]
pub fn impulse_size_js() -> usize {
    IMPULSE_SIZE
}

/// JSON-encoded [`RoutingView`].
#[wasm_bindgen(js_name = routingView)]
pub fn routing_view_js(side: usize, regions_per_side: usize, top_k: usize, seed: u64) -> std::result::Result<String, JsError> {
    let view = routing_view(side, regions_per_side, top_k, seed).map_err(js_err)?;
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

#[wasm_bindgen(js_name = fuseMap)]
pub fn fuse_map_js(w1: f64, w2: f64, w3: f64, epsilon: f64) -> std::result::Result<Vec<f64>, JsError> {
    fuse_map(&[w1, w2, w3], epsilon).map_err(js_err)
}

#[wasm_bindgen(js_name = fusionCoefficients)]
pub fn fusion_coefficients_js(w1: f64, w2: f64, w3: f64, epsilon: f64) -> Vec<f64> {
    fusion_coefficients(&[w1, w2, w3], epsilon)
}

#[wasm_bindgen(js_name = fuseSize)]
pub fn fuse_size_js() -> usize {
    FUSE_SIZE
}
