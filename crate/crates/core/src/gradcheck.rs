//! Analytic-vs-finite-difference checks for every learnable parameter
//! group, on small instances built from a run configuration.
//!
//! Each component is checked on its own desk-scale instance:
//!
//! * a CFE block (kernels, biases and offset predictors),
//! * a BA block with routing frozen (projections and LCE),
//! * the fusion network with both BA nodes frozen (fusion weights).
//!
//! Instances that sit too close to a relu kink, a bilinear lattice kink or a
//! routing tie are redrawn; every redraw is reported.

use serde::Serialize;

use crate::cfe::{cfe_on_tape, CfeParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::oracles::finite_diff_vjp;
use crate::pyramid::{afbifpn_on_tape, FusionWeights, InitOptions, PipelineParams};
use crate::rng::RngState;
use crate::routing::{ba_on_tape, BraParams, RoutingResult};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 1e-5;
/// Smallest allowed |pre-activation| at any relu.
pub const RELU_MARGIN: f64 = 1e-3;
/// Smallest allowed distance of a deformable sample from the pixel lattice.
pub const SAMPLING_MARGIN: f64 = 1e-3;
/// Smallest allowed gap between the k-th and (k+1)-th region affinity.
pub const ROUTING_MARGIN: f64 = 1e-3;
/// Smallest allowed distance of a raw fusion weight from the clamp at 0.
pub const CLAMP_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 64;

type Visit<P> = dyn Fn(&mut P, &mut dyn FnMut(&str, &mut [f64]));

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub tensors: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude seen; zero would make the
    /// group's check vacuous.
    pub max_abs_gradient: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResampleEvent {
    pub instance: String,
    pub attempt: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub threshold: f64,
    pub groups: Vec<GroupReport>,
    pub resamples: Vec<ResampleEvent>,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradcheckOptions {
    /// Plant an exact relu kink in the first CFE draw to exercise the
    /// resampling path.
    pub engineered_kink: bool,
}

/// `max |a − n| / max(max |a|, max |n|)` over one parameter tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

fn group_of(name: &str) -> &'static str {
    if name.starts_with("fusion.") {
        "fusion_weights"
    } else if name.contains(".offset.") {
        "offsets"
    } else if name.ends_with(".lce") {
        "lce"
    } else if name.ends_with(".w_q") || name.ends_with(".w_k") || name.ends_with(".w_v") {
        "ba_projections"
    } else {
        "cfe_kernels"
    }
}

/// One parameter's analytic gradient against central differences of
/// `loss`, perturbing that parameter through `visit`.
fn check_param<P: Clone>(
    params: &P,
    visit: &Visit<P>,
    name: &str,
    analytic: &Tensor,
    forward: &dyn Fn(&P) -> Result<Tensor>,
    seed: &Tensor,
) -> Result<f64> {
    if !analytic.is_finite() {
        return Err(Error::Numeric(format!("non-finite analytic gradient for {name}")));
    }
    let mut current = Vec::new();
    let mut probe = params.clone();
    visit(&mut probe, &mut |n, v| {
        if n == name {
            current = v.to_vec();
        }
    });
    if current.len() != analytic.numel() {
        return Err(Error::Graph(format!(
            "parameter {name}: {} values, gradient has {}",
            current.len(),
            analytic.numel()
        )));
    }
    let numeric = finite_diff_vjp(
        |t| {
            let mut q = params.clone();
            visit(&mut q, &mut |n, v| {
                if n == name {
                    v.copy_from_slice(t.data());
                }
            });
            forward(&q)
        },
        &Tensor::vector(&current),
        seed,
    )?;
    Ok(relative_error(analytic.data(), numeric.data()))
}

#[derive(Default)]
struct Tally {
    groups: Vec<GroupReport>,
}

impl Tally {
    fn add(&mut self, group: &str, coords: usize, err: f64, grad: f64) {
        let g = match self.groups.iter_mut().position(|g| g.group == group) {
            Some(i) => &mut self.groups[i],
            None => {
                self.groups.push(GroupReport {
                    group: group.to_string(),
                    tensors: 0,
                    coordinates: 0,
                    max_rel_error: 0.0,
                    max_abs_gradient: 0.0,
                    passed: true,
                });
                self.groups.last_mut().expect("just pushed")
            }
        };
        g.tensors += 1;
        g.coordinates += coords;
        g.max_rel_error = g.max_rel_error.max(err);
        g.max_abs_gradient = g.max_abs_gradient.max(grad);
        g.passed = g.max_rel_error <= THRESHOLD;
    }
}

/// Runs `build` on a fresh tape, checks every named parameter and adds the
/// results to `tally`.
fn check_all<P: Clone>(
    params: &P,
    visit: &Visit<P>,
    build: &dyn Fn(&mut Tape, &P) -> Result<NodeId>,
    seed: &Tensor,
    only: &dyn Fn(&str) -> bool,
    tally: &mut Tally,
) -> Result<()> {
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    let grads = tape.backward(out, seed)?;
    let forward = |p: &P| -> Result<Tensor> {
        let mut t = Tape::new();
        let o = build(&mut t, p)?;
        Ok(t.value(o).clone())
    };
    for (name, id) in tape.named().iter().filter(|(n, _)| only(n)) {
        let zeros;
        let analytic = match grads.get(*id) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(tape.value(*id).dims())?;
                &zeros
            }
        };
        let err = check_param(params, visit, name, analytic, &forward, seed)?;
        tally.add(group_of(name), analytic.numel(), err, analytic.max_abs());
    }
    Ok(())
}

fn rand(dims: &[usize], rng: &mut RngState) -> Result<Tensor> {
    Tensor::uniform(dims, rng, -1.0, 1.0)
}

fn check_cfe(
    cfg: &RunConfig,
    rng: &mut RngState,
    opts: GradcheckOptions,
    tally: &mut Tally,
    events: &mut Vec<ResampleEvent>,
) -> Result<()> {
    // three channels per branch: with one, a relu chain is dead in most draws
    let (c_in, width, size) = (2, 9, 5);
    for attempt in 0..MAX_ATTEMPTS {
        let mut p = CfeParams::seeded(c_in, width, cfg.dilation, cfg.activation, 0.6, false, rng)?;
        let x = rand(&[c_in, size, size], rng)?;
        if attempt == 0 && opts.engineered_kink {
            // zero the first reduce pre-activation at pixel (0, 0)
            let b = &mut p.branches[0].reduce;
            let z: f64 = (0..c_in).map(|c| b.weight.at(&[0, c, 0, 0]) * x.at(&[c, 0, 0])).sum();
            b.bias.data_mut()[0] = -z;
        }
        let build = |tape: &mut Tape, p: &CfeParams| -> Result<NodeId> {
            let xi = tape.leaf(x.clone());
            cfe_on_tape(tape, xi, p, "cfe")
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, &p)?;
        let relu = tape.relu_margin();
        let sampling = tape.sampling_margin();
        let reason = if relu < RELU_MARGIN {
            Some(format!("relu pre-activation {relu:.3e} within {RELU_MARGIN:e} of the kink"))
        } else if sampling < SAMPLING_MARGIN {
            Some(format!("deformable sample {sampling:.3e} from the pixel lattice"))
        } else {
            None
        };
        if let Some(reason) = reason {
            events.push(ResampleEvent {
                instance: "cfe".into(),
                attempt,
                reason,
            });
            continue;
        }
        let seed = rand(&[width, size, size], rng)?;
        // a relu chain that is off everywhere leaves a branch with zero
        // gradient, which would pass trivially
        let grads = tape.backward(out, &seed)?;
        let dead = tape
            .named()
            .iter()
            .find(|(_, id)| grads.get(*id).is_none_or(|g| g.max_abs() == 0.0));
        if let Some((name, _)) = dead {
            events.push(ResampleEvent {
                instance: "cfe".into(),
                attempt,
                reason: format!("{name} receives no gradient"),
            });
            continue;
        }
        return check_all(&p, &|q, f| q.visit_mut("cfe", f), &build, &seed, &|_| true, tally);
    }
    let last = events.last().map(|e| e.reason.as_str()).unwrap_or("");
    Err(Error::Numeric(format!("no smooth CFE instance in {MAX_ATTEMPTS} draws (last: {last})")))
}

fn check_ba(cfg: &RunConfig, rng: &mut RngState, tally: &mut Tally, events: &mut Vec<ResampleEvent>) -> Result<()> {
    let c = 2 * cfg.heads;
    let side = 2 * cfg.regions_s;
    for attempt in 0..MAX_ATTEMPTS {
        let p = BraParams::seeded(c, cfg.regions_s, cfg.topk_k, cfg.heads, cfg.lce_kernel, 1.0, false, rng)?;
        let x = rand(&[c, side, side], rng)?;
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let routing = ba_on_tape(&mut tape, xi, &p, "ba", None)?.routing;
        let margin = routing.margin();
        if margin < ROUTING_MARGIN {
            events.push(ResampleEvent {
                instance: "ba".into(),
                attempt,
                reason: format!("routing margin {margin:.3e} below {ROUTING_MARGIN:e}"),
            });
            continue;
        }
        let build = |tape: &mut Tape, p: &BraParams| -> Result<NodeId> {
            let xi = tape.leaf(x.clone());
            Ok(ba_on_tape(tape, xi, p, "ba", Some(&routing))?.output)
        };
        let seed = rand(&[c, side, side], rng)?;
        return check_all(&p, &|q, f| q.visit_mut("ba", f), &build, &seed, &|_| true, tally);
    }
    Err(Error::Numeric(format!("no well-separated routing in {MAX_ATTEMPTS} draws")))
}

fn check_fusion(cfg: &RunConfig, rng: &mut RngState, tally: &mut Tally, events: &mut Vec<ResampleEvent>) -> Result<()> {
    let width = 3 * cfg.heads;
    // level 3 must split into S×S regions, so level 4 has extent 2·S·2
    let h2 = 8 * cfg.regions_s;
    let small = RunConfig {
        fusion_width: width,
        cfe_enabled: false,
        ..cfg.clone()
    };
    for attempt in 0..MAX_ATTEMPTS {
        let mut p = PipelineParams::seeded(&small, [width; 4], InitOptions::default())?;
        for ba in p.attention.iter_mut() {
            *ba = BraParams::seeded(width, cfg.regions_s, cfg.topk_k, cfg.heads, cfg.lce_kernel, 1.0, false, rng)?;
        }
        let mut fw = FusionWeights::uniform(1.0, cfg.epsilon);
        // at least CLAMP_MARGIN away from the clamp at 0
        fw.visit_mut(&mut |_, v| v.iter_mut().for_each(|w| *w = rng.uniform(0.2, 1.5)));
        p.fusion = fw;
        let inputs: Vec<Tensor> = (0..4)
            .map(|i| rand(&[width, h2 >> i, h2 >> i], rng))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let ids: [NodeId; 4] = std::array::from_fn(|i| tape.leaf(inputs[i].clone()));
        let nodes = afbifpn_on_tape(&mut tape, ids, &p, None)?;
        let margin = nodes.routing.iter().map(RoutingResult::margin).fold(f64::INFINITY, f64::min);
        if margin < ROUTING_MARGIN {
            events.push(ResampleEvent {
                instance: "fusion".into(),
                attempt,
                reason: format!("routing margin {margin:.3e} below {ROUTING_MARGIN:e}"),
            });
            continue;
        }
        let routing = nodes.routing.clone();
        let build = |tape: &mut Tape, p: &PipelineParams| -> Result<NodeId> {
            let ids: [NodeId; 4] = std::array::from_fn(|i| tape.leaf(inputs[i].clone()));
            let n = afbifpn_on_tape(tape, ids, p, Some(&routing))?;
            // one scalar over all four outputs: flatten and concatenate
            let mut flat = Vec::with_capacity(4);
            for o in n.outputs {
                let numel = tape.value(o).numel();
                flat.push(tape.reshape(o, &[numel])?);
            }
            tape.concat(&flat, 0)
        };
        let total: usize = inputs.iter().map(Tensor::numel).sum();
        let seed = rand(&[total], rng)?;
        return check_all(
            &p,
            &|q, f| q.fusion.visit_mut(f),
            &build,
            &seed,
            &|n| n.starts_with("fusion."),
            tally,
        );
    }
    Err(Error::Numeric(format!("no well-separated routing in {MAX_ATTEMPTS} draws")))
}

/// Full gradient check for one configuration and seed.
pub fn run_gradcheck(cfg: &RunConfig, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = RngState::new(seed);
    let mut tally = Tally::default();
    let mut events = Vec::new();
    check_cfe(cfg, &mut rng, opts, &mut tally, &mut events)?;
    check_ba(cfg, &mut rng, &mut tally, &mut events)?;
    check_fusion(cfg, &mut rng, &mut tally, &mut events)?;
    let order = ["cfe_kernels", "offsets", "ba_projections", "lce", "fusion_weights"];
    tally
        .groups
        .sort_by_key(|g| order.iter().position(|o| *o == g.group).unwrap_or(order.len()));
    let passed = tally.groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        seed,
        threshold: THRESHOLD,
        groups: tally.groups,
        resamples: events,
        passed,
    })
}
