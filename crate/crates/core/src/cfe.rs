//! Convolutional feature enhancement: three parallel asymmetric-conv
//! branches, each closed by a dilated or deformable 3×3, concatenated and
//! added to a 1×1 projection of the input.

use serde::{Deserialize, Serialize};

use crate::conv::{Conv2dParams, DeformableParams};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BranchTail {
    Dilated(Conv2dParams),
    Deformable(DeformableParams),
}

/// `reduce (1×1) → conv_a → conv_b → tail`
#[derive(Clone, Debug, PartialEq)]
pub struct CfeBranch {
    pub reduce: Conv2dParams,
    pub conv_a: Conv2dParams,
    pub conv_b: Conv2dParams,
    pub tail: BranchTail,
}

impl CfeBranch {
    fn convs(&self) -> [&Conv2dParams; 3] {
        [&self.reduce, &self.conv_a, &self.conv_b]
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.reduce.visit_mut(&format!("{prefix}.reduce"), f);
        self.conv_a.visit_mut(&format!("{prefix}.conv_a"), f);
        self.conv_b.visit_mut(&format!("{prefix}.conv_b"), f);
        match &mut self.tail {
            BranchTail::Dilated(c) => c.visit_mut(&format!("{prefix}.tail"), f),
            BranchTail::Deformable(d) => d.visit_mut(&format!("{prefix}.tail"), f),
        }
    }

    fn zero_kernels(&mut self) {
        self.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x = 0.0));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfeParams {
    /// B1: 1×3 then 3×1 then dilated 3×3.
    /// B2: 1×5 then 5×1 then dilated 3×3.
    /// B3: 3×1 then 1×3 then deformable 3×3.
    pub branches: [CfeBranch; 3],
    pub residual: Conv2dParams,
    pub activation: Activation,
}

/// Kernel shapes `(conv_a, conv_b)` of each branch.
const BRANCH_KERNELS: [((usize, usize), (usize, usize)); 3] = [((1, 3), (3, 1)), ((1, 5), (5, 1)), ((3, 1), (1, 3))];

impl CfeParams {
    /// Seeded initialization: every kernel and bias uniform in `(-scale, scale)`;
    /// deformable offset predictors zero unless `zero_offsets` is false.
    pub fn seeded(
        c_in: usize,
        width: usize,
        dilation: usize,
        activation: Activation,
        scale: f64,
        zero_offsets: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        if width == 0 || !width.is_multiple_of(3) {
            return Err(Error::config(format!("fusion width {width} must be a positive multiple of 3")));
        }
        let bw = width / 3;
        let mut branches = Vec::with_capacity(3);
        for (i, (ka, kb)) in BRANCH_KERNELS.iter().enumerate() {
            let reduce = Conv2dParams::seeded(bw, c_in, (1, 1), 1, scale, rng)?;
            let conv_a = Conv2dParams::seeded(bw, bw, *ka, 1, scale, rng)?;
            let conv_b = Conv2dParams::seeded(bw, bw, *kb, 1, scale, rng)?;
            let tail = if i < 2 {
                BranchTail::Dilated(Conv2dParams::seeded(bw, bw, (3, 3), dilation, scale, rng)?)
            } else {
                let base = Conv2dParams::seeded(bw, bw, (3, 3), 1, scale, rng)?;
                let pred = if zero_offsets {
                    Conv2dParams::zeros(18, bw, 3, 3, 1)?
                } else {
                    Conv2dParams::seeded(18, bw, (3, 3), 1, scale, rng)?
                };
                BranchTail::Deformable(DeformableParams::new(base, pred)?)
            };
            branches.push(CfeBranch { reduce, conv_a, conv_b, tail });
        }
        let residual = Conv2dParams::seeded(width, c_in, (1, 1), 1, scale, rng)?;
        let branches: [CfeBranch; 3] = branches.try_into().expect("three branches");
        let p = Self { branches, residual, activation };
        p.validate()?;
        Ok(p)
    }

    pub fn c_in(&self) -> usize {
        self.residual.c_in()
    }

    pub fn width(&self) -> usize {
        self.residual.c_out()
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.width();
        if !width.is_multiple_of(3) {
            return Err(Error::config(format!("fusion width {width} must be divisible by 3")));
        }
        let bw = width / 3;
        for (i, b) in self.branches.iter().enumerate() {
            let mut c = self.c_in();
            for conv in b.convs() {
                if conv.c_in() != c || conv.c_out() != bw || conv.geometry.stride != 1 {
                    return Err(Error::shape(format!(
                        "branch {} conv {:?} breaks the {c} -> {bw} channel plan",
                        i + 1,
                        conv.weight.dims()
                    )));
                }
                c = bw;
            }
            let tail = match &b.tail {
                BranchTail::Dilated(t) => t,
                BranchTail::Deformable(d) => &d.base,
            };
            if tail.c_in() != bw || tail.c_out() != bw {
                return Err(Error::shape(format!("branch {} tail breaks the channel plan", i + 1)));
            }
        }
        Ok(())
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.b{}", i + 1), f);
        }
        self.residual.visit_mut(&format!("{prefix}.residual"), f);
    }

    /// Same parameters with the given branches' kernels and biases zeroed.
    pub fn with_zeroed_branches(&self, which: &[usize]) -> Self {
        let mut p = self.clone();
        for &i in which {
            p.branches[i].zero_kernels();
        }
        p
    }

    /// Same parameters with every deformable offset predictor zeroed.
    pub fn with_zero_offsets(&self) -> Self {
        let mut p = self.clone();
        for b in &mut p.branches {
            if let BranchTail::Deformable(d) = &mut b.tail {
                d.offset_predictor.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                d.offset_predictor.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p
    }
}

fn activate(tape: &mut Tape, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::None => Ok(x),
        Activation::Relu => tape.relu(x),
    }
}

/// Records one CFE pass, registering parameters under `prefix`.
pub fn cfe_on_tape(tape: &mut Tape, x: NodeId, p: &CfeParams, prefix: &str) -> Result<NodeId> {
    p.validate()?;
    let dims = tape.value(x).dims().to_vec();
    if dims.len() != 3 || dims[0] != p.c_in() {
        return Err(Error::shape(format!(
            "CFE expects [{}, H, W] input, got {dims:?}",
            p.c_in()
        )));
    }
    let mut outs = Vec::with_capacity(3);
    for (i, b) in p.branches.iter().enumerate() {
        let bp = format!("{prefix}.b{}", i + 1);
        let mut h = x;
        for (conv, name) in b.convs().into_iter().zip(["reduce", "conv_a", "conv_b"]) {
            h = conv.on_tape(tape, h, &format!("{bp}.{name}"))?;
            h = activate(tape, h, p.activation)?;
        }
        h = match &b.tail {
            BranchTail::Dilated(c) => c.on_tape(tape, h, &format!("{bp}.tail"))?,
            BranchTail::Deformable(d) => d.on_tape(tape, h, &format!("{bp}.tail"))?,
        };
        outs.push(activate(tape, h, p.activation)?);
    }
    let cat = tape.concat(&outs, 0)?;
    let res = p.residual.on_tape(tape, x, &format!("{prefix}.residual"))?;
    tape.add(cat, res)
}

pub fn cfe_forward(f: &Tensor, p: &CfeParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(f.clone());
    let y = cfe_on_tape(&mut tape, x, p, "cfe")?;
    Ok(tape.value(y).clone())
}

/// Chebyshev radius of the non-zero response of `f` to a unit impulse at
/// the center of a `size × size` map with `channels` channels.
pub fn impulse_support_radius(
    channels: usize,
    size: usize,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<usize> {
    let c0 = size / 2;
    let mut x = Tensor::zeros(&[channels, size, size])?;
    for c in 0..channels {
        x.set(&[c, c0, c0], 1.0);
    }
    let y = f(&x)?;
    let (oc, h, w) = (y.dims()[0], y.dims()[1], y.dims()[2]);
    let mut radius = 0;
    for c in 0..oc {
        for yy in 0..h {
            for xx in 0..w {
                if y.at(&[c, yy, xx]) != 0.0 {
                    radius = radius.max(yy.abs_diff(c0).max(xx.abs_diff(c0)));
                }
            }
        }
    }
    Ok(radius)
}

/// Measured spatial reach of a CFE block.
///
/// The probe runs on a copy with absolute-valued kernels, zero biases and
/// zero offsets, so no response cancels and the measured support equals the
/// structural support of the kernels.
pub fn cfe_receptive_probe(p: &CfeParams) -> Result<usize> {
    let mut probe = p.with_zero_offsets();
    probe.visit_mut("", &mut |name, v| {
        let is_bias = name.ends_with(".bias");
        for x in v.iter_mut() {
            *x = if is_bias { 0.0 } else { x.abs() };
        }
    });
    impulse_support_radius(p.c_in(), 21, |x| cfe_forward(x, &probe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::oracles::cfe_reference;

    fn rand(dims: &[usize], rng: &mut RngState) -> Tensor {
        Tensor::uniform(dims, rng, -1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_branches_leave_residual() {
        let mut rng = RngState::new(1);
        let p = CfeParams::seeded(4, 6, 2, Activation::Relu, 0.5, false, &mut rng)
            .unwrap()
            .with_zeroed_branches(&[0, 1, 2]);
        let x = rand(&[4, 6, 6], &mut rng);
        let y = cfe_forward(&x, &p).unwrap();
        assert!(y.bit_eq(&conv2d(&x, &p.residual).unwrap()));
    }

    #[test]
    fn identity_residual_passes_input() {
        let mut rng = RngState::new(2);
        let mut p = CfeParams::seeded(6, 6, 2, Activation::Relu, 0.5, true, &mut rng)
            .unwrap()
            .with_zeroed_branches(&[0, 1, 2]);
        p.residual = Conv2dParams::same(
            Tensor::identity(6).unwrap().reshape(&[6, 6, 1, 1]).unwrap(),
            Tensor::zeros(&[6]).unwrap(),
            1,
        )
        .unwrap();
        let x = rand(&[6, 5, 7], &mut rng);
        assert!(cfe_forward(&x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn matches_composed_reference() {
        let mut rng = RngState::new(3);
        for act in [Activation::Relu, Activation::None] {
            let p = CfeParams::seeded(6, 6, 2, act, 0.5, false, &mut rng).unwrap();
            let x = rand(&[6, 8, 8], &mut rng);
            let y = cfe_forward(&x, &p).unwrap();
            assert_eq!(y.dims(), &[6, 8, 8]);
            assert!(y.max_abs_diff(&cfe_reference(&x, &p).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn zero_offsets_reduce_branch_three_to_standard() {
        let mut rng = RngState::new(4);
        let p = CfeParams::seeded(3, 6, 2, Activation::Relu, 0.5, true, &mut rng).unwrap();
        let mut standard = p.clone();
        if let BranchTail::Deformable(d) = &p.branches[2].tail {
            standard.branches[2].tail = BranchTail::Dilated(d.base.clone());
        }
        let x = rand(&[3, 6, 6], &mut rng);
        let a = cfe_forward(&x, &p).unwrap();
        let b = cfe_forward(&x, &standard).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn width_must_split_three_ways() {
        let mut rng = RngState::new(5);
        assert!(matches!(
            CfeParams::seeded(4, 8, 2, Activation::Relu, 0.1, true, &mut rng),
            Err(Error::Config(_))
        ));
        let p = CfeParams::seeded(4, 6, 2, Activation::Relu, 0.1, true, &mut rng).unwrap();
        assert!(matches!(cfe_forward(&rand(&[5, 4, 4], &mut rng), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn receptive_probe_radii() {
        let mut rng = RngState::new(6);
        let p = CfeParams::seeded(2, 6, 2, Activation::Relu, 0.5, true, &mut rng).unwrap();
        let no_residual = |mut q: CfeParams| {
            q.residual.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            q
        };
        let b2 = no_residual(p.with_zeroed_branches(&[0, 2]));
        assert_eq!(cfe_receptive_probe(&b2).unwrap(), 4);
        let b1 = no_residual(p.with_zeroed_branches(&[1, 2]));
        assert_eq!(cfe_receptive_probe(&b1).unwrap(), 3);
        let b3 = no_residual(p.with_zeroed_branches(&[0, 1]));
        assert_eq!(cfe_receptive_probe(&b3).unwrap(), 2);
        assert_eq!(cfe_receptive_probe(&p).unwrap(), 4);

        let single = Conv2dParams::seeded(1, 1, (3, 3), 1, 1.0, &mut rng).unwrap();
        let r = impulse_support_radius(1, 9, |x| {
            let abs = Conv2dParams::same(single.weight.map(f64::abs), Tensor::zeros(&[1]).unwrap(), 1)?;
            conv2d(x, &abs)
        })
        .unwrap();
        assert_eq!(r, 1);
    }
}
