//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every method on [`Tape`] evaluates eagerly, stores the result, and records
//! enough to replay the adjoint. Node ids are creation indices, so the node
//! list is already a topological order and [`Tape::backward`] walks it in
//! reverse.

use std::collections::BTreeMap;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::pyramid;
use crate::tensor::{BinaryOp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice { input: NodeId, axis: usize, start: usize },
    MeanAxis(NodeId, usize),
    Relu(NodeId),
    IndexSelect(NodeId, Vec<usize>),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, geometry: ConvGeometry },
    Depthwise { input: NodeId, kernel: NodeId, padding: usize },
    Deformable { input: NodeId, offsets: NodeId, weight: NodeId, bias: NodeId },
    Up2(NodeId),
    Down2(NodeId),
    Fuse { inputs: Vec<NodeId>, weights: NodeId, epsilon: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: Vec<(String, NodeId)>,
    macs: u64,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter leaf; `None` when the output does not
    /// depend on it.
    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name).and_then(|&id| self.get(id))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Running multiply-accumulate tally of every recorded op.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} is not recorded on this tape ({} nodes)",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf registered under `name` so its gradient can be looked up later.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.named.push((name.into(), id));
        id
    }

    pub fn named(&self) -> &[(String, NodeId)] {
        &self.named
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = Tensor::elementwise(op, self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::Scale(a, c)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        let (m, p) = (self.value(a).dims()[0], self.value(a).dims()[1]);
        self.macs += (m * p * v.dims()[1]) as u64;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).softmax_lastdim()?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).permute(axes)?;
        Ok(self.push(v, Op::Permute(a, axes.to_vec())))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&refs, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).slice(axis, start, len)?;
        Ok(self.push(v, Op::Slice { input: a, axis, start }))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).mean_axis(axis)?;
        self.macs += self.value(a).numel() as u64;
        Ok(self.push(v, Op::MeanAxis(a, axis)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).relu();
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn index_select(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).index_select(indices)?;
        Ok(self.push(v, Op::IndexSelect(a, indices.to_vec())))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    ) -> Result<NodeId> {
        for id in [input, weight, bias] {
            self.check(id)?;
        }
        let v = conv::conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geometry)?;
        let wd = self.value(weight).dims();
        self.macs += (v.numel() * wd[1] * wd[2] * wd[3]) as u64;
        Ok(self.push(v, Op::Conv2d { input, weight, bias, geometry }))
    }

    pub fn depthwise_conv2d(&mut self, input: NodeId, kernel: NodeId, padding: usize) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        let v = conv::depthwise_forward(self.value(input), self.value(kernel), padding)?;
        let k = self.value(kernel).dims()[1];
        self.macs += (v.numel() * k * k) as u64;
        Ok(self.push(v, Op::Depthwise { input, kernel, padding }))
    }

    pub fn deformable_conv2d(
        &mut self,
        input: NodeId,
        offsets: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        for id in [input, offsets, weight, bias] {
            self.check(id)?;
        }
        let v = conv::deform_forward(
            self.value(input),
            self.value(offsets),
            self.value(weight),
            self.value(bias),
        )?;
        let wd = self.value(weight).dims();
        self.macs += (v.numel() * wd[1] * wd[2] * wd[3]) as u64;
        Ok(self.push(v, Op::Deformable { input, offsets, weight, bias }))
    }

    pub fn up2(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = pyramid::up2_forward(self.value(a))?;
        Ok(self.push(v, Op::Up2(a)))
    }

    pub fn down2(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = pyramid::down2_forward(self.value(a))?;
        Ok(self.push(v, Op::Down2(a)))
    }

    /// Fast normalized fusion; `weights` is a rank-1 node of raw weights.
    pub fn fuse(&mut self, inputs: &[NodeId], weights: NodeId, epsilon: f64) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        self.check(weights)?;
        let refs: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = pyramid::fuse_forward(&refs, self.value(weights).data(), epsilon)?;
        Ok(self.push(
            v,
            Op::Fuse {
                inputs: inputs.to_vec(),
                weights,
                epsilon,
            },
        ))
    }

    /// Smallest |pre-activation| over every recorded relu.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest distance from any deformable sampling coordinate to the
    /// integer lattice, where bilinear interpolation has its kinks.
    pub fn sampling_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for n in &self.nodes {
            if let Op::Deformable { offsets, weight, .. } = n.op {
                let wd = self.value(weight).dims();
                conv::for_each_deform_sample(self.value(offsets), wd[2], wd[3], |_, _, y, x| {
                    let dy = (y - y.round()).abs();
                    let dx = (x - x.round()).abs();
                    margin = margin.min(dy).min(dx);
                });
            }
        }
        margin
    }

    /// Propagates `seed` (shaped like `output`) back to every node that
    /// `output` depends on. The result is the gradient of `⟨seed, output⟩`.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.dims() != self.value(output).dims() {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.dims(),
                self.value(output).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Binary(op, a, b) => {
                    let (ga, gb) = match op {
                        BinaryOp::Add => (g.clone(), g.clone()),
                        BinaryOp::Sub => (g.clone(), g.scale(-1.0)),
                        BinaryOp::Mul => (g.mul(self.value(*b))?, g.mul(self.value(*a))?),
                    };
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    let gb = self.value(*a).transpose()?.matmul(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Softmax(a) => acc(&mut grads, *a, Tensor::softmax_backward(&node.value, &g)),
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).dims())?;
                    acc(&mut grads, *a, ga);
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    acc(&mut grads, *a, g.permute(&inv)?);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).dims()[*axis];
                        acc(&mut grads, p, g.slice(*axis, start, len)?);
                        start += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let ga = Tensor::unslice(&g, self.value(*input).dims(), *axis, *start);
                    acc(&mut grads, *input, ga);
                }
                Op::MeanAxis(a, axis) => {
                    let src = self.value(*a);
                    let outer: usize = src.dims()[..*axis].iter().product();
                    let n = src.dims()[*axis];
                    let inner: usize = src.dims()[*axis + 1..].iter().product();
                    let mut ga = vec![0.0; src.numel()];
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                ga[(o * n + k) * inner + i] = g.data()[o * inner + i] / n as f64;
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::derived(src.dims().to_vec(), ga, src.dtype()));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor::derived(x.dims().to_vec(), data, x.dtype()));
                }
                Op::IndexSelect(a, indices) => {
                    let src = self.value(*a);
                    let row = src.numel() / src.dims()[0];
                    let mut ga = vec![0.0; src.numel()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..row {
                            ga[i * row + j] += g.data()[k * row + j];
                        }
                    }
                    acc(&mut grads, *a, Tensor::derived(src.dims().to_vec(), ga, src.dtype()));
                }
                Op::Conv2d { input, weight, bias, geometry } => {
                    let (gx, gw, gb) =
                        conv::conv2d_backward(self.value(*input), self.value(*weight), geometry, &g)?;
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *weight, gw);
                    acc(&mut grads, *bias, gb);
                }
                Op::Depthwise { input, kernel, padding } => {
                    let (gx, gk) =
                        conv::depthwise_backward(self.value(*input), self.value(*kernel), *padding, &g)?;
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *kernel, gk);
                }
                Op::Deformable { input, offsets, weight, bias } => {
                    let (gx, go, gw, gb) = conv::deform_backward(
                        self.value(*input),
                        self.value(*offsets),
                        self.value(*weight),
                        &g,
                    )?;
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *offsets, go);
                    acc(&mut grads, *weight, gw);
                    acc(&mut grads, *bias, gb);
                }
                Op::Up2(a) => acc(&mut grads, *a, pyramid::up2_backward(&g)),
                Op::Down2(a) => acc(&mut grads, *a, pyramid::down2_backward(&g)),
                Op::Fuse { inputs, weights, epsilon } => {
                    let refs: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let w = self.value(*weights);
                    let (gins, gw) = pyramid::fuse_backward(&refs, w.data(), *epsilon, &node.value, &g);
                    for (&i, gi) in inputs.iter().zip(gins) {
                        acc(&mut grads, i, gi);
                    }
                    acc(&mut grads, *weights, Tensor::derived(w.dims().to_vec(), gw, w.dtype()));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            named: self.named.iter().cloned().collect(),
        })
    }
}
