//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op of one forward pass as a node holding its value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints. The
//! tape is rebuilt for every forward pass; nothing is cached between passes.
//!
//! Nodes created with [`Tape::constant`] never receive gradients and prune the
//! backward walk, which is how a generator's output is detached before it is
//! fed to the discriminator update.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("leaky_relu slope {slope} outside (0, 1)")));
        }
        Ok(Activation::LeakyRelu(slope))
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Parses `relu`, `tanh`, `sigmoid` and `leaky_relu:<slope>`.
impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => match s.strip_prefix("leaky_relu:") {
                Some(slope) => {
                    let slope: f64 = slope
                        .parse()
                        .map_err(|_| Error::Config(format!("bad leaky_relu slope in {s:?}")))?;
                    Activation::leaky_relu(slope)
                }
                None => Err(Error::Config(format!("unknown activation {s:?}"))),
            },
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Mse,
    /// Binary cross-entropy on logits; the second operand holds 0/1 targets.
    BceWithLogits,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    Upsample {
        input: NodeId,
        factor: usize,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
    Mean {
        input: NodeId,
    },
    MeanPerSample {
        input: NodeId,
    },
    Loss {
        kind: LossKind,
        a: NodeId,
        b: NodeId,
    },
    HighBands {
        input: NodeId,
        levels: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (a trainable parameter or probed input).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let value = conv::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId> {
        if let Activation::LeakyRelu(s) = kind {
            Activation::leaky_relu(s)?;
        }
        let value = self.value(input).map(|x| kind.apply(x));
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Activation { input, kind }, rg))
    }

    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let value = conv::upsample_nearest(self.value(input), factor)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample { input, factor }, rg))
    }

    /// Concatenate `[B,Ca,H,W]` and `[B,Cb,H,W]` into `[B,Ca+Cb,H,W]`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim(
                "concat_channels",
                format!("cannot concatenate {sa:?} and {sb:?} along channels"),
            ));
        }
        let batch = sa[0];
        let (la, lb) = (va.numel() / batch, vb.numel() / batch);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for i in 0..batch {
            data.extend_from_slice(&va.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&vb.data()[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(vec![batch, sa[1] + sb[1], sa[2], sa[3]], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).map(|x| x * factor);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).mean());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Mean { input }, rg)
    }

    /// Reduce `[B, ...]` to `[B]` by averaging each sample.
    pub fn mean_per_sample(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let batch = v.shape()[0];
        let inner = v.numel() / batch;
        let data = (0..batch)
            .map(|i| v.data()[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::new(vec![batch], data).expect("batch axis is non-empty");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::MeanPerSample { input }, rg)
    }

    /// Mean-reduced scalar loss between `a` and `b`.
    pub fn loss(&mut self, kind: LossKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "loss")?;
        let n = va.numel() as f64;
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                LossKind::L1 => (x - y).abs(),
                LossKind::Mse => (x - y) * (x - y),
                LossKind::BceWithLogits => softplus(x) - x * y,
            })
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), Op::Loss { kind, a, b }, rg))
    }

    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.loss(LossKind::L1, a, b)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.loss(LossKind::Mse, a, b)
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.loss(LossKind::BceWithLogits, logits, targets)
    }

    /// Flattened Haar detail coefficients of every cascade level, `[B, K]`.
    pub fn wavelet_high_bands(&mut self, input: NodeId, levels: usize) -> Result<NodeId> {
        let value = wavelet::high_band_coeffs(self.value(input), levels)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::HighBands { input, levels }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, rest) = adjoints.split_at_mut(i);
            let Some(grad) = rest[0].as_ref() else {
                continue;
            };
            let mut acc = |id: NodeId, contribution: Tensor| {
                if self.nodes[id.0].requires_grad {
                    match &mut lower[id.0] {
                        Some(existing) => existing
                            .axpy(1.0, &contribution)
                            .expect("adjoint shapes match node values"),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            };
            match node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let need_params = self.nodes[kernel.0].requires_grad || self.nodes[bias.0].requires_grad;
                    let g = conv::conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        grad,
                        stride,
                        pad,
                        need_input,
                        need_params,
                    )?;
                    if let Some(gi) = g.input {
                        acc(input, gi);
                    }
                    if let (Some(gk), Some(gb)) = (g.kernel, g.bias) {
                        acc(kernel, gk);
                        acc(bias, gb);
                    }
                }
                Op::Activation { input, kind } => {
                    let x = self.value(input);
                    let mut d = grad.clone();
                    for ((dv, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(node.value.data()) {
                        *dv *= kind.derivative(xv, yv);
                    }
                    acc(input, d);
                }
                Op::Upsample { input, factor } => {
                    acc(input, conv::upsample_nearest_backward(grad, factor)?);
                }
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                    let batch = sa[0];
                    let la: usize = sa[1..].iter().product();
                    let lb: usize = sb[1..].iter().product();
                    let mut da = Vec::with_capacity(batch * la);
                    let mut db = Vec::with_capacity(batch * lb);
                    for s in 0..batch {
                        let chunk = &grad.data()[s * (la + lb)..(s + 1) * (la + lb)];
                        da.extend_from_slice(&chunk[..la]);
                        db.extend_from_slice(&chunk[la..]);
                    }
                    acc(a, Tensor::new(sa, da)?);
                    acc(b, Tensor::new(sb, db)?);
                }
                Op::Add { a, b } => {
                    acc(a, grad.clone());
                    acc(b, grad.clone());
                }
                Op::Sub { a, b } => {
                    acc(a, grad.clone());
                    acc(b, grad.map(|g| -g));
                }
                Op::Scale { input, factor } => acc(input, grad.map(|g| g * factor)),
                Op::Sum { input } => {
                    acc(input, Tensor::full(self.value(input).shape(), grad.item()));
                }
                Op::Mean { input } => {
                    let v = self.value(input);
                    acc(input, Tensor::full(v.shape(), grad.item() / v.numel() as f64));
                }
                Op::MeanPerSample { input } => {
                    let v = self.value(input);
                    let batch = v.shape()[0];
                    let inner = v.numel() / batch;
                    let mut d = Vec::with_capacity(v.numel());
                    for &g in grad.data() {
                        d.extend(std::iter::repeat_n(g / inner as f64, inner));
                    }
                    acc(input, Tensor::new(v.shape().to_vec(), d)?);
                }
                Op::Loss { kind, a, b } => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let scale = grad.item() / va.numel() as f64;
                    let da = va.zip_map(vb, |x, y| {
                        scale
                            * match kind {
                                LossKind::L1 => signum0(x - y),
                                LossKind::Mse => 2.0 * (x - y),
                                LossKind::BceWithLogits => sigmoid(x) - y,
                            }
                    })?;
                    if self.nodes[b.0].requires_grad {
                        let db = va.zip_map(vb, |x, y| {
                            scale
                                * match kind {
                                    LossKind::L1 => -signum0(x - y),
                                    LossKind::Mse => -2.0 * (x - y),
                                    LossKind::BceWithLogits => -x,
                                }
                        })?;
                        acc(b, db);
                    }
                    acc(a, da);
                }
                Op::HighBands { input, levels } => {
                    let shape = self.value(input).shape().to_vec();
                    acc(input, wavelet::high_band_coeffs_adjoint(grad, &shape, levels)?);
                }
            }
        }
        Ok(Gradients { adjoints })
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adjoints produced by one backward sweep.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The adjoint of `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients aligned with a registered group; unreachable parameters get zeros.
    pub fn for_group(&self, vars: &GroupVars, group: &ParamGroup) -> Vec<Tensor> {
        vars.ids
            .iter()
            .zip(&group.params)
            .map(|(&id, (_, p))| self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// A named, ordered set of parameter tensors (one network of a bundle).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<(String, Tensor)>,
}

/// Node ids of a group's parameters on one tape, in parameter order.
#[derive(Clone, Debug)]
pub struct GroupVars {
    pub ids: Vec<NodeId>,
}

impl GroupVars {
    pub fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<(String, Tensor)>) -> Result<Self> {
        let name = name.into();
        for (i, (n, _)) in params.iter().enumerate() {
            if params[..i].iter().any(|(m, _)| m == n) {
                return Err(Error::Config(format!("duplicate parameter {n:?} in group {name:?}")));
            }
        }
        Ok(ParamGroup { name, params })
    }

    /// Put the parameters on a tape, as variables when `trainable` and as constants otherwise.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GroupVars {
        let ids = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        GroupVars { ids }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::dim(
                "set_tensors",
                format!(
                    "group {} has {} params, got {}",
                    self.name,
                    self.params.len(),
                    values.len()
                ),
            ));
        }
        for ((name, p), v) in self.params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(Error::dim(
                    "set_tensors",
                    format!("{name}: shape {:?} vs {:?}", p.shape(), v.shape()),
                ));
            }
            *p = v.clone();
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bit_eq(&self, other: &ParamGroup) -> bool {
        self.name == other.name
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Back-propagate `loss` and collect per-group gradients keyed by group name.
pub fn backward_groups(
    tape: &Tape,
    loss: NodeId,
    groups: &[(&ParamGroup, &GroupVars)],
) -> Result<BTreeMap<String, Vec<Tensor>>> {
    let grads = tape.backward(loss)?;
    Ok(groups
        .iter()
        .map(|(g, v)| (g.name.clone(), grads.for_group(v, g)))
        .collect())
}

/// Which coordinates a finite-difference check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum CoordSample {
    All,
    /// Up to `count` coordinates drawn without replacement.
    Random {
        count: usize,
        seed: u64,
    },
}

/// Compare analytic gradients of a group against central finite differences.
///
/// Returns the largest `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over the
/// sampled coordinates. The group is restored to its original values.
pub fn finite_diff_check(
    group: &mut ParamGroup,
    analytic: &[Tensor],
    mut loss: impl FnMut(&ParamGroup) -> Result<f64>,
    step: f64,
    sample: CoordSample,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step {step} must be positive")));
    }
    if analytic.len() != group.params.len() {
        return Err(Error::dim("finite_diff_check", "gradient list does not match group"));
    }
    let sizes: Vec<usize> = group.params.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = match sample {
        CoordSample::All => (0..total).collect(),
        CoordSample::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, total, count.min(total)).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let mut worst: f64 = 0.0;
    for flat in coords {
        let (mut t, mut off) = (0, flat);
        while off >= sizes[t] {
            off -= sizes[t];
            t += 1;
        }
        let original = group.params[t].1.data()[off];
        group.params[t].1.data_mut()[off] = original + step;
        let plus = loss(group);
        group.params[t].1.data_mut()[off] = original - step;
        let minus = loss(group);
        group.params[t].1.data_mut()[off] = original;
        let fd = (plus? - minus?) / (2.0 * step);
        let ad = analytic[t].data()[off];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
