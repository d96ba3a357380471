//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass in
//! topological order. [`Tape::backward`] walks the records in reverse and
//! accumulates adjoints into a [`GradientSet`], so gradients are available
//! for every recorded node: the input image, the parameters, and any
//! intermediate value such as the encoder's feature vector.
//!
//! The primitive set is deliberately small: 2×2 convolution with
//! bottom/right zero padding, non-overlapping 2×2 max pooling, point-wise
//! activations, affine maps, flattening, and the masked blend used to
//! freeze a subset of features to constants.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the forward input `x` and output `y`.
    /// The relu kink takes the `x > 0` branch.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
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

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        /// Flat input index selected for each output element.
        argmax: Vec<usize>,
    },
    Pointwise {
        input: NodeId,
        activation: Activation,
    },
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Flatten {
        input: NodeId,
    },
    /// `x * mask + (1 - mask) * constants`, element-wise.
    Blend { input: NodeId, mask: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node of a tape, indexed by [`NodeId`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = conv2d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
        ))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn pointwise(&mut self, input: NodeId, activation: Activation) -> NodeId {
        let out = self.value(input).map(|x| activation.apply(x));
        self.push(out, Op::Pointwise { input, activation })
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = affine_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Affine {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input);
        let out = Tensor::vector(value.data().to_vec());
        self.push(out, Op::Flatten { input })
    }

    /// Element-wise `x * mask + (1 - mask) * constants`.
    pub fn blend(&mut self, input: NodeId, mask: &[f64], constants: &[f64]) -> Result<NodeId> {
        let x = self.value(input);
        if mask.len() != x.len() || constants.len() != x.len() {
            return Err(Error::Shape(format!(
                "blend over {} values with mask of {} and constants of {}",
                x.len(),
                mask.len(),
                constants.len()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(mask.iter().zip(constants))
            .map(|(&v, (&b, &y))| v * b + (1.0 - b) * y)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Blend {
                input,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Gradients of a single-element node, seeded with 1.
    pub fn backward(&self, output: NodeId) -> Result<GradientSet> {
        let value = self.value(output);
        if value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward seed node has shape {:?}, expected a scalar",
                value.shape()
            )));
        }
        self.backward_with(output, Tensor::full(value.shape(), 1.0), &[])
    }

    /// Reverse pass starting at `node` with an explicit seed adjoint.
    pub fn backward_from(&self, node: NodeId, seed: Tensor) -> Result<GradientSet> {
        self.backward_with(node, seed, &[])
    }

    /// Reverse pass where the adjoint of each listed node is multiplied
    /// element-wise by its mask before it propagates further.
    ///
    /// The stored gradient of a masked node is its unmasked adjoint.
    pub fn backward_with(
        &self,
        node: NodeId,
        seed: Tensor,
        adjoint_masks: &[(NodeId, &[f64])],
    ) -> Result<GradientSet> {
        if node.0 >= self.nodes.len() {
            return Err(Error::Index {
                index: node.0,
                len: self.nodes.len(),
            });
        }
        if seed.shape() != self.value(node).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match node shape {:?}",
                seed.shape(),
                self.value(node).shape()
            )));
        }
        for (id, mask) in adjoint_masks {
            if mask.len() != self.value(*id).len() {
                return Err(Error::Shape(format!(
                    "adjoint mask of length {} for node of {} values",
                    mask.len(),
                    self.value(*id).len()
                )));
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[node.0] = Some(seed);

        for idx in (0..=node.0).rev() {
            let Some(g) = adj[idx].as_ref() else {
                continue;
            };
            let mut g = g.clone();
            for (id, mask) in adjoint_masks {
                if id.0 == idx {
                    for (v, &b) in g.data_mut().iter_mut().zip(mask.iter()) {
                        *v *= b;
                    }
                }
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let x = self.value(*input);
                    let k = self.value(*kernel);
                    let gx = conv2d_backward_input(&g, k, x.shape());
                    let gk = conv2d_backward_kernel(&g, x, k.shape());
                    let gb = conv2d_backward_bias(&g);
                    accumulate(&mut adj, *input, gx);
                    accumulate(&mut adj, *kernel, gk);
                    accumulate(&mut adj, *bias, gb);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*input).shape());
                    let d = gx.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g.data()[o];
                    }
                    accumulate(&mut adj, *input, gx);
                }
                Op::Pointwise { input, activation } => {
                    let x = self.value(*input);
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gv, (&xv, &yv))| gv * activation.derivative(xv, yv))
                        .collect();
                    let gx = Tensor::new(x.shape().to_vec(), data)?;
                    accumulate(&mut adj, *input, gx);
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    let mut gx = vec![0.0; n];
                    let mut gw = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = &w.data()[i * n..(i + 1) * n];
                        for j in 0..n {
                            gx[j] += row[j] * gi;
                            gw[i * n + j] = gi * x.data()[j];
                        }
                    }
                    accumulate(&mut adj, *input, Tensor::new(x.shape().to_vec(), gx)?);
                    accumulate(&mut adj, *weight, Tensor::new(vec![m, n], gw)?);
                    accumulate(&mut adj, *bias, g.clone());
                }
                Op::Flatten { input } => {
                    let gx = g.reshape(self.value(*input).shape())?;
                    accumulate(&mut adj, *input, gx);
                }
                Op::Blend { input, mask, .. } => {
                    let data = g.data().iter().zip(mask).map(|(gv, b)| gv * b).collect();
                    let gx = Tensor::new(g.shape().to_vec(), data)?;
                    accumulate(&mut adj, *input, gx);
                }
            }
        }

        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape())))
            .collect();
        Ok(GradientSet { grads })
    }

    /// Discrete branch choices made during the forward pass: one entry per
    /// relu element (input sign) and per max-pool window (argmax). Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Pointwise {
                    input,
                    activation: Activation::Relu,
                } => sig.extend(
                    self.value(*input)
                        .data()
                        .iter()
                        .map(|&x| usize::from(x >= 0.0)),
                ),
                Op::MaxPool2 { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "{what} must be [C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

/// 2×2 cross-correlation with one row/column of zero padding at the bottom
/// and right, so the output keeps the input's spatial extent.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = dims3(input, "conv2d input")?;
    let (cout, kin, kh, kw) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d kernel must be [C_out, C_in, 2, 2], got {:?}",
                kernel.shape()
            )))
        }
    };
    if (kh, kw) != (2, 2) {
        return Err(Error::Shape(format!("kernel spatial size {kh}x{kw}, expected 2x2")));
    }
    if kin != cin {
        return Err(Error::Shape(format!(
            "kernel expects {kin} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        let b = bias.data()[co];
        for r in 0..h {
            for c in 0..w {
                let mut acc = b;
                for ci in 0..cin {
                    let kb = ((co * cin) + ci) * 4;
                    let xb = ci * h * w;
                    for dr in 0..2 {
                        let rr = r + dr;
                        if rr >= h {
                            continue;
                        }
                        for dc in 0..2 {
                            let cc = c + dc;
                            if cc >= w {
                                continue;
                            }
                            acc += k[kb + dr * 2 + dc] * x[xb + rr * w + cc];
                        }
                    }
                }
                out[(co * h + r) * w + c] = acc;
            }
        }
    }
    Tensor::new(vec![cout, h, w], out)
}

/// Adjoint of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_input(grad_out: &Tensor, kernel: &Tensor, input_shape: &[usize]) -> Tensor {
    let (cin, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let cout = kernel.shape()[0];
    let g = grad_out.data();
    let k = kernel.data();
    let mut gx = vec![0.0; cin * h * w];
    for co in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let gv = g[(co * h + r) * w + c];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    let kb = ((co * cin) + ci) * 4;
                    let xb = ci * h * w;
                    for dr in 0..2 {
                        let rr = r + dr;
                        if rr >= h {
                            continue;
                        }
                        for dc in 0..2 {
                            let cc = c + dc;
                            if cc >= w {
                                continue;
                            }
                            gx[xb + rr * w + cc] += k[kb + dr * 2 + dc] * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("input shape")
}

fn conv2d_backward_kernel(grad_out: &Tensor, input: &Tensor, kernel_shape: &[usize]) -> Tensor {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = kernel_shape[0];
    let g = grad_out.data();
    let x = input.data();
    let mut gk = vec![0.0; cout * cin * 4];
    for co in 0..cout {
        for ci in 0..cin {
            let kb = ((co * cin) + ci) * 4;
            let xb = ci * h * w;
            for dr in 0..2 {
                for dc in 0..2 {
                    let mut acc = 0.0;
                    for r in 0..h.saturating_sub(dr) {
                        for c in 0..w.saturating_sub(dc) {
                            acc += g[(co * h + r) * w + c] * x[xb + (r + dr) * w + c + dc];
                        }
                    }
                    gk[kb + dr * 2 + dc] = acc;
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), gk).expect("kernel shape")
}

fn conv2d_backward_bias(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    let plane = s[1] * s[2];
    Tensor::vector(
        grad_out
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum())
            .collect(),
    )
}

/// Non-overlapping 2×2 max pooling. Ties resolve to the first position in
/// row-major window order.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (ch, h, w) = dims3(input, "maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut argmax = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for r in 0..oh {
            for q in 0..ow {
                let mut best = (c * h + 2 * r) * w + 2 * q;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (c * h + 2 * r + dr) * w + 2 * q + dc;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![ch, oh, ow], out)?, argmax))
}

pub fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = match *weight.shape() {
        [m, n] => (m, n),
        _ => {
            return Err(Error::Shape(format!(
                "affine weight must be [m, n], got {:?}",
                weight.shape()
            )))
        }
    };
    if input.shape() != [n] {
        return Err(Error::Shape(format!(
            "affine input shape {:?}, expected [{n}]",
            input.shape()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::Shape(format!(
            "affine bias shape {:?}, expected [{m}]",
            bias.shape()
        )));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks(n)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect();
    Ok(Tensor::vector(out))
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for
/// every coordinate of `x`.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}
