use super::ops::{self, Activation, ConvGeom, Padding, ReduceKind, ReducePlan};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    ReduceMax {
        input: Var,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    ReduceMean {
        input: Var,
        out_index: Vec<usize>,
        group: usize,
    },
    L2Normalize {
        input: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    PairwiseDot {
        a: Var,
        b: Var,
        depth: usize,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    BinaryCrossEntropy {
        pred: Var,
        target: Vec<f64>,
        clamp: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Dense {
                input,
                weights,
                bias,
            } => vec![*input, *weights, *bias],
            Op::Activation { input, .. }
            | Op::ReduceMax { input, .. }
            | Op::ReduceMean { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::Reshape { input }
            | Op::Scale { input, .. } => vec![*input],
            Op::BinaryCrossEntropy { pred, .. } => vec![*pred],
            Op::PairwiseDot { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::Concat { inputs } => inputs.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the node list
/// is already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, for the leaves that asked for them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Smallest distance of any ReLU input from zero, or of any max-reduction
    /// candidate from its group's maximum. A perturbation that moves every value by
    /// less than this stays on the same smooth piece of the recorded function.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu,
                } => {
                    for &x in self.value(*input).data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::ReduceMax {
                    input,
                    axes,
                    argmax,
                } => {
                    let x = self.value(*input);
                    let plan = ReducePlan::new(x.shape(), axes)
                        .expect("axes were valid when the op was recorded");
                    for (e, (&v, &o)) in x.data().iter().zip(&plan.out_index).enumerate() {
                        if argmax[o] != e {
                            margin = margin.min(node.value.data()[o] - v);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf. It takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients (images, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.set_requires_grad(false);
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push_raw(value, op, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
        stride: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(kernel),
            self.shape(bias),
            padding,
            stride,
        )?;
        let out = ops::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        Ok(self.push(
            vec![geom.oh, geom.ow, geom.cout],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weights), self.shape(bias));
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[0] != xs[0] || ws[1] != bs[0] {
            return Err(Error::invalid(format!(
                "dense expects N input, NxM weights, M bias; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let out = ops::dense_forward(
            self.value(input).data(),
            self.value(weights).data(),
            self.value(bias).data(),
        );
        let m = out.len();
        Ok(self.push(
            vec![m],
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = match kind {
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.data().iter().map(|&v| ops::sigmoid(v)).collect(),
        };
        let shape = x.shape().to_vec();
        self.push(shape, out, Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Removes `axes` by max or mean. Max routes its gradient to the first maximal
    /// element of each group in row-major order.
    pub fn reduce(&mut self, input: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let plan = ReducePlan::new(self.shape(input), axes)?;
        let x = self.value(input).data();
        match kind {
            ReduceKind::Max => {
                let (out, argmax) = ops::reduce_max(x, &plan);
                Ok(self.push(
                    plan.out_shape,
                    out,
                    Op::ReduceMax {
                        input,
                        axes: axes.to_vec(),
                        argmax,
                    },
                ))
            }
            ReduceKind::Mean => {
                let out = ops::reduce_mean(x, &plan);
                let ReducePlan {
                    out_shape,
                    out_index,
                    group,
                } = plan;
                Ok(self.push(
                    out_shape,
                    out,
                    Op::ReduceMean {
                        input,
                        out_index,
                        group,
                    },
                ))
            }
        }
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(input, &axes, ReduceKind::Mean)
            .expect("all axes are valid")
    }

    /// Divides each fiber along the last axis by `max(norm, eps)`.
    pub fn l2_normalize(&mut self, input: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("l2_normalize epsilon must be positive"));
        }
        let x = self.value(input);
        let c = *x
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("l2_normalize needs rank >= 1"))?;
        let mut out = Vec::with_capacity(x.len());
        let mut norms = Vec::with_capacity(x.len() / c);
        for fiber in x.data().chunks_exact(c) {
            let n = fiber.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(eps);
            norms.push(n);
            out.extend(fiber.iter().map(|v| v / d));
        }
        let shape = x.shape().to_vec();
        Ok(self.push(shape, out, Op::L2Normalize { input, eps, norms }))
    }

    /// Dot products of every last-axis fiber of `a` with every last-axis fiber of `b`.
    /// Output shape is `a.shape[..-1] ++ b.shape[..-1]`.
    pub fn pairwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Some(&ca), Some(&cb)) = (sa.last(), sb.last()) else {
            return Err(Error::invalid("pairwise_dot needs rank >= 1 operands"));
        };
        if ca != cb {
            return Err(Error::invalid(format!(
                "pairwise_dot depth mismatch: {ca} vs {cb}"
            )));
        }
        let mut shape: Vec<usize> = sa[..sa.len() - 1].to_vec();
        shape.extend_from_slice(&sb[..sb.len() - 1]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity((xa.len() / ca) * (xb.len() / ca));
        for fa in xa.chunks_exact(ca) {
            for fb in xb.chunks_exact(ca) {
                out.push(fa.iter().zip(fb).map(|(p, q)| p * q).sum());
            }
        }
        Ok(self.push(shape, out, Op::PairwiseDot { a, b, depth: ca }))
    }

    /// Concatenates along the last axis. Rank-0 inputs count as length-1 vectors.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one input"))?;
        let lead = |s: &[usize]| -> Vec<usize> {
            if s.is_empty() {
                Vec::new()
            } else {
                s[..s.len() - 1].to_vec()
            }
        };
        let base = lead(self.shape(*first));
        let rows: usize = base.iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if lead(s) != base {
                return Err(Error::invalid(format!(
                    "concat leading extents differ: {:?} vs {base:?}",
                    s
                )));
            }
            widths.push(s.last().copied().unwrap_or(1));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&v, &w) in inputs.iter().zip(&widths) {
            let data = self.value(v).data();
            for r in 0..rows {
                out[r * total + col..][..w].copy_from_slice(&data[r * w..][..w]);
            }
            col += w;
        }
        let mut shape = base;
        shape.push(total);
        let inputs = inputs.iter().copied().zip(widths).collect();
        Ok(self.push(shape, out, Op::Concat { inputs }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let n: usize = shape.iter().product();
        if n != x.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        let data = x.data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self
            .value(input)
            .data()
            .iter()
            .map(|v| v * factor)
            .collect();
        let shape = self.shape(input).to_vec();
        self.push(shape, out, Op::Scale { input, factor })
    }

    /// Mean of a list of same-shaped values.
    pub fn mean_of(&mut self, values: &[Var]) -> Result<Var> {
        let (&first, rest) = values
            .split_first()
            .ok_or_else(|| Error::invalid("mean_of needs at least one value"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / values.len() as f64))
    }

    /// Mean binary cross-entropy with predictions clamped to `[clamp, 1 - clamp]`.
    /// The clamp passes no gradient where it is active.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: &Tensor, clamp: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::invalid(format!(
                "bce shape mismatch: prediction {:?}, target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let loss: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let q = p.clamp(clamp, 1.0 - clamp);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::BinaryCrossEntropy {
                pred,
                target: target.data().to_vec(),
                clamp,
            },
        ))
    }

    /// Reverse pass from a single-element `loss`. Gradients are returned for every
    /// leaf registered with `requires_grad`; the tape itself is left untouched, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with_seed(loss, 1.0)
    }

    fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, d: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = [self.wants(*input), self.wants(*kernel), self.wants(*bias)];
                let r = ops::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    need,
                );
                if let Some(d) = r.dx {
                    acc(*input, d);
                }
                if let Some(d) = r.dk {
                    acc(*kernel, d);
                }
                if let Some(d) = r.db {
                    acc(*bias, d);
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weights).data();
                let m = g.len();
                if self.wants(*input) {
                    let dx = w
                        .chunks_exact(m)
                        .map(|row| row.iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*input, dx);
                }
                if self.wants(*weights) {
                    let mut dw = Vec::with_capacity(w.len());
                    for &xv in x {
                        dw.extend(g.iter().map(|&gv| xv * gv));
                    }
                    acc(*weights, dw);
                }
                if self.wants(*bias) {
                    acc(*bias, g.to_vec());
                }
            }
            Op::Activation { input, kind } => {
                let d = match kind {
                    Activation::Relu => self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect(),
                };
                acc(*input, d);
            }
            Op::ReduceMax { input, argmax, .. } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    d[a] += gv;
                }
                acc(*input, d);
            }
            Op::ReduceMean {
                input,
                out_index,
                group,
            } => {
                let n = *group as f64;
                let d = out_index.iter().map(|&o| g[o] / n).collect();
                acc(*input, d);
            }
            Op::L2Normalize { input, eps, norms } => {
                let y = node.value.data();
                let c = y.len() / norms.len();
                let mut d = Vec::with_capacity(y.len());
                for ((yf, gf), &n) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(norms) {
                    if n >= *eps {
                        let dot: f64 = yf.iter().zip(gf).map(|(a, b)| a * b).sum();
                        d.extend(yf.iter().zip(gf).map(|(&yv, &gv)| (gv - yv * dot) / n));
                    } else {
                        d.extend(gf.iter().map(|&gv| gv / eps));
                    }
                }
                acc(*input, d);
            }
            Op::PairwiseDot { a, b, depth } => {
                let c = *depth;
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let nb = xb.len() / c;
                if self.wants(*a) {
                    let mut da = vec![0.0; xa.len()];
                    for (r, dar) in da.chunks_exact_mut(c).enumerate() {
                        let grow = &g[r * nb..][..nb];
                        for (&gv, fb) in grow.iter().zip(xb.chunks_exact(c)) {
                            for (d, &bv) in dar.iter_mut().zip(fb) {
                                *d += gv * bv;
                            }
                        }
                    }
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; xb.len()];
                    for (r, fa) in xa.chunks_exact(c).enumerate() {
                        let grow = &g[r * nb..][..nb];
                        for (&gv, dbq) in grow.iter().zip(db.chunks_exact_mut(c)) {
                            for (d, &av) in dbq.iter_mut().zip(fa) {
                                *d += gv * av;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Concat { inputs } => {
                let total: usize = inputs.iter().map(|(_, w)| w).sum();
                let rows = g.len() / total;
                let mut col = 0;
                for &(v, w) in inputs {
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + col..][..w]);
                        }
                        acc(v, d);
                    }
                    col += w;
                }
            }
            Op::Reshape { input } => acc(*input, g.to_vec()),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Scale { input, factor } => {
                acc(*input, g.iter().map(|v| v * factor).collect());
            }
            Op::BinaryCrossEntropy {
                pred,
                target,
                clamp,
            } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < *clamp || p > 1.0 - *clamp {
                            0.0
                        } else {
                            g[0] * (-(t / p) + (1.0 - t) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                acc(*pred, d);
            }
        }
    }
}
