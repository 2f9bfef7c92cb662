//! Define-by-run reverse-mode tape.
//!
//! Nodes are appended in creation order, which is a topological order, so
//! `backward` is a single reverse sweep. A node requires a gradient iff one of
//! its inputs does; frozen parameters therefore cut whole subgraphs out of the
//! backward pass.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Parameter,
    Conv2d,
    Relu,
    MaxPool2,
    BilinearResize,
    ConcatChannels,
    Affine,
    SoftmaxXent,
    MseHalf,
    Add,
    GlobalAvgPool,
    ScaleChannels,
}

enum Op {
    Input,
    Parameter,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    BilinearResize {
        x: Var,
    },
    ConcatChannels(Vec<Var>),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    MseHalf {
        pred: Var,
        target: Var,
    },
    Add(Var, Var),
    GlobalAvgPool(Var),
    ScaleChannels {
        x: Var,
        scale: Vec<f32>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Parameter => OpKind::Parameter,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::BilinearResize { .. } => OpKind::BilinearResize,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::Affine { .. } => OpKind::Affine,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::MseHalf { .. } => OpKind::MseHalf,
            Op::Add(..) => OpKind::Add,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Registers a parameter. With `requires_grad == false` it never receives
    /// a gradient.
    pub fn param(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Parameter, value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient, `None` if nothing flowed into this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient, zeros if nothing flowed into this node.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).dims()))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).dims(),
            self.value(w).dims(),
            self.value(b).dims(),
            stride,
            padding,
        )?;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let (out, cols) = if self.nodes[w.0].requires_grad {
            kernels::conv2d_forward_keep(&geom, xv, wv, bv)
        } else {
            (kernels::conv2d_forward(&geom, xv, wv, bv), Vec::new())
        };
        let value = Tensor::new(&geom.out_dims(), out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, geom, cols }, value, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.dims(), kernels::relu_forward(xv.data())).expect("same dims");
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).nchw()?;
        if dims[2] < 2 || dims[3] < 2 {
            return Err(Error::dim(
                "maxpool2",
                "spatial",
                "≥ 2",
                format!("{}×{}", dims[2], dims[3]),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(dims, self.value(x).data());
        let value = Tensor::new(&[dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MaxPool2 { x, argmax }, value, rg))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = resize(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::BilinearResize { x }, value, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<(&[usize], &[f32])> = xs
            .iter()
            .map(|v| (self.value(*v).dims(), self.value(*v).data()))
            .collect();
        let (dims, data) = kernels::concat_channels(&parts)?;
        let value = Tensor::new(&dims, data)?;
        let rg = self.rg(xs);
        Ok(self.push(Op::ConcatChannels(xs.to_vec()), value, rg))
    }

    /// `x[n×f] · wᵀ + b`, `w` stored `o×f`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f, o) = self.affine_dims(x, w, b)?;
        let y = kernels::affine_forward(
            n,
            f,
            o,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(&[n, o], y)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Affine { x, w, b }, value, rg))
    }

    fn affine_dims(&self, x: Var, w: Var, b: Var) -> Result<(usize, usize, usize)> {
        let xd = self.value(x).dims();
        let wd = self.value(w).dims();
        let (n, f) = match *xd {
            [n, f] => (n, f),
            _ => return Err(Error::dim("affine", "input rank", 2, xd.len())),
        };
        let (o, wf) = match *wd {
            [o, wf] => (o, wf),
            _ => return Err(Error::dim("affine", "weight rank", 2, wd.len())),
        };
        if wf != f {
            return Err(Error::dim("affine", "features", f, wf));
        }
        if self.value(b).dims() != [o] {
            return Err(Error::dim(
                "affine",
                "bias",
                format!("[{o}]"),
                format!("{:?}", self.value(b).dims()),
            ));
        }
        Ok((n, f, o))
    }

    /// Mean softmax cross-entropy of `logits[n×c]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match *self.value(logits).dims() {
            [n, c] => (n, c),
            ref d => return Err(Error::dim("softmax_xent", "logits rank", 2, d.len())),
        };
        if labels.len() != n {
            return Err(Error::dim("softmax_xent", "labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::dim("softmax_xent", "label", format!("< {c}"), bad));
        }
        let data = self.value(logits).data();
        let loss = kernels::softmax_xent_forward(n, c, data, labels);
        let probs = kernels::softmax(n, c, data);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn mse_half(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.dims() != t.dims() {
            return Err(Error::dim(
                "mse_half",
                "shape",
                format!("{:?}", p.dims()),
                format!("{:?}", t.dims()),
            ));
        }
        let loss = kernels::mse_half_forward(p.data(), t.data());
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Op::MseHalf { pred, target }, Tensor::scalar(loss), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::dim(
                "add",
                "shape",
                format!("{:?}", av.dims()),
                format!("{:?}", bv.dims()),
            ));
        }
        let value = Tensor::new(av.dims(), kernels::add_forward(av.data(), bv.data()))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).nchw()?;
        let value = Tensor::new(
            &[dims[0], dims[1]],
            kernels::global_avg_pool_forward(dims, self.value(x).data()),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), value, rg))
    }

    /// Multiplies channel `c` of an NCHW var by the constant `scale[c]`.
    pub fn scale_channels(&mut self, x: Var, scale: &[f32]) -> Result<Var> {
        let dims = self.value(x).nchw()?;
        if scale.len() != dims[1] {
            return Err(Error::dim("scale_channels", "channel", dims[1], scale.len()));
        }
        let value = Tensor::new(
            self.value(x).dims(),
            kernels::scale_channels(dims, self.value(x).data(), scale),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::ScaleChannels {
                x,
                scale: scale.to_vec(),
            },
            value,
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => node.grad = Some(Tensor::new(node.value.dims(), g).expect("gradient dims match value")),
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let needs = |g: &Graph, v: &Var| g.nodes[v.0].requires_grad;
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Input);
            match &op {
                Op::Input | Op::Parameter => {}
                Op::Conv2d { x, w, b, geom, cols } => {
                    let wants = kernels::ConvWants {
                        input: needs(self, x),
                        weight: needs(self, w),
                        bias: needs(self, b),
                    };
                    let cols = (!cols.is_empty()).then_some(&cols[..]);
                    let grads = kernels::conv2d_backward(
                        geom,
                        self.value(*x).data(),
                        cols,
                        self.value(*w).data(),
                        dy.data(),
                        wants,
                    );
                    if let Some(g) = grads.input {
                        self.accumulate(*x, g);
                    }
                    if let Some(g) = grads.weight {
                        self.accumulate(*w, g);
                    }
                    if let Some(g) = grads.bias {
                        self.accumulate(*b, g);
                    }
                }
                Op::Relu(x) => {
                    let g = kernels::relu_backward(self.value(*x).data(), dy.data());
                    self.accumulate(*x, g);
                }
                Op::MaxPool2 { x, argmax } => {
                    let g = kernels::maxpool2_backward(self.value(*x).len(), argmax, dy.data());
                    self.accumulate(*x, g);
                }
                Op::BilinearResize { x } => {
                    let dims = self.value(*x).nchw()?;
                    let [_, _, oh, ow] = dy.nchw()?;
                    let g = kernels::bilinear_backward(dims, oh, ow, dy.data());
                    self.accumulate(*x, g);
                }
                Op::ConcatChannels(xs) => {
                    let channels: Vec<usize> = xs.iter().map(|v| self.value(*v).dims()[1]).collect();
                    let parts = kernels::split_channels(&dy, &channels)?;
                    for (v, g) in xs.iter().zip(parts) {
                        if needs(self, v) {
                            self.accumulate(*v, g.into_data());
                        }
                    }
                }
                Op::Affine { x, w, b } => {
                    let (n, f, o) = self.affine_dims(*x, *w, *b)?;
                    let (dx, dw, db) =
                        kernels::affine_backward(n, f, o, self.value(*x).data(), self.value(*w).data(), dy.data());
                    self.accumulate(*x, dx);
                    self.accumulate(*w, dw);
                    self.accumulate(*b, db);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let [n, c] = [labels.len(), probs.len() / labels.len()];
                    let g = kernels::softmax_xent_backward(n, c, probs, labels, dy.data()[0]);
                    self.accumulate(*logits, g);
                }
                Op::MseHalf { pred, target } => {
                    let up = dy.data()[0];
                    let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                    let g = kernels::mse_half_backward(p, t, up);
                    if needs(self, target) {
                        let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                        self.accumulate(*target, neg);
                    }
                    self.accumulate(*pred, g);
                }
                Op::Add(a, b) => {
                    self.accumulate(*a, dy.data().to_vec());
                    self.accumulate(*b, dy.data().to_vec());
                }
                Op::GlobalAvgPool(x) => {
                    let dims = self.value(*x).nchw()?;
                    let g = kernels::global_avg_pool_backward(dims, dy.data());
                    self.accumulate(*x, g);
                }
                Op::ScaleChannels { x, scale } => {
                    let g = kernels::scale_channels(dy.nchw()?, dy.data(), scale);
                    self.accumulate(*x, g);
                }
            }
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(dy);
        }
        Ok(())
    }
}

/// Bilinear resize of an NCHW tensor outside any graph.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.nchw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(
            "bilinear_resize",
            "output size",
            "≥ 1",
            format!("{out_h}×{out_w}"),
        ));
    }
    Tensor::new(
        &[dims[0], dims[1], out_h, out_w],
        kernels::bilinear_forward(dims, x.data(), out_h, out_w),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_param_mse_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::scalar(2.0), true);
        let zero = g.input(Tensor::scalar(0.0));
        let loss = g.mse_half(p, zero).unwrap();
        assert_eq!(g.value(loss).data(), &[2.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 4, 4], 0.5));
        let w = g.param(Tensor::full(&[2, 1, 3, 3], 0.1), false);
        let b = g.param(Tensor::zeros(&[2]), false);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let w2 = g.param(Tensor::full(&[1, 2, 1, 1], 0.3), true);
        let b2 = g.param(Tensor::zeros(&[1]), true);
        let z = g.conv2d(y, w2, b2, 1, 0).unwrap();
        let t = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let loss = g.mse_half(z, t).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad_or_zeros(w).data().iter().all(|&v| v == 0.0));
        assert!(g.grad(w2).is_some());
        assert!(g.grad(y).is_none(), "frozen subgraph is skipped");
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(&[2], vec![1.0, -3.0]).unwrap(), true);
        let s = g.add(p, p).unwrap();
        let zero = g.input(Tensor::zeros(&[2]));
        let loss = g.mse_half(s, zero).unwrap();
        g.backward(loss).unwrap();
        // d/dp (1/4)·Σ(2p)² = 2p
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, -6.0]);
    }
}
