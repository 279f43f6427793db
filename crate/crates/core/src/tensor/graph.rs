use std::collections::HashMap;

use super::kernels::{self, Shape4};
use super::{Padding, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
        k: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    ConcatCrop {
        skip: Var,
        up: Var,
        off: [usize; 3],
    },
    Sum {
        input: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Custom {
        input: Var,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, so
/// the index order is a topological order and the graph is acyclic.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

fn shape4(t: &Tensor<impl Scalar>) -> Result<Shape4> {
    match t.shape()[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape(format!("expected a rank-4 feature map, got {:?}", t.shape()))),
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is produced for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// 3D cross-correlation with a cubic kernel taken from the weight shape.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let xs = shape4(self.value(input))?;
        let ws = self.value(weight).shape().to_vec();
        let [cout, cin, k, k1, k2] = ws[..] else {
            return Err(Error::Shape(format!("conv weight must be rank 5, got {ws:?}")));
        };
        if k != k1 || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!("kernel must be cubic and odd, got {ws:?}")));
        }
        if cin != xs[0] {
            return Err(Error::Shape(format!(
                "channel mismatch: input has {}, weight expects {cin}",
                xs[0]
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {cout} output channels",
                self.value(bias).shape()
            )));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (k - 1) / 2,
        };
        let spatial = [xs[1] + 2 * pad, xs[2] + 2 * pad, xs[3] + 2 * pad];
        if kernels::valid_extent(spatial, k).is_none() {
            return Err(Error::Shape(format!(
                "spatial extent {:?} smaller than kernel {k} in valid mode",
                &xs[1..]
            )));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let (out, os) = if pad == 0 {
            kernels::conv3d_valid(x, xs, w, b, cout, k)
        } else {
            let (px, ps) = kernels::pad(x, xs, pad);
            kernels::conv3d_valid(&px, ps, w, b, cout, k)
        };
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(os.to_vec(), out)?,
            Op::Conv {
                input,
                weight,
                bias,
                pad,
                k,
            },
            rg,
        ))
    }

    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let xs = shape4(self.value(input))?;
        if xs[1..].iter().any(|s| s % 2 != 0) {
            return Err(Error::Shape(format!("max pooling needs even extents, got {:?}", &xs[1..])));
        }
        let (out, argmax, os) = kernels::maxpool2(self.value(input).data(), xs);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(os.to_vec(), out)?, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample3d(&mut self, input: Var) -> Result<Var> {
        let xs = shape4(self.value(input))?;
        let (out, os) = kernels::upsample2(self.value(input).data(), xs);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(os.to_vec(), out)?, Op::Upsample { input }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|v| sigmoid(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Crops `skip` to the extents of `up` (centered) and stacks channels.
    pub fn concat_crop(&mut self, skip: Var, up: Var) -> Result<Var> {
        let ss = shape4(self.value(skip))?;
        let us = shape4(self.value(up))?;
        for a in 1..4 {
            if ss[a] < us[a] {
                return Err(Error::Shape(format!(
                    "skip {:?} smaller than upsampled {:?}",
                    &ss[1..],
                    &us[1..]
                )));
            }
            if (ss[a] - us[a]) % 2 != 0 {
                return Err(Error::Shape(format!(
                    "odd size difference between skip {:?} and upsampled {:?}",
                    &ss[1..],
                    &us[1..]
                )));
            }
        }
        let (out, off, os) =
            kernels::concat_crop(self.value(skip).data(), ss, self.value(up).data(), us);
        let rg = self.rg(skip) || self.rg(up);
        Ok(self.push(Tensor::new(os.to_vec(), out)?, Op::ConcatCrop { skip, up, off }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().fold(T::zero(), |a, b| a + *b);
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|v| *v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Records a unary op computed elsewhere. `backward` maps the gradient of
    /// the output to the gradient of `input`.
    pub fn custom_unary(
        &mut self,
        input: Var,
        value: Tensor<T>,
        backward: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
    ) -> Var {
        let rg = self.rg(input);
        self.push(
            value,
            Op::Custom {
                input,
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in
    /// reverse recording order. A graph can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by a previous backward".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.insert(Var(i), t);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    pad,
                    k,
                } => {
                    let os = shape4(&node.value)?;
                    let xs = shape4(self.value(*input))?;
                    let w = self.value(*weight).data();
                    let (px, ps);
                    let (xdata, xshape) = if *pad == 0 {
                        (self.value(*input).data(), xs)
                    } else {
                        (px, ps) = kernels::pad(self.value(*input).data(), xs, *pad);
                        (&px[..], ps)
                    };
                    if self.rg(*input) {
                        let gin = kernels::conv3d_valid_grad_input(&g, os, w, xshape, *k);
                        let gin = if *pad == 0 { gin } else { kernels::unpad(&gin, xs, *pad) };
                        add_into(&mut grads[input.0], gin);
                    }
                    if self.rg(*weight) || self.rg(*bias) {
                        let (gw, gb) = kernels::conv3d_valid_grad_params(&g, os, xdata, xshape, *k);
                        if self.rg(*weight) {
                            add_into(&mut grads[weight.0], gw);
                        }
                        if self.rg(*bias) {
                            add_into(&mut grads[bias.0], gb);
                        }
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let gin = kernels::maxpool2_backward(&g, argmax, self.value(*input).len());
                    add_into(&mut grads[input.0], gin);
                }
                Op::Upsample { input } => {
                    let xs = shape4(self.value(*input))?;
                    add_into(&mut grads[input.0], kernels::upsample2_backward(&g, xs));
                }
                Op::Relu { input } => {
                    let y = node.value.data();
                    let gin = g
                        .iter()
                        .zip(y)
                        .map(|(g, y)| if *y > T::zero() { *g } else { T::zero() })
                        .collect();
                    add_into(&mut grads[input.0], gin);
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    let gin = g
                        .iter()
                        .zip(y)
                        .map(|(g, y)| *g * *y * (T::one() - *y))
                        .collect();
                    add_into(&mut grads[input.0], gin);
                }
                Op::ConcatCrop { skip, up, off } => {
                    let ss = shape4(self.value(*skip))?;
                    let us = shape4(self.value(*up))?;
                    let (gs, gu) = kernels::concat_crop_backward(&g, ss, us, *off);
                    if self.rg(*skip) {
                        add_into(&mut grads[skip.0], gs);
                    }
                    if self.rg(*up) {
                        add_into(&mut grads[up.0], gu);
                    }
                }
                Op::Sum { input } => {
                    let n = self.value(*input).len();
                    add_into(&mut grads[input.0], vec![g[0]; n]);
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let gb: Vec<T> =
                            g.iter().zip(self.value(*b).data()).map(|(g, v)| *g * *v).collect();
                        add_into(&mut grads[a.0], gb);
                    }
                    if self.rg(*b) {
                        let ga: Vec<T> =
                            g.iter().zip(self.value(*a).data()).map(|(g, v)| *g * *v).collect();
                        add_into(&mut grads[b.0], ga);
                    }
                }
                Op::Scale { input, factor } => {
                    let gin = g.iter().map(|v| *v * *factor).collect();
                    add_into(&mut grads[input.0], gin);
                }
                Op::Custom { input, backward } => {
                    let gin = backward(&g);
                    if gin.len() != self.value(*input).len() {
                        return Err(Error::Graph("custom backward returned wrong length".into()));
                    }
                    add_into(&mut grads[input.0], gin);
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
