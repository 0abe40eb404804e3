//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Learnable tensors live
//! in a [`ParamStore`]; [`Tape::backward`] adds `d loss / d param` into each
//! parameter's gradient buffer. Gradients accumulate until
//! [`ParamStore::zero_grad`] is called.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvParams};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    /// Replaces the value; the new tensor must keep the parameter's shape.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        self.value.expect_same_shape(&value)?;
        self.value = value;
        Ok(())
    }

    pub fn value_and_grad_mut(&mut self) -> (&mut Tensor<T>, &Tensor<T>) {
        (&mut self.value, &self.grad)
    }
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Same names and values in another precision, gradients cleared.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }

    fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        self.params[id.0].grad.add_assign(grad)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, p: ConvParams },
    Resize { x: Var },
    LeakyRelu { x: Var, slope: T },
    AvgPool { x: Var, k: usize },
    BoxMean { x: Var, r: usize },
    ChannelMean { x: Var },
    ExpandChannels { x: Var },
    ExpandBatch { x: Var },
    SumBatch { x: Var },
    SoftmaxBatch { x: Var },
    Concat { a: Var, b: Var },
    Crop { x: Var, y0: usize, x0: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScalar { x: Var },
    Scale { x: Var, s: T },
    Abs { x: Var },
    Square { x: Var },
    Sum { x: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is tracked, see [`Gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let value = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, p }, rg))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(value, Op::Resize { x }, self.rg(x)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = ops::leaky_relu(self.value(x), slope);
        self.push(value, Op::LeakyRelu { x, slope }, self.rg(x))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = ops::avg_pool(self.value(x), k)?;
        Ok(self.push(value, Op::AvgPool { x, k }, self.rg(x)))
    }

    pub fn box_mean(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = ops::box_mean(self.value(x), r)?;
        Ok(self.push(value, Op::BoxMean { x, r }, self.rg(x)))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let value = ops::channel_mean(self.value(x))?;
        Ok(self.push(value, Op::ChannelMean { x }, self.rg(x)))
    }

    pub fn expand_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let value = ops::expand_channels(self.value(x), channels)?;
        Ok(self.push(value, Op::ExpandChannels { x }, self.rg(x)))
    }

    pub fn expand_batch(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = ops::expand_batch(self.value(x), k)?;
        Ok(self.push(value, Op::ExpandBatch { x }, self.rg(x)))
    }

    pub fn sum_batch(&mut self, x: Var) -> Result<Var> {
        let value = ops::sum_batch(self.value(x))?;
        Ok(self.push(value, Op::SumBatch { x }, self.rg(x)))
    }

    pub fn softmax_batch(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax_batch(self.value(x))?;
        Ok(self.push(value, Op::SoftmaxBatch { x }, self.rg(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let value = ops::crop(self.value(x), y0, x0, h, w)?;
        Ok(self.push(value, Op::Crop { x, y0, x0 }, self.rg(x)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar { x }, self.rg(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale { x, s }, self.rg(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::abs);
        self.push(value, Op::Abs { x }, self.rg(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square { x }, self.rg(x))
    }

    /// Sum of all elements as a one-element tensor (64-bit accumulation).
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::of(self.value(x).sum_f64()));
        self.push(value, Op::Sum { x }, self.rg(x))
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::shape(format!("expected a scalar, got {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    /// Reverse sweep from `output`, which must hold a single element.
    pub fn gradients(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar output, got shape {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds `d output / d param` into the store's gradient buffers.
    pub fn backward(&self, output: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(output)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate(*id, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, p } => {
                let cg = ops::conv2d_backward(self.value(x), self.value(w), g, p, self.rg(x))?;
                if let Some(dx) = cg.input {
                    send(x, dx)?;
                }
                send(w, cg.weight)?;
                if let Some(b) = b {
                    send(b, cg.bias)?;
                }
            }
            Op::Resize { x } => {
                let (h, w) = self.value(x).hw();
                send(x, ops::bilinear_resize_backward(g, h, w)?)?;
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self.value(x).zip_map(g, |v, gv| if v >= T::zero() { gv } else { slope * gv })?;
                send(x, dx)?;
            }
            Op::AvgPool { x, k } => {
                let (h, w) = self.value(x).hw();
                send(x, ops::avg_pool_backward(g, k, h, w)?)?;
            }
            Op::BoxMean { x, r } => send(x, ops::box_mean_backward(g, r)?)?,
            Op::ChannelMean { x } => {
                let c = self.value(x).shape()[1];
                let dx = ops::expand_channels(&g.scale(T::one() / T::of(c as f64)), c)?;
                send(x, dx)?;
            }
            Op::ExpandChannels { x } => send(x, ops::sum_channels(g)?)?,
            Op::ExpandBatch { x } => {
                let (_, c, h, w) = g.dims4()?;
                let mut acc = Tensor::zeros(&[1, c, h, w]);
                for k in 0..g.shape()[0] {
                    acc.add_assign(&g.batch_item(k)?)?;
                }
                send(x, acc)?;
            }
            Op::SumBatch { x } => {
                let n = self.value(x).shape()[0];
                send(x, ops::expand_batch(g, n)?)?;
            }
            Op::SoftmaxBatch { x } => send(x, ops::softmax_batch_backward(&node.value, g)?)?,
            Op::Concat { a, b } => {
                let ca = self.value(a).shape()[1];
                let (da, db) = ops::split_channels(g, ca)?;
                send(a, da)?;
                send(b, db)?;
            }
            Op::Crop { x, y0, x0 } => {
                let (h, w) = self.value(x).hw();
                send(x, ops::crop_backward(g, y0, x0, h, w)?)?;
            }
            Op::Add { a, b } => {
                send(a, g.clone())?;
                send(b, g.clone())?;
            }
            Op::Sub { a, b } => {
                send(a, g.clone())?;
                send(b, g.map(|v| -v))?;
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    send(a, g.zip_map(self.value(b), |gv, bv| gv * bv)?)?;
                }
                if self.rg(b) {
                    send(b, g.zip_map(self.value(a), |gv, av| gv * av)?)?;
                }
            }
            Op::Div { a, b } => {
                let bv = self.value(b);
                if self.rg(a) {
                    send(a, g.zip_map(bv, |gv, d| gv / d)?)?;
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = node.value.zip_map(bv, |qv, d| qv / d)?;
                    send(b, g.zip_map(&q, |gv, qv| -gv * qv)?)?;
                }
            }
            Op::AddScalar { x } => send(x, g.clone())?,
            Op::Scale { x, s } => send(x, g.scale(s))?,
            Op::Abs { x } => {
                let dx = self.value(x).zip_map(g, |v, gv| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })?;
                send(x, dx)?;
            }
            Op::Square { x } => {
                let two = T::of(2.0);
                send(x, self.value(x).zip_map(g, |v, gv| two * v * gv)?)?;
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                send(x, Tensor::full(self.value(x).shape(), gv))?;
            }
        }
        Ok(())
    }
}
