//! Execution backends for the network's layer graph.
//!
//! Network code is written once against [`Exec`]. [`Eager`] evaluates layers
//! immediately and frees intermediates as soon as they go out of scope
//! (inference); [`Tape`] records every value so a reverse pass can produce
//! parameter and input gradients (training, gradient checks).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{Real, Tensor};

pub type ParamId = usize;

/// One named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<T>) -> ParamId {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.params.push(Param { name: name.into(), dims, data });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    data: p.data.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// A convolution bound to its weight and bias parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub trait Exec<T: Real> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn conv(&mut self, x: &Self::V, layer: &ConvLayer) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn leaky_relu(&mut self, x: &Self::V) -> Self::V;
    fn upsample2x(&mut self, x: &Self::V) -> Self::V;
    fn downsample2x(&mut self, x: &Self::V) -> Result<Self::V>;
}

fn run_conv<T: Real>(params: &ParamStore<T>, x: &Tensor<T>, layer: &ConvLayer) -> Result<Tensor<T>> {
    kernels::conv_forward(x, &layer.spec, &params.get(layer.weight).data, &params.get(layer.bias).data)
}

fn sum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Immediate evaluation without gradient bookkeeping.
pub struct Eager<'p, T> {
    params: &'p ParamStore<T>,
}

impl<'p, T: Real> Eager<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params }
    }
}

impl<T: Real> Exec<T> for Eager<'_, T> {
    type V = Rc<Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn conv(&mut self, x: &Self::V, layer: &ConvLayer) -> Result<Self::V> {
        run_conv(self.params, x, layer).map(Rc::new)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        sum(a, b).map(Rc::new)
    }

    fn leaky_relu(&mut self, x: &Self::V) -> Self::V {
        Rc::new(kernels::leaky_relu(x))
    }

    fn upsample2x(&mut self, x: &Self::V) -> Self::V {
        Rc::new(kernels::upsample2x(x))
    }

    fn downsample2x(&mut self, x: &Self::V) -> Result<Self::V> {
        kernels::downsample2x(x).map(Rc::new)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: usize, layer: ConvLayer },
    Add(usize, usize),
    LeakyRelu(usize),
    Upsample(usize),
    Downsample(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Records a forward pass for reverse-mode differentiation.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    /// One gradient buffer per parameter, in store order.
    pub params: Vec<Vec<T>>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(id, _)| *id == v).map(|(_, g)| g)
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Propagates the given output gradients back to every parameter and leaf.
    ///
    /// Several seeds may be supplied; their contributions are summed.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            self.nodes[v.0].value.expect_same_shape(&g)?;
            accumulate(&mut grads[v.0], g)?;
        }
        let mut param_grads = self.params.zeros_like();
        let mut leaves = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => leaves.push((Var(i), g)),
                Op::Conv { x, layer } => {
                    let w = &self.params.get(layer.weight).data;
                    let cg = kernels::conv_backward(&self.nodes[*x].value, &layer.spec, w, &g, true)?;
                    for (a, b) in param_grads[layer.weight].iter_mut().zip(&cg.dw) {
                        *a += *b;
                    }
                    for (a, b) in param_grads[layer.bias].iter_mut().zip(&cg.db) {
                        *a += *b;
                    }
                    accumulate(&mut grads[*x], cg.dx.expect("dx requested"))?;
                }
                Op::Add(a, b) => {
                    if a == b {
                        let mut twice = g;
                        twice.scale(T::of(2.0));
                        accumulate(&mut grads[*a], twice)?;
                    } else {
                        accumulate(&mut grads[*b], g.clone())?;
                        accumulate(&mut grads[*a], g)?;
                    }
                }
                Op::LeakyRelu(x) => {
                    let dx = kernels::leaky_relu_backward(&self.nodes[*x].value, &g)?;
                    accumulate(&mut grads[*x], dx)?;
                }
                Op::Upsample(x) => accumulate(&mut grads[*x], kernels::upsample2x_backward(&g)?)?,
                Op::Downsample(x) => accumulate(&mut grads[*x], kernels::downsample2x_backward(&g))?,
            }
        }
        leaves.reverse();
        Ok(Gradients { params: param_grads, leaves })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Real> Exec<T> for Tape<'_, T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn conv(&mut self, x: &Var, layer: &ConvLayer) -> Result<Var> {
        let y = run_conv(self.params, &self.nodes[x.0].value, layer)?;
        Ok(self.push(y, Op::Conv { x: x.0, layer: *layer }))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = sum(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(y, Op::Add(a.0, b.0)))
    }

    fn leaky_relu(&mut self, x: &Var) -> Var {
        let y = kernels::leaky_relu(&self.nodes[x.0].value);
        self.push(y, Op::LeakyRelu(x.0))
    }

    fn upsample2x(&mut self, x: &Var) -> Var {
        let y = kernels::upsample2x(&self.nodes[x.0].value);
        self.push(y, Op::Upsample(x.0))
    }

    fn downsample2x(&mut self, x: &Var) -> Result<Var> {
        let y = kernels::downsample2x(&self.nodes[x.0].value)?;
        Ok(self.push(y, Op::Downsample(x.0)))
    }
}

impl<T: Real> Gradients<T> {
    pub fn global_norm(&self) -> f64 {
        self.params.iter().flatten().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn merge(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config("gradient sets come from different parameter stores".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn tape_and_eager_agree() {
        let mut store = ParamStore::<f64>::new();
        let spec = ConvSpec::conv(2, 2, 3, 1, 1);
        let w = store.push("w", spec.weight_dims().to_vec(), (0..36).map(|i| (i as f64 * 0.37).sin()).collect());
        let b = store.push("b", vec![2], vec![0.1, -0.1]);
        let layer = ConvLayer { spec, weight: w, bias: b };
        let x = Tensor::from_fn(Shape::new(2, 4, 4), |c, y, x| (c + y * 3 + x) as f64 * 0.1 - 0.5);

        let mut eager = Eager::new(&store);
        let xe = Rc::new(x.clone());
        let h = eager.conv(&xe, &layer).unwrap();
        let h = eager.leaky_relu(&h);
        let d = eager.downsample2x(&h).unwrap();
        let u = eager.upsample2x(&d);
        let ye = eager.add(&u, &xe).unwrap();

        let mut tape = Tape::new(&store);
        let xt = tape.leaf(x);
        let h = tape.conv(&xt, &layer).unwrap();
        let h = tape.leaky_relu(&h);
        let d = tape.downsample2x(&h).unwrap();
        let u = tape.upsample2x(&d);
        let yt = tape.add(&u, &xt).unwrap();
        assert_eq!(tape.value(&yt), &*ye);
    }

    #[test]
    fn self_add_doubles_gradient() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 2), 1.0));
        let y = tape.add(&x, &x).unwrap();
        let g = tape.backward(vec![(y, Tensor::filled(Shape::new(1, 1, 2), 1.0))]).unwrap();
        assert_eq!(g.leaf(x).unwrap().data(), &[2.0, 2.0]);
    }
}
