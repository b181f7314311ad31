//! Dense float64 tensors and a reverse-mode tape.
//!
//! A [`Tape`] is an append-only Wengert list. Every operation pushes one node
//! holding its output value and the handles of its inputs, so node indices are
//! already a topological order and the backward sweep simply walks them in
//! reverse. Leaves created from a [`Tensor`] with `requires_grad` receive
//! accumulated gradients; everything else only carries transient adjoints.

mod checkpoint;
mod kernels;
mod ops;

pub use checkpoint::{read_checkpoint, save_checkpoint, load_checkpoint, write_checkpoint};
pub use ops::ElementwiseKind;

use crate::error::{Error, Result};

/// N-dimensional row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a gradient-receiving leaf.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn is_requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: ops::Op,
    parents: Vec<usize>,
    needs_grad: bool,
}

/// Single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    last_order: Vec<usize>,
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

    /// Records a leaf. Gradients accumulate into it iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, ops::Op::Leaf, Vec::new(), needs_grad)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    /// Same values as `v`, cut out of gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let value = Tensor::from_parts(node.value.shape.clone(), node.value.data.clone());
        self.push(value, ops::Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    /// Node indices visited by the most recent backward sweep, in visit order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_order
    }

    fn push(&mut self, value: Tensor, op: ops::Op, parents: Vec<usize>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        Var(id)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into gradient leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![1.0]);
        self.last_order.clear();

        for id in (0..=loss.0).rev() {
            let Some(upstream) = adjoint[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.last_order.push(id);
            if matches!(self.nodes[id].op, ops::Op::Leaf) {
                let value = &mut self.nodes[id].value;
                if value.requires_grad {
                    value.accumulate_grad(&upstream)?;
                }
                continue;
            }
            let contributions = ops::backward_rule(self, id, &upstream);
            for (parent, grad) in self.nodes[id].parents.clone().into_iter().zip(contributions) {
                let Some(grad) = grad else { continue };
                match &mut adjoint[parent] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, -2.0, 3.0]).requires_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]).requires_grad());
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]).requires_grad());
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[2.0]).requires_grad());
        let d = tape.detach(x);
        assert_eq!(tape.data(d), tape.data(x));
        let p = tape.mul(d, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        assert!(tape.grad(d).is_none());
    }

    #[test]
    fn second_backward_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[0.3, -1.7, 2.2]).requires_grad());
        let e = tape.exp(x);
        let m = tape.mul(e, x).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_visits_in_reverse_topological_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[0.5, 1.5]).requires_grad());
        let c = tape.constant(Tensor::from_slice(&[3.0, 4.0]));
        let a = tape.mul(x, c).unwrap();
        let b = tape.exp(a);
        let d = tape.add(a, b).unwrap();
        let s = tape.sum(d);
        tape.backward(s).unwrap();
        let order = tape.last_backward_order();
        // constant leaf is never visited; each other node exactly once
        assert_eq!(order, &[s.index(), d.index(), b.index(), a.index(), x.index()]);
        for (pos, &id) in order.iter().enumerate() {
            for &parent in &tape.nodes[id].parents {
                if let Some(ppos) = order.iter().position(|&o| o == parent) {
                    assert!(ppos > pos);
                }
            }
        }
    }

    #[test]
    fn constants_never_receive_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0]).requires_grad());
        let c = tape.leaf(Tensor::from_slice(&[5.0]));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }
}
