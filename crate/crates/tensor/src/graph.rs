use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::{Real, Result, Tensor, TensorError};

/// Vector-Jacobian product of one recorded op. Receives the gradient of the
/// op's output and accumulates into its parents through the sink.
pub type BackwardFn<T> = Box<dyn FnOnce(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    param: Option<String>,
    backward: Option<BackwardFn<T>>,
}

/// A single-use tape. Build the forward pass through [`Var`] methods, then call
/// [`Graph::backward`] once on a scalar.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: RefCell<Option<TensorError>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), false, None)
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf_arc(value, false, None)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Differentiable input that is not a named parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), true, None)
    }

    pub fn param(&self, name: &str, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf_arc(value, true, Some(name.to_string()))
    }

    fn leaf_arc(
        &self,
        value: Arc<Tensor<T>>,
        requires_grad: bool,
        param: Option<String>,
    ) -> Var<'_, T> {
        if !value.is_finite() {
            self.record_fault(TensorError::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            param,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op computed outside this crate. `backward` is dropped when
    /// none of `parents` needs a gradient.
    pub fn custom(
        &self,
        op: &'static str,
        parents: &[Var<'_, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        self.push(op, parents, Arc::new(value), backward)
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        parents: &[Var<'_, T>],
        value: Arc<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        if !value.is_finite() {
            self.record_fault(TensorError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            param: None,
            backward: requires_grad.then_some(backward),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn record_fault(&self, err: TensorError) {
        let mut fault = self.fault.borrow_mut();
        if fault.is_none() {
            *fault = Some(err);
        }
    }

    /// First non-finite value produced by any op so far.
    pub fn check(&self) -> Result<()> {
        match self.fault.borrow().as_ref() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar. Consumes the recorded backward closures, so
    /// a graph can be differentiated once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check()?;
        let (needs, lens, shapes, params) = {
            let nodes = self.nodes.borrow();
            let loss_shape = nodes[loss.id].value.shape().to_vec();
            if nodes[loss.id].value.len() != 1 {
                return Err(TensorError::NonScalarLoss(loss_shape));
            }
            let needs: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
            let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
            let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
            let params: Vec<(String, usize)> = nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.clone().map(|p| (p, i)))
                .collect();
            (needs, lens, shapes, params)
        };

        let mut grads: Vec<Option<Vec<T>>> = vec![None; needs.len()];
        if needs[loss.id] {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let backward = self.nodes.borrow_mut()[id].backward.take();
            match backward {
                Some(f) => {
                    let mut sink = GradSink {
                        grads: &mut grads,
                        needs: &needs,
                        lens: &lens,
                    };
                    f(&g, &mut sink);
                }
                // leaves keep their gradient
                None => grads[id] = Some(g),
            }
        }

        let mut by_param = BTreeMap::new();
        for (name, id) in params {
            let g = grads[id]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); lens[id]]);
            let g = Tensor::from_parts(shapes[id].clone(), g);
            by_param
                .entry(name)
                .and_modify(|acc: &mut Tensor<T>| {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                })
                .or_insert(g);
        }
        Ok(Gradients {
            grads,
            shapes,
            by_param,
        })
    }
}

/// Where backward closures deposit parent gradients. Buffers are allocated
/// lazily and only for nodes that need them.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    needs: &'a [bool],
    lens: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    pub fn acc(&mut self, id: usize) -> Option<&mut [T]> {
        if !self.needs[id] {
            return None;
        }
        let len = self.lens[id];
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Result of a backward pass: gradients of named parameters and of any other
/// differentiable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_param
    }

    /// Gradient of a leaf created with [`Graph::leaf`] or [`Graph::param`].
    pub fn wrt(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Value of a one-element var.
    pub fn item(&self) -> T {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub(crate) fn same_graph(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.graph, other.graph)
    }
}
