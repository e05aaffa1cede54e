use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::param::{ParamId, ParamKind, ParamStore};
use super::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Backward rule of one recorded op: maps the output gradient to one
/// optional gradient per input. `needs[i]` tells whether input `i` wants one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// Value flowing through a forward pass. Cloning is cheap (shared storage).
///
/// A `Var` with a node id takes part in differentiation; one without is a
/// constant as far as the graph is concerned.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

/// Records differentiable ops in execution order.
///
/// Nodes are appended as ops run, so every node's inputs precede it and a
/// reverse sweep over the list is a valid topological traversal.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
    produced: Cell<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records ops for a later [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
            produced: Cell::new(0),
        }
    }

    /// A graph that records nothing; intermediate values are freed as soon
    /// as they go out of scope.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total bytes of every op output produced on this graph so far.
    pub fn produced_bytes(&self) -> usize {
        self.produced.get()
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Wraps a tensor that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var {
            value: Rc::new(t),
            node: None,
        }
    }

    /// Wraps a leaf tensor whose gradient is wanted.
    pub fn input(&self, t: Tensor<T>) -> Var<T> {
        let node = self.grad_enabled.then(|| {
            self.push(Node {
                op: "input",
                inputs: Vec::new(),
                backward: None,
                param: None,
            })
        });
        Var {
            value: Rc::new(t),
            node,
        }
    }

    /// Leaf for a stored parameter. Repeated calls for the same id share one
    /// node, so gradients from every use accumulate together. Buffers come
    /// back as constants.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let p = store.get(id);
        let value = p.shared_value();
        if !self.grad_enabled || p.kind != ParamKind::Trainable {
            return Var { value, node: None };
        }
        let existing = self.param_nodes.borrow().get(&id).copied();
        let node = existing.unwrap_or_else(|| {
            let n = self.push(Node {
                op: "param",
                inputs: Vec::new(),
                backward: None,
                param: Some(id),
            });
            self.param_nodes.borrow_mut().insert(id, n);
            n
        });
        Var {
            value,
            node: Some(node),
        }
    }

    /// Records the result of an op. Non-finite outputs are rejected.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var<T>> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op, index });
        }
        self.produced
            .set(self.produced.get() + value.len() * std::mem::size_of::<T>());
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.node.is_some());
        let node = tracked.then(|| {
            self.push(Node {
                op,
                inputs: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
                param: None,
            })
        });
        Ok(Var {
            value: Rc::new(value),
            node,
        })
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once; the
    /// graph cannot be swept a second time.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss.value.shape()
            )));
        }
        let Some(root) = loss.node else {
            return Err(TensorError::Backward(
                "loss does not depend on any recorded tensor (empty graph)".into(),
            ));
        };
        if self.consumed.replace(true) {
            return Err(TensorError::Backward("graph was already swept".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.value.shape(), T::one()));
        let mut out = Gradients {
            by_node: HashMap::new(),
            by_param: HashMap::new(),
        };
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut nodes[i];
            match node.backward.take() {
                None => {
                    if let Some(pid) = node.param {
                        out.by_param.insert(pid, g.clone());
                    }
                    out.by_node.insert(i, g);
                }
                Some(rule) => {
                    let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let input_grads = rule(&g, &needs)?;
                    for (slot, ig) in node.inputs.iter().zip(input_grads) {
                        let (Some(j), Some(ig)) = (slot, ig) else {
                            continue;
                        };
                        if let Some(bad) = ig.first_non_finite() {
                            return Err(TensorError::Backward(format!(
                                "non-finite gradient from `{}` at index {bad}",
                                node.op
                            )));
                        }
                        match &mut grads[*j] {
                            Some(acc) => acc.add_assign(&ig),
                            empty => *empty = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of the leaves reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|n| self.by_node.get(&n))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }
}
