//! Recording tape for reverse-mode differentiation.
//!
//! A forward pass pushes nodes (values) and, for differentiable results, a
//! backward step. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks the steps in
//! reverse, visiting each exactly once. Gradients accumulate additively when
//! a node fans out into several consumers.
//!
//! A tape and its tensors are confined to one thread for the duration of a
//! forward/backward pass; independent tapes over disjoint parameter copies
//! can run on separate threads.

use std::collections::HashMap;

use super::optim::{ParamId, ParamStore};
use super::{Element, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T: Element> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

/// Read access to recorded forward values, handed to backward closures.
pub(crate) struct Values<'a, T: Element>(&'a [Node<T>]);

impl<'a, T: Element> Values<'a, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.0[v.0].value
    }
}

/// Gradient buffers, indexed like the node list. Buffers are created lazily
/// on first accumulation and only for nodes that require grad.
pub(crate) struct GradStore<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    needs: Vec<bool>,
}

impl<T: Element> GradStore<T> {
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first touch.
    /// Returns `None` when the node does not require grad, so backward
    /// closures can skip computing that contribution entirely.
    pub fn buf(&mut self, v: Var, shape: &[usize]) -> Option<&mut [T]> {
        if !self.needs[v.0] {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        Some(slot.as_mut().unwrap().data_mut())
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Values<'_, T>, &Tensor<T>, &mut GradStore<T>)>;

struct Step<T: Element> {
    out: usize,
    backward: BackwardFn<T>,
}

/// Wengert-style operation tape.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    steps: Vec<Step<T>>,
    grads: GradStore<T>,
    param_links: Vec<(usize, ParamId)>,
    staged: HashMap<usize, Var>,
    no_grad: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            steps: Vec::new(),
            grads: GradStore { grads: Vec::new(), needs: Vec::new() },
            param_links: Vec::new(),
            staged: HashMap::new(),
            no_grad: false,
        }
    }

    /// Tape that records values but no backward steps; forward-only passes
    /// (validation, prediction) use this to skip gradient bookkeeping.
    pub fn new_inference() -> Self {
        let mut t = Self::new();
        t.no_grad = true;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    /// Record a differentiable leaf (an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Stage a parameter from `store`. The value is copied onto the tape and
    /// the link is remembered so [`Tape::scatter_param_grads`] can push the
    /// gradient back. Staging the same parameter twice returns the same node.
    pub fn read_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.staged.get(&id.index()) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), entry.trainable, None);
        if entry.trainable {
            self.param_links.push((v.0, id));
        }
        self.staged.insert(id.index(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    /// `None` if no gradient reached `v` (or `v` does not require grad).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        let requires_grad = requires_grad && !self.no_grad;
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad });
        self.grads.grads.push(None);
        self.grads.needs.push(requires_grad);
        if requires_grad {
            if let Some(b) = backward {
                self.steps.push(Step { out: id, backward: b });
            }
        }
        Var(id)
    }

    /// Next node id; ops use this to capture their own output var in a
    /// backward closure before pushing it.
    pub(crate) fn next_id(&self) -> Var {
        Var(self.nodes.len())
    }

    /// Run reverse-mode accumulation from a scalar root. Every node with
    /// `requires_grad` reachable from the root ends up holding d(root)/d(node);
    /// fan-out contributions add. Gradients from a previous backward call on
    /// the same tape are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        for g in self.grads.grads.iter_mut() {
            *g = None;
        }
        if !self.grads.needs[root.0] {
            return Ok(()); // nothing requires grad below the root
        }
        self.grads.grads[root.0] =
            Some(Tensor::full(self.nodes[root.0].value.shape(), T::ONE));
        for si in (0..self.steps.len()).rev() {
            let out = self.steps[si].out;
            if out > root.0 {
                continue; // recorded after the root; not an ancestor
            }
            let Some(g_out) = self.grads.grads[out].take() else {
                continue; // no gradient flowed into this node
            };
            let values = Values(&self.nodes);
            (self.steps[si].backward)(&values, &g_out, &mut self.grads);
            self.grads.grads[out] = Some(g_out);
        }
        Ok(())
    }

    /// Add the gradient of every staged trainable parameter into `store`.
    pub fn scatter_param_grads(&self, store: &mut ParamStore<T>) {
        for &(node, id) in &self.param_links {
            if let Some(g) = self.grads.grads[node].as_ref() {
                store.accumulate_grad(id, g);
            }
        }
    }
}
