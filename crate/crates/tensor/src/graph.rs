//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Graph`] records every op applied to tracked [`Var`]s. Calling
//! [`Graph::backward`] consumes the tape and returns gradients for the leaves.
//! An inference graph ([`Graph::inference`]) records nothing, so the same
//! model code runs without keeping activations alive.

use std::cell::RefCell;
use std::sync::Arc;

use crate::element::Element;
use crate::error::TensorError;
use crate::tensor::Tensor;

pub(crate) type Backward<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<Backward<T>>,
}

/// A value flowing through a graph, optionally tracked for gradients.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Extracts the tensor, cloning only if it is still shared.
    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
    }
}

pub struct Graph<T: Element> {
    record: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            record: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A graph that never records; every var it produces is untracked.
    pub fn inference() -> Self {
        Self {
            record: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.record {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(value),
            id: None,
        }
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var { value, id: None }
    }

    /// Records `value` as the output of an op on `parents`. `backward`
    /// receives the output gradient and a per-parent "needs gradient" mask
    /// and returns one optional gradient per parent.
    pub(crate) fn op<F>(&self, value: Tensor<T>, parents: &[&Var<T>], backward: F) -> Var<T>
    where
        F: FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let value = Arc::new(value);
        if !self.record || parents.iter().all(|p| p.id.is_none()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    /// Back-propagates from a single-element `root`. The recorded tape is
    /// consumed; later calls see an empty graph.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>, TensorError> {
        if root.value.numel() != 1 {
            return Err(TensorError::Gradient(format!(
                "backward root must hold one element, has shape {:?}",
                root.shape()
            )));
        }
        let seed = Tensor::full(root.shape(), T::one());
        self.backward_with(root, seed)
    }

    /// Back-propagates an explicit output gradient from `root`.
    pub fn backward_with(&self, root: &Var<T>, seed: Tensor<T>) -> Result<Gradients<T>, TensorError> {
        let root_id = root
            .id
            .ok_or_else(|| TensorError::Gradient("backward root is not tracked".into()))?;
        if seed.shape() != root.shape() {
            return Err(TensorError::Gradient("seed shape differs from root".into()));
        }
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(seed);
        for i in (0..=root_id).rev() {
            let Some(bw) = nodes[i].backward.take() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents = std::mem::take(&mut nodes[i].parents);
            let needs: Vec<bool> = parents.iter().map(Option::is_some).collect();
            let pgrads = bw(&g, &needs);
            debug_assert_eq!(pgrads.len(), parents.len());
            for (p, pg) in parents.into_iter().zip(pgrads) {
                if let (Some(pid), Some(pg)) = (p, pg) {
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.id.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }

    /// Gradient of `var`, or zeros of its shape when it did not reach the root.
    pub fn take_or_zeros(&mut self, var: &Var<T>) -> Tensor<T> {
        self.take(var).unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
