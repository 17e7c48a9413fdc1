use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

type BackwardFn<R> = Box<dyn Fn(&Tensor<R>) -> Vec<Option<Tensor<R>>>>;

struct Node<R> {
    value: Arc<Tensor<R>>,
    parents: Vec<usize>,
    tracked: bool,
    backward: Option<BackwardFn<R>>,
}

/// Records executed operations so their adjoints can be replayed in reverse.
///
/// Nodes are appended in execution order, which is already a topological
/// order of the graph. A tape is single-threaded; evaluate independent
/// episodes on independent tapes.
pub struct Tape<R> {
    nodes: RefCell<Vec<Node<R>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, R> {
    pub(crate) tape: &'t Tape<R>,
    pub(crate) id: usize,
}

impl<R> Clone for Var<'_, R> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<R> Copy for Var<'_, R> {}

impl<R> std::fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Arc<Tensor<R>>, tracked: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            tracked,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient is wanted.
    pub fn var(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push_leaf(Arc::new(value), true)
    }

    /// Shared leaf (typically a parameter); `tracked` selects whether
    /// gradients flow into it.
    pub fn param(&self, value: &Arc<Tensor<R>>, tracked: bool) -> Var<'_, R> {
        self.push_leaf(Arc::clone(value), tracked)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push_leaf(Arc::new(value), false)
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor<R>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Appends an operation output. The backward closure maps the output
    /// adjoint to one optional adjoint per parent, in parent order.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor<R>,
        parents: &[usize],
        backward: impl Fn(&Tensor<R>) -> Vec<Option<Tensor<R>>> + 'static,
    ) -> Result<Var<'_, R>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|&p| nodes[p].tracked);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            tracked,
            backward: if tracked {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept only once.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].tracked {
            grads[loss.id] = Some(Tensor::from_parts(loss_shape, vec![R::one()]));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let contributions = backward(g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, c) in node.parents.iter().zip(contributions) {
                let Some(c) = c else { continue };
                if !nodes[p].tracked {
                    continue;
                }
                debug_assert_eq!(c.shape(), nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&c),
                    None => grads[p] = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, var: Var<'_, R>) -> Option<&Tensor<R>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of the given shape if nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_, R>) -> Tensor<R> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_, R>) -> Option<Tensor<R>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'t, R: Real> Var<'t, R> {
    pub fn value(&self) -> Arc<Tensor<R>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }
}
