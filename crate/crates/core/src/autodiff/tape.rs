use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Reverse rule: receives the gradient of the node's output and the output
/// value itself, returns one optional gradient per parent (in parent order).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
    param: Option<usize>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is built fresh for every forward pass; nodes are never freed
/// until the tape is dropped, so the tape's element count is the pass's
/// activation high-water mark.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    matmul_flops: Cell<u64>,
    live_elems: Cell<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), matmul_flops: Cell::new(0), live_elems: Cell::new(0) }
    }

    /// Untracked input (no gradient flows into it).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), Vec::new(), None, false, None)
    }

    /// Tracked input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(value), Vec::new(), None, true, None)
    }

    /// Tracked input bound to parameter slot `param`.
    pub fn param(&self, param: usize, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.insert(value, Vec::new(), None, true, Some(param))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-add operations (2 per product term) performed by matrix
    /// products recorded on this tape.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops.get()
    }

    /// Total elements held by the tape's node values.
    pub fn live_elements(&self) -> usize {
        self.live_elems.get()
    }

    pub(crate) fn count_flops(&self, flops: u64) {
        self.matmul_flops.set(self.matmul_flops.get() + flops);
    }

    fn insert(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        tracked: bool,
        param: Option<usize>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        self.live_elems.set(self.live_elems.get() + value.numel());
        nodes.push(Node { value, parents, backward, tracked, param });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push<'t>(
        &'t self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'t, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].tracked)
        };
        let backward: Option<BackwardFn<T>> = if tracked { Some(Box::new(backward)) } else { None };
        Ok(self.insert(Rc::new(value), parents.iter().map(|p| p.id).collect(), backward, tracked, None))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Each call returns a fresh set of gradients; accumulating them (e.g.
    /// into a [`crate::nn::ParamStore`]) is additive across calls.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", root.value.shape())));
        }
        if !root.tracked {
            return Err(Error::invalid("backward: loss does not depend on any tracked input"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![T::one()]));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if !g.is_finite() {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    leaves[id] = Some(g);
                }
                Some(rule) => {
                    let parent_grads = rule(&g, &node.value);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[pid].tracked {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape");
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .take(loss.id + 1)
            .filter_map(|(id, n)| n.param.map(|p| (id, p)))
            .collect();
        Ok(Gradients { leaves, params })
    }
}

/// Gradients of one reverse sweep with respect to tracked leaves.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(var.id).and_then(Option::as_ref)
    }

    /// `(parameter slot, gradient)` for every parameter leaf reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params.iter().filter_map(|&(node, p)| self.leaves[node].as_ref().map(|g| (p, g)))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}
