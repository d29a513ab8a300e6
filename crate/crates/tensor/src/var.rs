//! Graph nodes and the reverse sweep.
//!
//! Every operation returns a new [`Var`] holding its value and, when any
//! input requires a gradient, a closure mapping the output gradient to
//! one gradient per parent. Values are never mutated after creation.
//! [`backward`] walks the graph from a scalar root in reverse
//! topological order and accumulates into the `grad` slot of every
//! leaf that requires one. Intermediate gradients are dropped as soon
//! as they have been propagated.
//!
//! Gradients accumulate across calls; call [`Var::zero_grad`] between
//! optimisation steps.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the output gradient to one optional gradient per parent, in parent order.
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor participating in reverse-mode differentiation.
///
/// Cloning is cheap (reference counted) and clones refer to the same node.
pub struct Var<T>(Arc<Node<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Arc::clone(&self.0))
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Element> Var<T> {
    fn make(
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad: Mutex::new(None),
            parents,
            backward,
        }))
    }

    /// Trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Self::make(value, true, Vec::new(), None)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::make(value, requires_grad, Vec::new(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Vec::new(), None)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    /// Records the result of an operation.
    ///
    /// `backward` is only kept when at least one parent requires a gradient,
    /// so graphs built from constants cost nothing beyond their values.
    /// This is the extension point for operations defined outside this crate.
    pub fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Accumulated gradient, if `backward` reached this leaf.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let g = self.0.grad.lock().expect("grad lock poisoned");
        g.as_ref()
            .map(|g| Tensor::from_parts(self.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Runs the reverse sweep from this scalar. See [`backward`].
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }
}

/// Populates `grad` on every leaf with `requires_grad` reachable from `loss`.
///
/// `loss` must hold exactly one element. Calling this twice without
/// [`Var::zero_grad`] adds the second gradient onto the first.
pub fn backward<T: Element>(loss: &Var<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Ok(());
    }

    // Iterative post-order DFS; `order` ends up parents-before-children.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(loss.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
    pending.insert(loss.id(), vec![T::one()]);
    for v in order.iter().rev() {
        let Some(g) = pending.remove(&v.id()) else {
            continue;
        };
        match &v.0.backward {
            None => v.accumulate(&g),
            Some(f) => {
                let grads = f(&g);
                debug_assert_eq!(grads.len(), v.0.parents.len());
                for (p, pg) in v.0.parents.iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
