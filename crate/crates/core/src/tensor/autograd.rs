//! Reverse-mode traversal: topological ordering and cotangent accumulation.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Tensor, TensorId};
use crate::error::{Error, Result};

thread_local! {
    static GRAPH_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn graph_enabled() -> bool {
    GRAPH_ENABLED.with(Cell::get)
}

/// Run `f` with graph recording forced on or off for the current thread.
pub(crate) fn with_graph_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    let prev = GRAPH_ENABLED.with(|g| g.replace(enabled));
    let out = f();
    GRAPH_ENABLED.with(|g| g.set(prev));
    out
}

/// Gradients of one backward pass, keyed by tensor identity.
///
/// Holds a gradient for every tensor reached by the sweep, leaves and
/// intermediates alike; each gradient has the shape of its target. When the
/// pass ran with `create_graph`, the gradients carry graph nodes themselves.
pub struct GradientSet {
    grads: HashMap<TensorId, Tensor>,
}

impl GradientSet {
    pub fn grad(&self, t: &Tensor) -> Option<&Tensor> {
        let g = self.grads.get(&t.id())?;
        debug_assert_eq!(g.shape(), t.shape());
        Some(g)
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Tensors in forward-topological order, reachable from `root` through
/// gradient-requiring inputs.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<TensorId> = HashSet::new();
    // Iterative post-order: (tensor, children_pushed).
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for input in &node.inputs {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

pub(super) fn backward(root: &Tensor, create_graph: bool) -> Result<GradientSet> {
    if !root.is_scalar() {
        return Err(Error::NonScalarBackward { got: root.shape().to_vec() });
    }
    if root.node().is_none() {
        return Err(Error::DetachedBackward);
    }
    let order = topo_order(root);
    let mut grads: HashMap<TensorId, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::scalar(1.0));

    with_graph_mode(create_graph, || -> Result<()> {
        for t in order.iter().rev() {
            let Some(cot) = grads.get(&t.id()).cloned() else {
                continue;
            };
            let Some(node) = t.node() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
            let input_cots = node.op.vjp(&cot, &node.inputs, t, &needs)?;
            for (input, ic) in node.inputs.iter().zip(input_cots) {
                let Some(ic) = ic else { continue };
                match grads.entry(input.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let sum = e.get().add(&ic)?;
                        e.insert(sum);
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(ic);
                    }
                }
            }
        }
        Ok(())
    })?;

    Ok(GradientSet { grads })
}
