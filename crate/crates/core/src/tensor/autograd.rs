use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    /// Back-propagates from this scalar, adding d(self)/d(t) into the gradient
    /// slot of every tracked tensor `t` it depends on.
    ///
    /// Gradients accumulate across calls; use [`Tensor::zero_grad`] or fresh
    /// leaves to start over.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.is_tracked() {
            return Err(Error::invalid("backward: loss does not depend on any tracked tensor"));
        }

        let order = topo_order(self);
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            t.accumulate_grad(&g);
            let Some(node) = t.node() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(Tensor::is_tracked).collect();
            let parent_grads = (node.backward)(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.is_tracked() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Tracked tensors reachable from `root`, parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (tensor, whether its parents have been pushed)
    let mut stack = vec![(root.clone(), false)];
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
            for p in &node.parents {
                if p.is_tracked() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
