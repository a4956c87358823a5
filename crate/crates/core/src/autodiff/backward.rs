use std::collections::{HashMap, HashSet};

use super::{set_grad_enabled, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients of the scalar `root` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are recorded on the graph and
/// can be differentiated again; otherwise they are plain constants. A `wrt`
/// entry that does not influence `root` receives a zero tensor.
pub fn grad<S: Scalar>(root: &Var<S>, wrt: &[Var<S>], create_graph: bool) -> Result<Vec<Var<S>>> {
    if root.value().numel() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let zeros = |v: &Var<S>| Var::constant(Tensor::zeros(v.shape()));
    if !root.requires_grad() {
        return Ok(wrt.iter().map(zeros).collect());
    }

    // Every tracked ancestor of the root.
    let mut nodes: Vec<Var<S>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.extend(v.parents().iter().cloned());
        nodes.push(v);
    }
    // Parents precede children in id order.
    nodes.sort_unstable_by_key(Var::id);

    // Restrict the sweep to nodes lying on a path to some target.
    let targets: HashSet<u64> = wrt.iter().map(Var::id).collect();
    let mut relevant: HashSet<u64> = HashSet::new();
    for v in &nodes {
        if targets.contains(&v.id()) || v.parents().iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(v.id());
        }
    }

    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<u64, Var<S>> = HashMap::new();
    grads.insert(root.id(), Var::constant(Tensor::ones(root.shape())));

    for v in nodes.iter().rev() {
        if !relevant.contains(&v.id()) || v.parents().is_empty() {
            continue;
        }
        let Some(g) = grads.get(&v.id()).cloned() else {
            continue;
        };
        if !v
            .parents()
            .iter()
            .any(|p| p.requires_grad() && relevant.contains(&p.id()))
        {
            continue;
        }
        let contributions = v.backward_rule(&g)?;
        for (parent, contrib) in v.parents().iter().zip(contributions) {
            let Some(c) = contrib else { continue };
            if !parent.requires_grad() || !relevant.contains(&parent.id()) {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&c)?,
                None => c,
            };
            grads.insert(parent.id(), acc);
        }
        // Intermediate gradients are no longer needed once propagated.
        if !targets.contains(&v.id()) {
            grads.remove(&v.id());
        }
    }

    Ok(wrt
        .iter()
        .map(|w| grads.get(&w.id()).cloned().unwrap_or_else(|| zeros(w)))
        .collect())
}

/// Single-target convenience wrapper around [`grad`].
pub fn grad_one<S: Scalar>(root: &Var<S>, wrt: &Var<S>, create_graph: bool) -> Result<Var<S>> {
    Ok(grad(root, std::slice::from_ref(wrt), create_graph)?.remove(0))
}
