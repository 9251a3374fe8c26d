use std::collections::{HashMap, HashSet};

use crate::tensor::{set_grad_enabled, Tensor};

/// Gradient of the scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients carry their own history and
/// can be differentiated again. Tensors in `wrt` that `output` does not
/// depend on get a zero gradient.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output, got shape {:?}", output.shape());
    grad_with(output, &Tensor::ones(output.shape()), wrt, create_graph)
}

/// Vector-Jacobian product: like [`grad`] but seeded with `seed` (same
/// shape as `output`).
pub fn grad_with(output: &Tensor, seed: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let _mode = set_grad_enabled(create_graph);
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    // Post-order over the nodes that lie on a path from some target to the
    // output; everything else is skipped entirely.
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Tensor> = Vec::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(output.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if !expanded {
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for inp in op.inputs() {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        } else {
            let from_inputs = t.0.op.as_ref().is_some_and(|op| {
                op.inputs().iter().any(|i| relevant.get(&i.id()).copied().unwrap_or(false))
            });
            let rel = targets.contains(&t.id()) || from_inputs;
            relevant.insert(t.id(), rel);
            if rel {
                order.push(t);
            }
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if relevant.get(&output.id()).copied().unwrap_or(false) {
        grads.insert(output.id(), seed.clone());
    }
    for t in order.iter().rev() {
        let g = if targets.contains(&t.id()) {
            grads.get(&t.id()).cloned()
        } else {
            grads.remove(&t.id())
        };
        let (Some(g), Some(op)) = (g, t.0.op.as_ref()) else {
            continue;
        };
        let inputs = op.inputs();
        let needs: Vec<bool> = inputs
            .iter()
            .map(|i| relevant.get(&i.id()).copied().unwrap_or(false))
            .collect();
        let results = op.backward(t, &g, &needs);
        for ((inp, need), r) in inputs.iter().zip(&needs).zip(results) {
            let (true, Some(r)) = (*need, r) else { continue };
            debug_assert_eq!(r.shape(), inp.shape(), "gradient shape mismatch in {}", op.name());
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => prev.add(&r),
                None => r,
            };
            grads.insert(inp.id(), acc);
        }
    }

    wrt.iter()
        .map(|t| grads.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}
