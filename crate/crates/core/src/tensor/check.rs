//! Central-difference gradient verification.

use super::{Bindings, TapeGraph, TensorError};

/// Compares `backward()` against central differences over every coordinate
/// of every trainable leaf. `params` supplies (and is temporarily perturbed
/// at) the trainable leaves; `inputs` stays fixed. Returns the max over
/// coordinates of |analytic − numeric| / max(1, |numeric|).
///
/// Stop-grad branches are held at their unperturbed values while the
/// differences are taken: the backward pass treats those branches as
/// constants, so the numeric side must measure the same function.
pub fn finite_diff_check(
    graph: &mut TapeGraph,
    params: &mut Bindings,
    inputs: &Bindings,
    h: f64,
) -> Result<f64, TensorError> {
    assert!(h > 0.0 && h <= 1e-2, "h must lie in (0, 1e-2]");
    graph.forward(&[params, inputs])?;
    let analytic = graph.backward()?;

    graph.freeze_stop_grads();
    let result = central_differences(graph, params, inputs, h, &analytic);
    graph.thaw_stop_grads();
    let max_rel = result?;

    // Leave the graph holding values for the unperturbed point.
    graph.forward(&[params, inputs])?;
    Ok(max_rel)
}

fn central_differences(
    graph: &mut TapeGraph,
    params: &mut Bindings,
    inputs: &Bindings,
    h: f64,
    analytic: &Bindings,
) -> Result<f64, TensorError> {
    let names = graph.trainable_leaf_names();
    let mut max_rel: f64 = 0.0;
    for name in &names {
        if !params.contains_key(name) {
            return Err(TensorError::MissingBinding(name.clone()));
        }
        let n = params[name].numel();
        for i in 0..n {
            let orig = params.get_mut(name).unwrap().data_mut()[i];

            params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let f_plus = graph.forward(&[params, inputs])?.scalar_value();
            params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let f_minus = graph.forward(&[params, inputs])?.scalar_value();
            params.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[name].data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFiniteCheck { name: name.clone(), index: i });
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
