use super::graph::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            if a.is_finite() && n.is_finite() {
                (a - n).abs() / n.abs().max(1.0)
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Central-difference gradient of the scalar `seed` with respect to the
/// named input. The graph is left evaluated at `point`.
pub fn numeric_gradient(
    graph: &mut Graph,
    seed: NodeId,
    point: &Bindings,
    input: &str,
    eps: f64,
) -> Result<Tensor> {
    let base = point
        .get(input)
        .cloned()
        .or_else(|| graph.input_id(input).map(|id| graph.value(id).clone()))
        .ok_or_else(|| Error::UnknownInput(input.to_string()))?;
    let mut bindings = point.clone();
    let mut grad = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe.data_mut()[i] = base.data()[i] + eps;
        bindings.insert(input.to_string(), probe.clone());
        graph.evaluate(&bindings)?;
        let plus = graph.value(seed).item()?;
        probe.data_mut()[i] = base.data()[i] - eps;
        bindings.insert(input.to_string(), probe);
        graph.evaluate(&bindings)?;
        let minus = graph.value(seed).item()?;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    bindings.insert(input.to_string(), base);
    graph.evaluate(&bindings)?;
    Ok(grad)
}

/// Compares backward-pass gradients against central differences for
/// every input named in `point`.
///
/// Returns the max relative error (see [`relative_error`]), or infinity if
/// any evaluation fails or produces a non-finite value. The point should
/// keep relu inputs at least `10 * eps` away from zero.
pub fn grad_check(graph: &mut Graph, seed: NodeId, point: &Bindings, eps: f64) -> f64 {
    let run = |graph: &mut Graph| -> Result<f64> {
        graph.evaluate(point)?;
        let grads = graph.backward(seed)?;
        let mut worst: f64 = 0.0;
        let mut names: Vec<&String> = point.keys().collect();
        names.sort();
        for name in names {
            let id = graph
                .input_id(name)
                .ok_or_else(|| Error::UnknownInput(name.clone()))?;
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(id)));
            let numeric = numeric_gradient(graph, seed, point, name, eps)?;
            worst = worst.max(relative_error(analytic.data(), numeric.data()));
        }
        Ok(worst)
    };
    run(graph).unwrap_or(f64::INFINITY)
}
