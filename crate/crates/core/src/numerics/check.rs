use alloc::vec::Vec;

use crate::error::Error;
use crate::numerics::{Gradients, Graph, ParamStore, Tensor, Var};

/// Evaluates `program` on a fresh tape bound to `params` and returns the
/// scalar together with the gradient of every trainable parameter.
pub fn value_and_grad<F, E>(params: &ParamStore, program: F) -> core::result::Result<(f64, Gradients), E>
where
    F: FnOnce(&mut Graph) -> core::result::Result<Var, E>,
    E: From<Error>,
{
    let mut graph = Graph::with_params(params, true);
    let root = program(&mut graph)?;
    let grads = graph.param_grads(root)?;
    Ok((graph.scalar(root), Gradients::new(params, grads)))
}

/// Evaluates `program` without recording gradients.
pub fn evaluate<F, E>(params: &ParamStore, program: F) -> core::result::Result<f64, E>
where
    F: FnOnce(&mut Graph) -> core::result::Result<Var, E>,
    E: From<Error>,
{
    let mut graph = Graph::with_params(params, false);
    let root = program(&mut graph)?;
    graph.check_finite()?;
    let (r, c) = graph.shape(root);
    if (r, c) != (1, 1) {
        return Err(Error::NonScalar { rows: r, cols: c }.into());
    }
    Ok(graph.scalar(root))
}

/// Central-difference gradient of `program` for every entry of every
/// trainable parameter.
pub fn finite_diff_grad<F, E>(params: &ParamStore, epsilon: f64, program: F) -> core::result::Result<Gradients, E>
where
    F: Fn(&mut Graph) -> core::result::Result<Var, E>,
    E: From<Error>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(alloc::format!("finite-difference epsilon must be positive, got {epsilon}")).into());
    }
    let mut probe = params.clone();
    let mut grads = Vec::with_capacity(params.len());
    for id in params.ids() {
        if !params.entry(id).trainable {
            grads.push(None);
            continue;
        }
        let (rows, cols) = params.get(id).shape();
        let mut g = Vec::with_capacity(rows * cols);
        for k in 0..rows * cols {
            let original = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + epsilon;
            let plus = evaluate(&probe, &program)?;
            probe.get_mut(id).data_mut()[k] = original - epsilon;
            let minus = evaluate(&probe, &program)?;
            probe.get_mut(id).data_mut()[k] = original;
            g.push((plus - minus) / (2.0 * epsilon));
        }
        grads.push(Some(Tensor::from_parts(rows, cols, g)));
    }
    Ok(Gradients::new(params, grads))
}

/// Worst disagreement between two gradient sets, entry by entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradComparison {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: Option<alloc::string::String>,
    pub compared: usize,
}

/// Relative error is `|a - b| / max(|a|, |b|, floor)`; the floor keeps
/// entries whose true gradient is zero from dividing round-off by zero.
pub fn compare_gradients(analytic: &Gradients, numeric: &Gradients, floor: f64) -> GradComparison {
    let mut out = GradComparison { max_rel_error: 0.0, max_abs_error: 0.0, worst_param: None, compared: 0 };
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        let (Some(a), Some(n)) = (a, n) else { continue };
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let abs = libm::fabs(x - y);
            let rel = abs / libm::fabs(x).max(libm::fabs(y)).max(floor);
            out.compared += 1;
            out.max_abs_error = out.max_abs_error.max(abs);
            if out.worst_param.is_none() || rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst_param = Some(name.into());
            }
        }
    }
    out
}
