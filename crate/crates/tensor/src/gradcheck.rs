use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// Returns the maximum over every input coordinate of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let pairs = gradient_pairs(f, inputs, eps)?;
    let mut worst = 0.0f64;
    for (a, n) in pairs.iter().flat_map(|(a, n)| a.iter().zip(n)) {
        worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-8));
    }
    Ok(worst)
}

/// Like [`grad_check`], but measured per input tensor in the max norm:
/// `max|analytic - numeric| / max(1e-8, max|analytic|, max|numeric|)`.
///
/// Coordinates whose gradient is far below the tensor's largest one sit under the
/// rounding floor of the finite difference, so deep models are checked this way.
pub fn grad_check_normwise<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let pairs = gradient_pairs(f, inputs, eps)?;
    let mut worst = 0.0f64;
    for (a, n) in &pairs {
        let diff = a.iter().zip(n).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(n).map(|v| v.abs()).fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

/// Analytic and numeric gradients for every input, flattened.
fn gradient_pairs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<(Vec<f64>, Vec<f64>)>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::Config(format!("grad_check step must be positive, got {eps}")));
    }
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(TensorError::NonFinite(format!("grad_check input {i}")));
    }

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec()))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vs: Vec<Var> = probe.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        let v = g.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite("grad_check probe".into()))
        }
    };

    let mut probe = inputs.to_vec();
    let mut pairs = Vec::with_capacity(inputs.len());
    for (i, (input, a)) in inputs.iter().zip(analytic).enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        pairs.push((a, numeric));
    }
    Ok(pairs)
}
