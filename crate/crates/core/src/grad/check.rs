use crate::tensor::Tensor;

use super::{GradError, Graph, Var};

/// Analytic vs numeric gradient of one scalar function at one point.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |analytic_i - numeric_i|` divided by the larger infinity norm
    /// of the two gradients (or 1e-12 if both vanish).
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn new(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let max_diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        GradCheckReport { analytic, numeric, max_relative_error: max_diff / scale }
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>, GradError> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(GradError::NonFinite { coordinate: i });
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares the graph's gradient of `build(x)` with central differences of
/// the same function.
pub fn check_gradient(
    build: impl for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
    x: &Tensor,
    eps: f64,
) -> Result<GradCheckReport, GradError> {
    let analytic = {
        let g = Graph::new();
        let input = g.variable(x.clone());
        let out = build(&g, input);
        g.backward(out).get_or_zeros(input).into_data()
    };
    let shape = x.shape().to_vec();
    let numeric = finite_difference_gradient(
        |p| {
            let g = Graph::new();
            let input = g.variable(Tensor::new(shape.clone(), p.to_vec()));
            build(&g, input).item()
        },
        x.data(),
        eps,
    )?;
    Ok(GradCheckReport::new(analytic, numeric))
}
