use ndarray::ArrayD;

use super::Tensor;

/// Central finite-difference check of the gradient of a scalar-valued graph
/// with respect to every element of every input. Returns the worst relative
/// error, with small denominators floored so near-zero gradients compare
/// absolutely at 1e-3 scale.
///
/// `f` must be a pure function of its inputs; it is re-evaluated with
/// perturbed constants, so randomness inside it would invalidate the check.
pub fn finite_diff_check(
    inputs: &[ArrayD<f64>],
    eps: f64,
    f: &dyn Fn(&[Tensor]) -> Tensor,
) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|a| Tensor::leaf(a.clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.value().len(), 1, "gradient check target must be scalar");
    out.backward();
    let grads: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .unwrap_or_else(|| ArrayD::zeros(l.value().raw_dim()))
        })
        .collect();
    out.free_graph();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let consts: Vec<Tensor> = xs.iter().map(|a| Tensor::constant(a.clone())).collect();
        f(&consts).item()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let flat_grad = grads[i]
            .as_slice()
            .expect("gradients are standard layout")
            .to_vec();
        for idx in 0..input.len() {
            let mut plus: Vec<ArrayD<f64>> = inputs.to_vec();
            let mut minus: Vec<ArrayD<f64>> = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += eps;
            minus[i].as_slice_mut().unwrap()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let analytic = flat_grad[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
