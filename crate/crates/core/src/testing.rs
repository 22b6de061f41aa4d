//! Finite-difference gradient checking and random fixtures shared by unit
//! and integration tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `‖a − b‖₂ / max(‖a‖₂ + ‖b‖₂, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Central finite differences of the scalar `f` with respect to `inputs`.
pub fn numeric_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Vec<Tensor>
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars);
        g.value(out).item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        grads.push(grad);
    }
    grads
}

/// Reverse-mode gradients of the scalar `f` with respect to `inputs`.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: F) -> Vec<Tensor>
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let analytic = analytic_gradients(inputs, &f);
    let numeric = numeric_gradients(inputs, 1e-6, &f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .fold(0.0, f64::max)
}

pub fn check_gradients<F>(inputs: &[Tensor], tol: f64, f: F)
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let err = max_gradient_error(inputs, f);
    assert!(
        err <= tol,
        "gradient relative error {err:e} exceeds {tol:e}"
    );
}
