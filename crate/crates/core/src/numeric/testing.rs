//! Finite-difference gradient oracle shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Central differences with step `1e-5` on every input element; relative
/// error must stay within `1e-5` (denominator floored at `1e-3`).
pub fn assert_grads_match(inputs: &[Tensor<f64>], f: impl Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>) {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(&loss).unwrap();

    let eval = |ts: &[Tensor<f64>]| {
        let g = Graph::no_grad();
        let vs: Vec<_> = ts.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).value().item().unwrap()
    };
    let h = 1e-5;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel <= 1e-5, "input {i} element {j}: analytic {a} vs numeric {numeric} (rel {rel:e})");
        }
    }
}
