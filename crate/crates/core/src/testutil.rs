//! Finite-difference oracle shared by the unit tests.

use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over
/// all inputs, with the numeric gradient from central differences.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor], grad: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = grad;
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars);
        let value = tape.value(out).item();
        if !grad {
            return (value, None);
        }
        let g = tape.backward(out).unwrap();
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| {
                g.get(*v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        (value, Some(grads))
    };

    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.unwrap();
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            let a = analytic[k][i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}
