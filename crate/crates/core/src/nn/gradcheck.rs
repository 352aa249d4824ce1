use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms, so finite-difference round-off on near-zero entries does
/// not dominate.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Fixed, non-degenerate projection weights for reducing an output to a scalar.
fn probe(shape: [usize; 2]) -> Tensor {
    let n = shape[0] * shape[1];
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).sin() + 0.1).collect();
    Tensor::from_vec(shape[0], shape[1], data).expect("probe shape")
}

/// Largest relative error between reverse-mode gradients of `f` and
/// central finite differences with step `eps`, over every input element.
///
/// The scalar being differentiated is `Σ w ⊙ f(inputs)` for fixed weights `w`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).dot(&probe(tape.shape(out)))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(&[(out, probe(tape.shape(out)))]);

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            xs[k].data_mut()[i] = x0 + eps;
            let hi = eval(&xs);
            xs[k].data_mut()[i] = x0 - eps;
            let lo = eval(&xs);
            xs[k].data_mut()[i] = x0;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}
