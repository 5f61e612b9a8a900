//! Finite-difference gradient oracle for unit tests.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub(crate) const FD_STEP: f64 = 1e-5;
pub(crate) const FD_TOL: f64 = 1e-4;

pub(crate) fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn eval(inputs: &[Tensor], build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).data()[0]
}

/// Largest relative error between analytic and central-difference gradients.
pub(crate) fn max_grad_error(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let grads = g.backward(out).expect("backward");

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("param gradient").clone();
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + FD_STEP;
            let up = eval(&probe, &build);
            probe[i].data_mut()[e] = orig - FD_STEP;
            let down = eval(&probe, &build);
            probe[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub(crate) fn assert_grads_match(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) {
    let err = max_grad_error(inputs, build);
    assert!(
        err < FD_TOL,
        "gradient check failed: max relative error {err:e}"
    );
}
