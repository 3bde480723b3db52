//! Central finite-difference gradient checks. Only forward values are
//! used, so the oracle stays independent of the adjoint rules it checks.

use crate::error::Result;
use crate::numkit::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::rng::XorShiftRng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut XorShiftRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Largest relative error between analytic and central-difference
/// gradients of `f` with respect to every input. Panics if `f` fails.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars).unwrap();
        tape.value(l).item()
    };

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Largest relative error between the analytic gradient a model routes to
/// its parameter store and central differences of the same loss, checking
/// up to `per_param` evenly spaced coordinates of every parameter.
pub fn max_store_grad_error<M, S, F>(model: &M, store: S, f: F, per_param: usize) -> f64
where
    M: Clone,
    S: Fn(&mut M) -> &mut ParameterStore,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    let mut analytic_model = model.clone();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &analytic_model).unwrap();
    let grads = tape.backward(loss).unwrap();
    store(&mut analytic_model).zero_grad();
    grads.accumulate_into(store(&mut analytic_model));

    let eval = |m: &M| -> f64 {
        let mut tape = Tape::new();
        let l = f(&mut tape, m).unwrap();
        tape.value(l).item()
    };
    let mut probe = model.clone();
    let ids: Vec<ParamId> = store(&mut probe).ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store(&mut probe).value(id).numel();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let analytic = store(&mut analytic_model).grad(id).unwrap().data()[j];
            let mut plus = model.clone();
            store(&mut plus).value_mut(id).data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            store(&mut minus).value_mut(id).data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}
